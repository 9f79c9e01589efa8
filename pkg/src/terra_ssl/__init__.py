from terra_ssl.SceneSynth import SynthConfig, SceneBundle, synthesize_scene, generate_scenes, save_scene, load_scene
from terra_ssl.Raster import ElevationRaster, TerrainField, ArrayAdapter, RasterioAdapter, ingest_raster, ndsm_from_pair
from terra_ssl.Dataset import DatasetConfig, DatasetManifest, NoiseSpec, TileRecord, tile_scene, normalize_tile, make_splits, subsample_labels, inject_label_noise
from terra_ssl.Network import ModelConfig, ModelParameters, FeatureMaps, build_model, forward, se_block, transfer_weights
from terra_ssl.Losses import LossWeights, PerceptualExtractor, smooth_l1, perceptual_distance, reconstruction_loss, weighted_cross_entropy, dice_loss
from terra_ssl.Metrics import MetricsReport, iou, boundary_iou, score
from terra_ssl.Trainer import PretrainConfig, FinetuneConfig, TrainState, pretrain, finetune
from terra_ssl.Experiment import EvalConfig, ReportConfig, make_proxy_init, compare_inits, evaluate, shift_benchmark
from terra_ssl.Config import ExperimentConfig
