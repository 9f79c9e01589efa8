import sys
import dataclasses
from pathlib import Path

from terra_ssl import ExperimentConfig, build_model, generate_scenes, pretrain
from terra_ssl.Dataset import build_manifest
from terra_ssl.Experiment import pretext_evaluation, save_gallery
from terra_ssl.Trainer import training_summary
from terra_ssl.Utils import configure_logging, enable_determinism

config = ExperimentConfig.from_yaml(sys.argv[1] if len(sys.argv) > 1 else '../configs/desk.yaml')
configure_logging(1)
enable_determinism(config.seed)
results = Path('../results/pretext_sanity')

# Synthetic corpus
scenes = generate_scenes(dataclasses.replace(config.synth, seed=config.seed), config.dataset.scene_count)
manifest = build_manifest(scenes, config.dataset, 'pretext', seed=config.seed)
manifest.summary()

# Terrain pretraining
model_config = dataclasses.replace(config.model, head='reconstruction')
result = pretrain(
    build_model(model_config, config.seed), manifest, config.pretrain, config.losses,
    seed=config.seed, run_dir=results / 'run',
)
result.params.save('../models/terrain')
training_summary(result.history, results / 'plots', title="Terrain pretraining")

# Structure removal on the test split
report = pretext_evaluation(result.params, manifest, 'test', config.eval.structure_threshold_m, config.losses)
report.save(results / 'pretext_report.tsv')
save_gallery(result.params, manifest.split('test')[:config.eval.gallery_count], results / 'gallery.png')

first = result.history['val_loss'].iloc[0]
best = result.history['val_loss'].min()
structure_iou = report.aggregate()['iou']
print(result.history.to_string(index=False))
print(f"validation loss: epoch 1 {first:.5f}, best {best:.5f} (ratio {best / first:.3f})")
print(f"structure removal IoU on test: {structure_iou:.3f}")

failed = False
if best > 0.5 * first:
    print("FAILED: the validation loss was not halved.")
    failed = True
if structure_iou <= 0.8:
    print("FAILED: structure removal IoU <= 0.8.")
    failed = True
sys.exit(1 if failed else 0)
