import sys
import dataclasses
from pathlib import Path

from terra_ssl import ExperimentConfig, ModelParameters, build_model, generate_scenes, make_proxy_init, pretrain, compare_inits
from terra_ssl.Dataset import build_manifest
from terra_ssl.Utils import configure_logging, enable_determinism

config = ExperimentConfig.from_yaml(sys.argv[1] if len(sys.argv) > 1 else '../configs/desk.yaml')
configure_logging(1)
enable_determinism(config.seed)
results = Path('../results/label_efficiency')
models = Path('../models')

scenes = generate_scenes(dataclasses.replace(config.synth, seed=config.seed), config.dataset.scene_count)
pretext = build_manifest(scenes, config.dataset, 'pretext', seed=config.seed)
segmentation = build_manifest(scenes, config.dataset, 'segmentation', seed=config.seed)
segmentation.summary()

# Initializations, reused when pretext_sanity.py already produced them
model_config = dataclasses.replace(config.model, head='reconstruction')
if (models / 'terrain' / 'manifest.txt').exists():
    terrain = ModelParameters.load(models / 'terrain')
else:
    terrain = pretrain(build_model(model_config, config.seed), pretext, config.pretrain, config.losses, seed=config.seed).params
    terrain.save(models / 'terrain')
if (models / 'proxy' / 'manifest.txt').exists():
    proxy = ModelParameters.load(models / 'proxy')
else:
    proxy = make_proxy_init(pretext, model_config, config.pretrain, config.losses, seed=config.seed, block_px=config.report.proxy_block_px)
    proxy.save(models / 'proxy')
inits = {
    'random': build_model(dataclasses.replace(config.model, head='segmentation'), config.seed),
    'proxy': proxy,
    'terrain': terrain,
}

report = compare_inits(inits, segmentation, config.finetune, config.eval, config.report, config.losses, run_root=results / 'runs')
report.save(results)
table = report.table()
print(table.to_string(float_format=lambda v: f"{v:.3f}"))

smallest, largest = min(config.report.fractions), max(config.report.fractions)
gap_small = table.loc[('terrain', smallest), 'test_iou'] - table.loc[('random', smallest), 'test_iou']
gap_large = table.loc[('terrain', largest), 'test_iou'] - table.loc[('random', largest), 'test_iou']
print(f"terrain - random test IoU: {gap_small:+.3f} with {smallest:g} of the labels, {gap_large:+.3f} with {largest:g}")

failed = False
if gap_small < 0.05:
    print(f"FAILED: terrain init does not beat random init by 0.05 IoU with {smallest:g} of the labels.")
    failed = True
if gap_small <= gap_large:
    print("FAILED: the advantage of terrain pretraining does not grow when labels are scarce.")
    failed = True
sys.exit(1 if failed else 0)
