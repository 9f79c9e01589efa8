import sys
import dataclasses
from pathlib import Path

from terra_ssl import ExperimentConfig, ModelParameters, build_model, generate_scenes, make_proxy_init, pretrain, shift_benchmark
from terra_ssl.Dataset import build_manifest
from terra_ssl.Utils import configure_logging, enable_determinism

config = ExperimentConfig.from_yaml(sys.argv[1] if len(sys.argv) > 1 else '../configs/desk.yaml')
configure_logging(1)
enable_determinism(config.seed)
results = Path('../results/shift_robustness')
models = Path('../models')

# Pretraining happens on the original resolution, fine-tuning and testing on the shifted scenes
scenes = generate_scenes(dataclasses.replace(config.synth, seed=config.seed), config.dataset.scene_count)
model_config = dataclasses.replace(config.model, head='reconstruction')
if (models / 'terrain' / 'manifest.txt').exists() and (models / 'proxy' / 'manifest.txt').exists():
    terrain = ModelParameters.load(models / 'terrain')
    proxy = ModelParameters.load(models / 'proxy')
else:
    pretext = build_manifest(scenes, config.dataset, 'pretext', seed=config.seed)
    terrain = pretrain(build_model(model_config, config.seed), pretext, config.pretrain, config.losses, seed=config.seed).params
    proxy = make_proxy_init(pretext, model_config, config.pretrain, config.losses, seed=config.seed, block_px=config.report.proxy_block_px)
    terrain.save(models / 'terrain')
    proxy.save(models / 'proxy')
inits = {
    'random': build_model(dataclasses.replace(config.model, head='segmentation'), config.seed),
    'proxy': proxy,
    'terrain': terrain,
}

report = shift_benchmark(
    inits, scenes, config.dataset, config.finetune, config.eval, config.report, config.losses,
    run_root=results / 'runs', fraction=1.0, seed=config.seed,
)
report.save(results, target='noisy')
for target in ('noisy', 'clean'):
    print(f"{target} masks:")
    print(report.table(target).to_string(float_format=lambda v: f"{v:.3f}"))

test_iou = report.table('noisy')['test_iou'].droplevel('fraction')
print(f"test IoU: terrain {test_iou['terrain']:.3f}, proxy {test_iou['proxy']:.3f}, random {test_iou['random']:.3f}")
if not test_iou['terrain'] > test_iou['proxy'] > test_iou['random']:
    print("FAILED: the ranking terrain > proxy > random does not hold.")
    sys.exit(1)
