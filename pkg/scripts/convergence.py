import sys
import dataclasses
from pathlib import Path

import pandas as pd

from terra_ssl import ExperimentConfig, ModelParameters, build_model, generate_scenes, pretrain, compare_inits
from terra_ssl.Dataset import build_manifest
from terra_ssl.Utils import configure_logging, enable_determinism

REFERENCE_EPOCH = 20
EPOCH_BUDGET = 10

config = ExperimentConfig.from_yaml(sys.argv[1] if len(sys.argv) > 1 else '../configs/desk.yaml')
configure_logging(1)
enable_determinism(config.seed)
results = Path('../results/convergence')
models = Path('../models')

scenes = generate_scenes(dataclasses.replace(config.synth, seed=config.seed), config.dataset.scene_count)
segmentation = build_manifest(scenes, config.dataset, 'segmentation', seed=config.seed)

model_config = dataclasses.replace(config.model, head='reconstruction')
if (models / 'terrain' / 'manifest.txt').exists():
    terrain = ModelParameters.load(models / 'terrain')
else:
    pretext = build_manifest(scenes, config.dataset, 'pretext', seed=config.seed)
    terrain = pretrain(build_model(model_config, config.seed), pretext, config.pretrain, config.losses, seed=config.seed).params
    terrain.save(models / 'terrain')
inits = {
    'random': build_model(dataclasses.replace(config.model, head='segmentation'), config.seed),
    'terrain': terrain,
}

finetune_config = dataclasses.replace(config.finetune, max_epochs=max(config.finetune.max_epochs, REFERENCE_EPOCH))
report_config = dataclasses.replace(config.report, inits=('random', 'terrain'), fractions=(1.0,))
report = compare_inits(inits, segmentation, finetune_config, config.eval, report_config, config.losses, run_root=results / 'runs')
report.save(results)

# Median training loss per epoch over seeds
curves = pd.concat(
    [history.assign(init=init, seed=seed) for (init, fraction, seed), history in report.histories.items()],
    ignore_index=True,
).groupby(['init', 'epoch'])['train_loss'].median().unstack(level=0)
print(curves.to_string(float_format=lambda v: f"{v:.4f}"))

reference = curves.loc[REFERENCE_EPOCH, 'random']
reached = curves.index[curves['terrain'] <= reference]
epoch = int(reached[0]) if len(reached) else None
print(f"random init training loss at epoch {REFERENCE_EPOCH}: {reference:.4f}")
print(f"terrain init reaches it at epoch {epoch}" if epoch else "terrain init never reaches it")

if epoch is None or epoch > EPOCH_BUDGET:
    print(f"FAILED: terrain init needs more than {EPOCH_BUDGET} epochs.")
    sys.exit(1)
