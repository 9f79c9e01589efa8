"""
Experiment configuration: one YAML file with a section per module, environment overrides and a verbatim snapshot in every run directory.

```yaml
seed: 0
output_root: out
synth:
  size_px: 512
dataset:
  tile_px: 128
finetune:
  label_fraction: 0.01
```

Any field can be overridden from the environment with `TERRA_SSL_<SECTION>__<FIELD>=value` (the value is parsed as YAML), the global fields with `TERRA_SSL_SEED` and `TERRA_SSL_OUTPUT_ROOT`.
"""
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .Dataset import DatasetConfig, NoiseSpec
from .Errors import ConfigurationError, MissingArtifactError
from .Experiment import EvalConfig, ReportConfig
from .Losses import LossWeights
from .Network import ModelConfig
from .SceneSynth import SynthConfig
from .Trainer import FinetuneConfig, PretrainConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = 'TERRA_SSL_'

SECTIONS = {
    'synth': SynthConfig,
    'dataset': DatasetConfig,
    'model': ModelConfig,
    'losses': LossWeights,
    'pretrain': PretrainConfig,
    'finetune': FinetuneConfig,
    'eval': EvalConfig,
    'report': ReportConfig,
}


def build_section(cls, values, section):
    """
    Instantiates a configuration dataclass from a mapping. Unknown keys are rejected with their dotted name, lists become tuples.

    :param cls: dataclass type.
    :param values: mapping of field values (None for all defaults).
    :param section: dotted name of the section, for error messages.
    """
    values = values or {}
    if not isinstance(values, dict):
        raise ConfigurationError(f"configuration section '{section}' must be a mapping.")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            raise ConfigurationError(f"unknown configuration key '{section}.{key}'.")
        kwargs[key] = _coerce(fields[key], value, f"{section}.{key}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"invalid value in section '{section}': {exc}") from exc


def _coerce(spec, value, name):
    "Lists become tuples; numbers written as strings (YAML reads `1e-6` as text) are converted."
    if isinstance(value, list):
        return tuple(value)
    default = spec.default
    if isinstance(value, str) and isinstance(default, (int, float)) and not isinstance(default, bool):
        try:
            return int(value) if isinstance(default, int) else float(value)
        except ValueError as exc:
            raise ConfigurationError(f"'{name}' must be a number, got {value!r}.") from exc
    return value


def _plain(value):
    "Converts tuples (recursively) to lists for YAML."
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


@dataclass
class ExperimentConfig:
    """
    Configuration of a whole experiment.

    :param seed: global seed (scene generation, splits, label budgets, initialization, batch order). `gen-data` uses it in place of `synth.seed`.
    :param output_root: root of the generated artifacts.
    """
    seed: int = 0
    output_root: str = 'out'
    synth: SynthConfig = field(default_factory=SynthConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    @classmethod
    def from_dict(cls, values):
        values = dict(values or {})
        unknown = set(values) - set(SECTIONS) - {'seed', 'output_root'}
        if unknown:
            raise ConfigurationError(f"unknown configuration key '{sorted(unknown)[0]}'.")
        kwargs = {name: build_section(section, values.get(name), name) for name, section in SECTIONS.items()}
        return cls(seed=int(values.get('seed', 0)), output_root=str(values.get('output_root', 'out')), **kwargs)

    @classmethod
    def from_yaml(cls, path=None, environ=None):
        """
        Reads a YAML configuration (all defaults when `path` is None) and applies the environment overrides.

        :param path: YAML file.
        :param environ: mapping used instead of `os.environ`.
        """
        values = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise MissingArtifactError(f"configuration file {path} does not exist.")
            try:
                values = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
            except yaml.YAMLError as exc:
                raise ConfigurationError(f"{path} is not valid YAML: {exc}") from exc
            if not isinstance(values, dict):
                raise ConfigurationError(f"{path} must contain a mapping.")
        return cls.from_dict(apply_environment(values, os.environ if environ is None else environ))

    def to_dict(self):
        values = {'seed': self.seed, 'output_root': self.output_root}
        for name in SECTIONS:
            values[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return values

    def save_yaml(self, path):
        "Writes the resolved configuration; `from_yaml()` on the result gives back an equal configuration."
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding='utf-8')

    def replace(self, **sections):
        "Copy with some top-level fields or sections replaced."
        return dataclasses.replace(self, **sections)

    @property
    def root(self):
        return Path(self.output_root)


def apply_environment(values, environ):
    """
    Merges `TERRA_SSL_*` variables into a configuration mapping.

    :param values: mapping read from YAML.
    :param environ: environment mapping.
    """
    values = {k: (dict(v) if isinstance(v, dict) else v) for k, v in values.items()}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX):].lower()
        value = yaml.safe_load(raw)
        if name in ('seed', 'output_root'):
            values[name] = value
            continue
        section, sep, field_name = name.partition('__')
        if not sep or section not in SECTIONS:
            raise ConfigurationError(f"environment variable {key} does not name a configuration field.")
        values.setdefault(section, {})
        if values[section] is None:
            values[section] = {}
        values[section][field_name] = value
        logger.debug("Configuration override from %s: %s.%s = %r", key, section, field_name, value)
    return values


def load_noise_spec(path, seed=None):
    """
    Reads a NoiseSpec from a YAML mapping of its fields.

    :param path: YAML file.
    :param seed: overrides the seed of the file.
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"noise specification {path} does not exist.")
    values = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
    if seed is not None:
        values['seed'] = seed
    return build_section(NoiseSpec, values, 'noise')
