"""
Run Configuration
=================

`RunConfig` collects every setting of a compression run in five typed
sections, and round-trips through YAML:

```yaml
run:       {seed: 0, n1: 100, n2: 100, m: 5, workers: 1, ...}
policy:    {lr_remove: 0.003, lr_shrink: 0.01, baseline_beta: 0.9, ...}
reward:    {constraints: ['params<=20000'], mode: Hard, t_anneal: null}
eval:      {epochs: 5, lam: 0.5, batch_size: 64, ...}
surrogate: {enabled: false, teacher: surrogate8, alpha: 0.3, beta: 0.4, ...}
```

Missing keys take their defaults; unknown keys are an error. Values set on
the command line are overlaid on the file's values (`with_overrides`).
"""

import dataclasses

import yaml

from distilrl.rewards import (
    ConstraintMode,
    RewardConfig,
    parse_constraint,
)


class ConfigError(ValueError):
    """A configuration file or override could not be used."""


@dataclasses.dataclass(frozen=True)
class RunSection:
    seed: int = 0
    n1: int = 100
    n2: int = 100
    m: int = 5
    workers: int = 1
    stages: str = "both"
    checkpoint_every: int = 10
    abort_after: int = 10
    verbose: bool = False


@dataclasses.dataclass(frozen=True)
class PolicySection:
    lr_remove: float = 0.003
    lr_shrink: float = 0.01
    baseline_beta: float = 0.9
    actor_critic: bool = False
    hidden_remove: int = 30
    hidden_shrink: int = 50
    n_layers: int = 2
    lock_classifier: bool = True
    transfer_checkpoint: str = None


@dataclasses.dataclass(frozen=True)
class RewardSection:
    constraints: tuple = ()
    mode: str = "None"
    t_anneal: int = None


@dataclasses.dataclass(frozen=True)
class EvalSection:
    epochs: int = 5
    final_epochs: int = 20
    teacher_epochs: int = 10
    lam: float = 0.5
    lr: float = 0.001
    batch_size: int = 64
    max_flatten: int = 16384
    val_fraction: float = 0.1
    train_limit: int = None


@dataclasses.dataclass(frozen=True)
class SurrogateSection:
    enabled: bool = False
    teacher: str = "surrogate8"
    a_teacher: float = 0.99
    alpha: float = 0.3
    beta: float = 0.4


SECTIONS = {
    'run': RunSection,
    'policy': PolicySection,
    'reward': RewardSection,
    'eval': EvalSection,
    'surrogate': SurrogateSection,
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    run: RunSection = RunSection()
    policy: PolicySection = PolicySection()
    reward: RewardSection = RewardSection()
    eval: EvalSection = EvalSection()
    surrogate: SurrogateSection = SurrogateSection()

    def __post_init__(self):
        if self.run.n1 < 1 or self.run.n2 < 1:
            raise ConfigError(f"n1 and n2 must be >= 1, got {self.run.n1}, "
                              f"{self.run.n2}")
        if self.run.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.run.m}")
        if self.run.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.run.workers}")
        if self.run.stages not in ("1", "2", "both"):
            raise ConfigError(f"unknown stages {self.run.stages!r}, expected "
                              f"'1', '2' or 'both'")
        if self.eval.epochs < 1 or self.eval.final_epochs < 1:
            raise ConfigError("training epochs must be >= 1")
        if not 0.0 < self.eval.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got "
                              f"{self.eval.val_fraction}")
        try:
            ConstraintMode(self.reward.mode)
        except ValueError:
            raise ConfigError(
                f"unknown constraint mode {self.reward.mode!r}, expected one "
                f"of {[mode.value for mode in ConstraintMode]}"
            ) from None
        if self.reward.constraints and self.reward.mode == "None":
            raise ConfigError("constraints given but reward mode is 'None'")

    def constraint_rows(self):
        """Parse the constraint strings (raises `ConstraintParseError`)."""
        return tuple(parse_constraint(text)
                     for text in self.reward.constraints)

    def reward_config(self, a_teacher, t_anneal):
        """
        The `RewardConfig` for one stage. `t_anneal` is used when the config
        leaves it unset (the stage's iteration count).
        """
        return RewardConfig(
            a_teacher=a_teacher,
            constraints=self.constraint_rows(),
            mode=self.reward.mode,
            t_anneal=self.reward.t_anneal or t_anneal,
        )


def _coerce(section, field, value):
    if value is None:
        return None
    if field.type is tuple:
        return tuple(str(v) for v in ([value] if isinstance(value, str)
                                      else value))
    if field.type is bool and not isinstance(value, bool):
        raise ConfigError(f"{section}.{field.name} must be true or false, "
                          f"got {value!r}")
    try:
        return field.type(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{field.name} must be "
                          f"{field.type.__name__}, got {value!r}") from None


def _section_from_dict(name, cls, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping, got "
                          f"{type(data).__name__}")
    known = {field.name for field in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
    return cls(**{
        field.name: _coerce(name, field, data[field.name])
        for field in dataclasses.fields(cls) if field.name in data
    })


def config_from_dict(data):
    """Build a `RunConfig` from nested dicts (e.g. parsed YAML)."""
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping of sections")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    return RunConfig(**{
        name: _section_from_dict(name, cls, data.get(name))
        for name, cls in SECTIONS.items()
    })


def config_to_dict(cfg):
    data = {}
    for name in SECTIONS:
        section = dataclasses.asdict(getattr(cfg, name))
        if 'constraints' in section:
            section['constraints'] = list(section['constraints'])
        data[name] = section
    return data


def load_config(path):
    """
    Read a YAML config file.

    Raises `ConfigError` if the file is missing, is not valid YAML, or does
    not describe a valid `RunConfig`.
    """
    try:
        with open(path) as fp:
            data = yaml.safe_load(fp)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"invalid YAML in {path}: {err}") from err
    try:
        return config_from_dict(data)
    except TypeError as err:
        raise ConfigError(f"invalid config {path}: {err}") from err


def dump_config(cfg):
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def save_config(cfg, path):
    """Write the YAML snapshot of `cfg`; `load_config` gives it back."""
    with open(path, 'w') as fp:
        fp.write(dump_config(cfg))


def with_overrides(cfg, overrides={}, **kw_overrides):
    """
    Overlay values on `cfg`. Keys are `"section.field"` strings; `None`
    values are skipped, so unset command-line flags leave the file's values
    alone.
    """
    data = config_to_dict(cfg)
    for key, value in (overrides | kw_overrides).items():
        if value is None:
            continue
        section, _, field = key.partition('.')
        if section not in data or field not in data[section]:
            raise ConfigError(f"unknown config key {key!r}")
        data[section][field] = value
    return config_from_dict(data)


PRESETS = {
    'default': {},
    'desk': {'run.n1': 30, 'run.n2': 30},
}


def preset(name):
    """A named starting configuration: `default` or `desk` (N1 = N2 = 30)."""
    try:
        return with_overrides(RunConfig(), PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}, expected one of "
                          f"{sorted(PRESETS)}") from None
