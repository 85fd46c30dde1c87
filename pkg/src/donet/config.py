"""Training configuration and its line-based ``key = value`` file format.

Keys live in one flat namespace: every field of TrainConfig, DonetConfig,
ObjectiveConfig and LossParams may appear, in any order.
"""

from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .losses import LossParams, ObjectiveConfig
from .model import DonetConfig


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 80
    batch_size: int = 8
    decay_every: int = 40
    decay_factor: float = 10.0
    seed: int = 0
    val_fraction: float = 0.15
    data_dir: str = ""
    synth_count: int = 200
    synth_test_count: int = 50
    synth_seed: int = 0
    augment: bool = True
    overfit: bool = False
    max_steps: int = 0
    eval_every: int = 1
    out_dir: str = "runs/donet"
    model: DonetConfig = field(default_factory=DonetConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for batchnorm, got {self.batch_size}")
        if self.decay_every < 1 or self.decay_factor <= 0:
            raise ConfigError("decay_every must be >= 1 and decay_factor > 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0 (0 means no limit)")
        if not self.data_dir and self.synth_count < 2:
            raise ConfigError("need data_dir or synth_count >= 2")
        self.model.validate()
        self.objective.validate()
        return self

    def learning_rate(self, epoch):
        """Step schedule: lr / decay_factor**floor(epoch / decay_every)."""
        return self.lr / self.decay_factor ** (epoch // self.decay_every)


def _sections(cfg):
    return (cfg, cfg.model, cfg.objective, cfg.objective.params)


def _owners():
    table = {}
    for cls in (TrainConfig, DonetConfig, ObjectiveConfig, LossParams):
        for f in fields(cls):
            if f.name in ("model", "objective", "params"):
                continue
            if f.name in table:
                raise ConfigError(f"duplicate config key {f.name}")
            table[f.name] = cls
    return table


KEYS = _owners()


def _parse_value(raw, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.replace("x", ",").split(",") if p.strip()]
        kind = type(default[0]) if default else int
        return tuple(kind(p) for p in parts)
    return raw


def _target(cfg, key):
    for section in _sections(cfg):
        if type(section) is KEYS[key]:
            return section
    raise ConfigError(f"no section for {key}")


def set_value(cfg, key, raw):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    section = _target(cfg, key)
    try:
        value = _parse_value(raw, getattr(section, key))
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {err}") from None
    setattr(section, key, value)


def parse_config(text, base=None):
    cfg = base if base is not None else TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            set_value(cfg, key, raw)
        except ConfigError as err:
            raise ConfigError(f"line {lineno}: {err}") from None
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as fp:
        return parse_config(fp.read()).validate()


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def config_items(cfg):
    """Flat (key, text) pairs in a fixed order; round-trips through parse_config."""
    items = []
    for section in _sections(cfg):
        for f in fields(section):
            if f.name in KEYS:
                items.append((f.name, _format(getattr(section, f.name))))
    return items


def format_config(cfg):
    return "".join(f"{k} = {v}\n" for k, v in config_items(cfg))


def copy_config(cfg):
    return parse_config(format_config(cfg))


def replace(cfg, **changes):
    """Copy ``cfg`` with flat-namespace keys overridden."""
    out = copy_config(cfg)
    for key, value in changes.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(_target(out, key), key, value)
    return out
