"""Run configuration: a flat key=value text file plus command-line overrides.

Unknown keys are rejected; dimensional keys must be positive; the value-head
count must divide evenly when tensor parallelism is configured.
"""

import dataclasses
from dataclasses import dataclass

from .recurrence import ConfigError


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    model: str = "m2rnn"
    task: str = "s3"
    d_model: int = 32
    n_heads: int = 2
    k_dim: int = 16
    v_dim: int = 8
    hidden: int = 64
    train_len: int = 32
    eval_lengths: tuple = (32, 64, 96)
    steps: int = 1200
    batch_size: int = 64
    peak_lr: float = 2e-2
    warmup_frac: float = 0.1
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    state_clip: float = 1.0
    seq_len: int = 64
    corpus: str = ""
    tp_scheme: str = "topology-independent"
    tp_world: int = 2
    bench_b: int = 8
    bench_t: int = 64
    bench_reps: int = 5
    gradcheck_seeds: int = 3
    corrupt_backward: bool = False  # negative-control fixture for gradcheck

    def validate(self):
        for key in ("d_model", "n_heads", "k_dim", "v_dim", "hidden", "train_len",
                    "steps", "batch_size", "seq_len", "tp_world", "bench_b",
                    "bench_t", "bench_reps", "gradcheck_seeds"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if any(length <= 0 for length in self.eval_lengths):
            raise ConfigError(f"eval_lengths must be positive, got {self.eval_lengths}")
        if self.model not in ("m2rnn", "gru", "vector-rnn", "diag-linear"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.task not in ("s2", "s3", "s4", "s5", "char-lm"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.tp_scheme not in ("topology-aware", "topology-independent"):
            raise ConfigError(f"unknown tp_scheme {self.tp_scheme!r}")
        if self.n_heads % self.tp_world != 0:
            raise ConfigError(
                f"n_heads={self.n_heads} not divisible by tp_world={self.tp_world}")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name, raw):
    field = _FIELDS.get(name)
    if field is None:
        raise ConfigError(f"unknown config key {name!r}")
    raw = raw.strip()
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    if field.type in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if field.type in ("tuple", tuple):
        return tuple(int(part) for part in raw.split(",") if part.strip())
    return raw


def parse_config_text(text, base=None):
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        name, raw = line.split("=", 1)
        name = name.strip()
        setattr(cfg, name, _parse_value(name, raw))
    return cfg


def load_config(path=None, overrides=(), seed=None, out=None):
    """Config file, then --override pairs, then dedicated flags."""
    cfg = RunConfig()
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read(), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
        name, raw = item.split("=", 1)
        setattr(cfg, name.strip(), _parse_value(name.strip(), raw))
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    return cfg.validate()
