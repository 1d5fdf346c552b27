"""Flat ``key=value`` run configuration shared by every CLI stage."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields

from .ddpg import TrainConfig

BACKENDS = ("simulated", "remote")
BACKBONES = ("mf", "widedeep", "none")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig(TrainConfig):
    """TrainConfig plus data paths, oracle selection and run bookkeeping.

    Paths left empty default to files inside ``out_dir``.
    """

    reviews: str = ""
    meta: str = ""
    world: str = ""
    out_dir: str = "run"
    manifest: str = ""
    items: str = ""
    embeddings: str = ""
    checkpoint: str = ""
    cache: str = ""
    report: str = ""
    oracle: str = "simulated"
    remote_url: str = "https://api.openai.com/v1/chat/completions"
    remote_model: str = "gpt-4"
    remote_timeout: float = 60.0
    seeds: tuple = (0, 1, 2)
    arms: tuple = ("no_retrieval", "random_retrieval", "trained_warm")
    split_seed: int = 0
    kcore: int = 5
    backbone: str = "mf"
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.001
    pretrain_batch: int = 256
    widedeep_hidden: tuple = (64,)
    test_limit: int = 0
    w_sem: float = 1.0
    w_coll: float = 3.0
    synth_seed: int = 0
    synth_users: int = 2000
    synth_items: int = 500
    synth_latent_dim: int = 2
    synth_zipf_s: float = 0.7
    synth_categories: int = 2
    synth_per_user: int = 50
    synth_locality: float = 50.0
    synth_category_noise: float = 2.0

    def path(self, key, default_name):
        value = getattr(self, key)
        return value if value else os.path.join(self.out_dir, default_name)

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def synth_kwargs(self):
        return {
            "latent_dim": self.synth_latent_dim,
            "zipf_s": self.synth_zipf_s,
            "n_categories": self.synth_categories,
            "per_user": self.synth_per_user,
            "locality": self.synth_locality,
            "category_noise": self.synth_category_noise,
        }

    def validate(self):
        try:
            super().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.oracle not in BACKENDS:
            raise ConfigError(f"unknown oracle backend {self.oracle!r}; expected one of {BACKENDS}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        from .evaluation import ARMS

        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ConfigError(f"unknown arms {bad}; expected a subset of {ARMS}")
        if self.kcore < 1 or self.pretrain_epochs < 0 or self.test_limit < 0:
            raise ConfigError("kcore must be >= 1; pretrain_epochs and test_limit >= 0")
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}
_HINTS = typing.get_type_hints(RunConfig)


def _coerce(key, raw):
    hint = _HINTS[key]
    default = _FIELDS[key].default
    text = raw.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if key == "encoder_anchor":
            return None if text.lower() in ("", "none") else float(text)
        if key == "actor_lr":
            return None if text.lower() in ("", "none") else float(text)
        if hint is tuple or isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            sample = default[0] if default else ""
            return tuple(int(p) for p in parts) if isinstance(sample, int) else tuple(parts)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(lines, source="config"):
    """Parse ``key=value`` lines (``#`` comments, blank lines ignored) into typed values."""
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the file, then ``overrides`` (already-typed or raw strings)."""
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_pairs(fh, source=path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    return RunConfig(**values).validate()


def dump_config(config):
    """Render a config back to ``key=value`` lines (round-trips through parse_pairs)."""
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "none"
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"
