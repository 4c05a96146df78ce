"""Run configuration: flat ``key = value`` text with one ``[section]`` per module.

Example::

    [run]
    seed = 3

    [spectrogram]
    kind = CQT

    [training]
    epochs = 20, 10, 5

Unknown sections or keys are rejected. ``ESDD_SEED`` in the environment
overrides ``run.seed``; command-line flags override both.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, IoError
from .features import SpectrogramConfig, default_config
from .mixup import MixupConfig
from .model import BackboneConfig
from .training import DEFAULT_STAGES, LossSettings, StageConfig, plain_stage, stage_plan

SEED_ENV = "ESDD_SEED"


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _blocks(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(int(v) for v in b.split(":")) for b in text.split(","))


def _format_blocks(blocks) -> str:
    return ",".join(":".join(str(v) for v in b) for b in blocks)


_SPEC = SpectrogramConfig()
_LOSS = LossSettings()
_MIX = MixupConfig()
_BACKBONE = BackboneConfig()

# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, 0),
    },
    "spectrogram": {
        "kind": (str.upper, "GAM"),
        "n_bands": (int, None),
        "window_len": (int, _SPEC.window_len),
        "hop_len": (int, _SPEC.hop_len),
        "f_min": (float, None),
        "f_max": (float, _SPEC.f_max),
        "bins_per_octave": (int, _SPEC.bins_per_octave),
        "log_floor": (float, _SPEC.log_floor),
    },
    "backbone": {
        "blocks": (_blocks, _BACKBONE.blocks),
        "embedding_dim": (int, _BACKBONE.embedding_dim),
    },
    "losses": {
        "weights": (_floats, _LOSS.weights),
        "margin": (int, _LOSS.margin),
        "contrastive_margin": (float, _LOSS.contrastive_margin),
        "center_update_rate": (float, _LOSS.center_update_rate),
        "lam_base": (float, _LOSS.lam_base),
        "lam_gamma": (float, _LOSS.lam_gamma),
        "lam_min": (float, _LOSS.lam_min),
    },
    "mixup": {
        "alpha": (float, _MIX.alpha),
        "apply_probability": (float, _MIX.apply_probability),
        "enabled": (_bool, _MIX.enabled),
    },
    "training": {
        "strategy": (str, "three-stage"),
        "epochs": (_ints, tuple(s.epochs for s in DEFAULT_STAGES)),
        "learning_rates": (_floats, tuple(s.learning_rate for s in DEFAULT_STAGES)),
        "batch_size": (int, 16),
        "plain_epochs": (int, 20),
        "plain_learning_rate": (float, 5e-4),
    },
    "data": {
        "preset": (str, "default"),
        "clips_dev": (int, 100),
        "clips_test": (int, 50),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = value

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    def spectrogram(self, kind: str | None = None) -> SpectrogramConfig:
        s = dict(self.values["spectrogram"])
        kind = (kind or s.pop("kind")).upper()
        s.pop("kind", None)
        overrides = {k: v for k, v in s.items() if v is not None}
        try:
            return default_config(kind, **overrides)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def backbone(self) -> BackboneConfig:
        b = self.values["backbone"]
        return BackboneConfig(blocks=b["blocks"], embedding_dim=b["embedding_dim"])

    def loss_settings(self) -> LossSettings:
        v = self.values["losses"]
        if len(v["weights"]) != 3:
            raise ConfigError("losses.weights needs three values (asoftmax, contrastive, center)")
        return LossSettings(**{**v, "weights": tuple(v["weights"])})

    def mixup(self) -> MixupConfig:
        return MixupConfig(**self.values["mixup"])

    def stages(self) -> tuple[StageConfig, ...]:
        t = self.values["training"]
        if t["strategy"] == "plain":
            return (plain_stage(t["plain_epochs"], t["plain_learning_rate"], mixup=self.mixup().enabled),)
        if t["strategy"] != "three-stage":
            raise ConfigError(f"training.strategy must be three-stage or plain, got {t['strategy']!r}")
        if len(t["epochs"]) != 3 or len(t["learning_rates"]) != 3:
            raise ConfigError("training.epochs and training.learning_rates need three values each")
        return stage_plan({"epochs": t["epochs"], "learning_rates": t["learning_rates"]})

    def to_text(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for key, value in keys.items():
                if value is None:
                    continue
                if key == "blocks":
                    text = _format_blocks(value)
                elif isinstance(value, tuple):
                    text = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
                else:
                    text = str(value).lower() if isinstance(value, bool) else str(value)
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown config section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown config key {section}.{key}")
        parser = SCHEMA[section][key][0]
        try:
            cfg.values[section][key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {section}.{key}: {exc}") from None
    return cfg


def load_config(path=None, environ=None) -> RunConfig:
    """Built-in defaults, then the file (if any), then ``ESDD_SEED``."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        parse_config(text, cfg)
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV, "").strip():
        try:
            cfg.values["run"]["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from None
    return cfg
