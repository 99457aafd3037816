"""Run configuration: defaults, flat ``key = value`` files and seed derivation."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .losses import LossWeights

MODES = ("DIP", "DIP-Vid", "DIP-Vid-3DCN", "DIP-Vid-Flow")
VALID_INTERVALS = (1, 3, 5)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "DIP-Vid-Flow"
    batch_size: int = 5
    inner_iterations: int = 50
    epochs: int = 5
    lr: float = 0.01
    intervals: tuple[int, ...] = VALID_INTERVALS
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    channel_scale: Fraction = Fraction(1, 4)
    size: tuple[int, int] = (64, 64)
    dip_iterations: int = 1000
    dip_snapshot_every: int = 100
    flow_provider: str = "block-match"
    perceptual: str = "none"
    consistency_occlusion_gate: bool = False
    guard_factor: float = 10.0
    guard_window: int = 50
    guard_min_history: int = 10
    max_rollbacks: int = 10

    def __post_init__(self):
        object.__setattr__(self, "channel_scale", Fraction(self.channel_scale).limit_denominator(1000))
        object.__setattr__(self, "intervals", tuple(sorted(set(int(t) for t in self.intervals))))
        object.__setattr__(self, "size", tuple(int(s) for s in self.size))
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        for name in ("batch_size", "inner_iterations", "dip_iterations", "dip_snapshot_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.intervals or not set(self.intervals) <= set(VALID_INTERVALS):
            raise ConfigError(f"intervals must be a non-empty subset of {VALID_INTERVALS}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Settings used for the published experiments (384x192 frames, full width)."""
        base = dict(
            inner_iterations=100,
            epochs=20,
            channel_scale=Fraction(1),
            size=(192, 384),
            dip_iterations=5000,
        )
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "weights":
                for k, wv in v.as_dict().items():
                    lines.append(f"w_{k} = {wv!r}")
                continue
            text = f"{v[0]}x{v[1]}" if f.name == "size" else _format(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_INT_KEYS = {
    "batch_size", "inner_iterations", "epochs", "seed", "dip_iterations", "dip_snapshot_every",
    "guard_window", "guard_min_history", "max_rollbacks",
}
_FLOAT_KEYS = {"lr", "guard_factor"}
_ALIASES = {"n": "batch_size", "m": "inner_iterations", "e": "epochs", "learning_rate": "lr"}


def parse_size(text: str) -> tuple[int, int]:
    """``HxW`` -> (H, W)."""
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise ConfigError(f"invalid size {text!r}; expected HxW") from e


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"invalid boolean {text!r}")


def parse_pairs(pairs: dict[str, str]) -> dict:
    """Convert raw string settings into TrainConfig keyword arguments."""
    out: dict = {}
    weights: dict[str, float] = {}
    for raw_key, raw in pairs.items():
        key = _ALIASES.get(raw_key.lower(), raw_key.lower()).replace("-", "_")
        val = str(raw).strip()
        try:
            if key in _INT_KEYS:
                out[key] = int(val)
            elif key in _FLOAT_KEYS:
                out[key] = float(val)
            elif key == "intervals":
                out[key] = tuple(int(x) for x in val.replace(" ", "").split(",") if x)
            elif key == "size":
                out[key] = parse_size(val)
            elif key == "channel_scale":
                out[key] = Fraction(val)
            elif key == "consistency_occlusion_gate":
                out[key] = _parse_bool(val)
            elif key in ("mode", "flow_provider", "perceptual"):
                out[key] = val
            elif key.startswith("w_") and key[2:] in LossWeights().as_dict():
                weights[key[2:]] = float(val)
            elif key == "paper_scale":
                out[key] = _parse_bool(val)
            else:
                raise ConfigError(f"unknown config key {raw_key!r}")
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid value for {raw_key!r}: {raw!r}") from e
    if weights:
        out["weights"] = weights
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def build_config(file_pairs: dict[str, str] | None = None, overrides: dict | None = None) -> TrainConfig:
    """Defaults < config file < command-line overrides (already parsed values)."""
    settings = parse_pairs(file_pairs or {})
    settings.update({k: v for k, v in (overrides or {}).items() if v is not None})
    paper = settings.pop("paper_scale", False)
    weights = settings.pop("weights", None)
    if weights is not None:
        if isinstance(weights, dict):
            weights = LossWeights(**{**LossWeights().as_dict(), **weights})
        settings["weights"] = weights
    try:
        return TrainConfig.paper(**settings) if paper else TrainConfig(**settings)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def content_hash(text: str | bytes) -> str:
    """Git blob hash of ``text``."""
    data = text.encode() if isinstance(text, str) else text
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def derive_seed(root: int, *keys: int) -> int:
    """Independent 63-bit seed for a named stream under ``root``."""
    state = np.random.SeedSequence([int(root), *[int(k) for k in keys]]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


# stream identifiers for derive_seed
SEED_INIT, SEED_NOISE, SEED_SHUFFLE, SEED_COMPOSE = 0, 1, 2, 3
