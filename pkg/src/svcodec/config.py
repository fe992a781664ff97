"""Training configuration record and its flat ``key = value`` text format.

Keys mirror the hyperparameter table driving every encode: network layer
specs are written ``DEPTHxWIDTH`` (depth hidden layers of that width), the
activation as ``relu``/``tanh``/``sine/FREQ``, the feature mapping as
``SCALE/SIZE``, the learning rate as ``COLD`` or ``COLD/REFINE`` for
temporal encodes, and the decay as ``RATE/INTERVAL``.  Unknown keys are
rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

from .errors import ConfigError
from .neural import ACT_RELU, ACT_SINE, ACT_TANH

LayerSpec = Tuple[int, int]  # (depth, width)


@dataclass
class TrainConfig:
    """Full hyperparameter record driving encoding."""

    subdomain_size: int = 512
    l1_net: LayerSpec = (3, 24)
    tile_net: Optional[LayerSpec] = (3, 16)
    l0_net: LayerSpec = (3, 48)
    voxel_net: LayerSpec = (3, 48)
    activation: str = ACT_SINE
    frequency: float = 3.0
    ffm_scale: float = 5.0
    ffm_size: int = 96
    lr: float = 1e-3
    refine_lr: Optional[float] = None      # temporal refinement rate; None -> lr
    decay: float = 0.975
    interval: float = 100.0
    max_epochs: int = 800
    sample_interval: int = 1
    batch_size: int = 65536
    significance_threshold: Optional[float] = None   # None -> class default
    strict_topology: bool = False
    seed: int = 0

    def validate(self) -> None:
        for name, spec in (("l1_net", self.l1_net), ("l0_net", self.l0_net),
                           ("voxel_net", self.voxel_net), ("tile_net", self.tile_net)):
            if spec is None:
                continue
            depth, width = spec
            if depth < 1 or width < 1:
                raise ConfigError(f"{name} must have positive depth and width")
        if self.activation not in (ACT_RELU, ACT_TANH, ACT_SINE):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.activation == ACT_SINE and self.frequency <= 0:
            raise ConfigError("sine activation needs frequency > 0")
        if self.ffm_size < 1 or self.ffm_scale <= 0:
            raise ConfigError("ffm scale/size must be positive")
        if self.lr <= 0 or (self.refine_lr is not None and self.refine_lr <= 0):
            raise ConfigError("learning rates must be positive")
        if not (0 < self.decay <= 1) or self.interval <= 0:
            raise ConfigError("lr decay must be in (0, 1] with positive interval")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.sample_interval < 1:
            raise ConfigError("sample_interval must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.significance_threshold is not None and self.significance_threshold < 0:
            raise ConfigError("significance_threshold must be >= 0")
        if self.subdomain_size <= 0 or self.subdomain_size % 512:
            raise ConfigError("subdomain_size must be a positive multiple of 512")

    def refinement_lr(self) -> float:
        return self.lr if self.refine_lr is None else self.refine_lr


def _parse_layers(text: str, key: str) -> Optional[LayerSpec]:
    if text.lower() in ("none", "-"):
        return None
    try:
        depth, width = text.lower().split("x")
        return (int(depth), int(width))
    except ValueError as exc:
        raise ConfigError(f"{key}: expected DEPTHxWIDTH or none, got {text!r}") from exc


def _parse_pair(text: str, key: str) -> Tuple[float, Optional[float]]:
    parts = text.split("/")
    if len(parts) == 1:
        return float(parts[0]), None
    if len(parts) == 2:
        return float(parts[0]), float(parts[1])
    raise ConfigError(f"{key}: expected VALUE or VALUE/VALUE, got {text!r}")


def _parse_bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {text!r}")


def parse_config(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Parse the flat text format; later keys override earlier ones."""
    cfg = replace(base) if base is not None else TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            cfg = apply_key(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    cfg.validate()
    return cfg


def apply_key(cfg: TrainConfig, key: str, value: str) -> TrainConfig:
    """Apply one key/value override; raises ConfigError for unknown keys."""
    if key == "subdomain_size":
        return replace(cfg, subdomain_size=int(value))
    if key == "l1_net":
        return replace(cfg, l1_net=_parse_layers(value, key))
    if key == "tile_net":
        return replace(cfg, tile_net=_parse_layers(value, key))
    if key == "l0_net":
        return replace(cfg, l0_net=_parse_layers(value, key))
    if key == "voxel_net":
        return replace(cfg, voxel_net=_parse_layers(value, key))
    if key == "activation":
        parts = value.split("/")
        kind = parts[0].strip().lower()
        if kind == "sin":
            kind = ACT_SINE
        freq = float(parts[1]) if len(parts) > 1 else cfg.frequency
        return replace(cfg, activation=kind, frequency=freq)
    if key == "ffm":
        scale, size = value.split("/")
        return replace(cfg, ffm_scale=float(scale), ffm_size=int(size))
    if key == "learning_rate":
        lr, refine = _parse_pair(value, key)
        return replace(cfg, lr=lr, refine_lr=refine)
    if key == "lr_decay":
        decay, interval = _parse_pair(value, key)
        return replace(cfg, decay=decay,
                       interval=cfg.interval if interval is None else interval)
    if key == "max_epochs":
        return replace(cfg, max_epochs=int(value))
    if key == "sample_interval":
        return replace(cfg, sample_interval=int(value))
    if key == "batch_size":
        return replace(cfg, batch_size=int(value))
    if key == "significance_threshold":
        if value.strip().lower() in ("auto", "none"):
            return replace(cfg, significance_threshold=None)
        return replace(cfg, significance_threshold=float(value))
    if key == "strict_topology":
        return replace(cfg, strict_topology=_parse_bool(value, key))
    if key == "seed":
        return replace(cfg, seed=int(value))
    raise ConfigError(f"unknown key {key!r}")


def _fmt_layers(spec: Optional[LayerSpec]) -> str:
    if spec is None:
        return "none"
    return f"{spec[0]}x{spec[1]}"


def format_config(cfg: TrainConfig) -> str:
    """Serialize to the text format; parse(format(cfg)) round-trips."""
    act = cfg.activation
    if act == ACT_SINE:
        act = f"{ACT_SINE}/{cfg.frequency}"
    lr = repr(cfg.lr) if cfg.refine_lr is None else f"{cfg.lr!r}/{cfg.refine_lr!r}"
    sig = "auto" if cfg.significance_threshold is None else repr(cfg.significance_threshold)
    lines = [
        f"subdomain_size = {cfg.subdomain_size}",
        f"l1_net = {_fmt_layers(cfg.l1_net)}",
        f"tile_net = {_fmt_layers(cfg.tile_net)}",
        f"l0_net = {_fmt_layers(cfg.l0_net)}",
        f"voxel_net = {_fmt_layers(cfg.voxel_net)}",
        f"activation = {act}",
        f"ffm = {cfg.ffm_scale!r}/{cfg.ffm_size}",
        f"learning_rate = {lr}",
        f"lr_decay = {cfg.decay!r}/{cfg.interval!r}",
        f"max_epochs = {cfg.max_epochs}",
        f"sample_interval = {cfg.sample_interval}",
        f"batch_size = {cfg.batch_size}",
        f"significance_threshold = {sig}",
        f"strict_topology = {str(cfg.strict_topology).lower()}",
        f"seed = {cfg.seed}",
    ]
    return "\n".join(lines) + "\n"
