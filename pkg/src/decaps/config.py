"""Model and run configuration, and the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .loss import MarginSchedule
from .tensor import ShapeError


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_size: int = 448
    backbone_blocks: int = 3
    backbone_out_channels: int = 1024
    projection_channels: int = 512      # A
    primary_heads: int = 32             # B
    conv1_heads: int = 32               # C
    conv2_heads: int = 32               # D
    pose_dim: int = 16                  # flattened 4x4 pose
    kernel: int = 3
    stride: int = 1
    routing_iters: int = 3
    classes: int = 2
    routing: str = "idr"                # or "baseline"
    routing_stop_gradient: bool = True
    coordinate_addition: bool = True
    theta_c: float = 0.5
    theta_d: float = 0.3
    margin_initial: float = 0.2
    margin_step: float = 0.1
    margin_period: int = 2
    margin_cap: float = 0.9
    weight_coarse: float = 1.0
    weight_crop: float = 1.0
    weight_drop: float = 1.0
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    seed: int = 0
    desk_scale: bool = False

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(DESK_PRESET, desk_scale=True)
        base.update(overrides)
        return cls(**base)

    @property
    def margin_schedule(self) -> MarginSchedule:
        return MarginSchedule(self.margin_initial, self.margin_step, self.margin_period, self.margin_cap)

    def architecture(self) -> dict:
        return {k: getattr(self, k) for k in ARCHITECTURE_KEYS}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


DESK_PRESET = dict(input_size=96, backbone_out_channels=64, projection_channels=64,
                   primary_heads=8, conv1_heads=8, conv2_heads=8, classes=2)

ARCHITECTURE_KEYS = (
    "input_size", "backbone_blocks", "backbone_out_channels", "projection_channels",
    "primary_heads", "conv1_heads", "conv2_heads", "pose_dim", "kernel", "stride",
    "routing_iters", "classes", "routing", "routing_stop_gradient", "coordinate_addition",
)


def stage_channels(cfg: ModelConfig) -> list[int]:
    """Output channels of the stem followed by each residual stage."""
    b, out = cfg.backbone_blocks, cfg.backbone_out_channels
    stages = [out >> (b - 1 - k) for k in range(b)]
    return [max(out // 16, 1)] + stages


def shape_chain(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-sample output shape of every stage, or ShapeError naming the chain so far."""
    chain: list[tuple[str, tuple[int, ...]]] = [("input", (1, cfg.input_size, cfg.input_size))]

    def fail(msg):
        text = " -> ".join(f"{n}{list(s)}" for n, s in chain)
        raise ShapeError(f"{msg}; shape chain: {text}")

    if cfg.backbone_blocks < 1:
        fail("backbone needs at least one residual block")
    if cfg.routing not in ("idr", "baseline"):
        fail(f"unknown routing {cfg.routing!r}")
    if cfg.classes < 2:
        fail("need at least two classes")
    side = math.isqrt(cfg.pose_dim)
    if side * side != cfg.pose_dim or cfg.pose_dim < 2:
        fail(f"pose_dim {cfg.pose_dim} is not a perfect square >= 4")
    chans = stage_channels(cfg)
    if any(c < 1 for c in chans) or chans[-1] != cfg.backbone_out_channels:
        fail(f"backbone_out_channels {cfg.backbone_out_channels} cannot be split over "
             f"{cfg.backbone_blocks} stages")
    n = cfg.input_size
    for k, c in enumerate(chans):
        n = (n + 1) // 2
        chain.append(("stem" if k == 0 else f"stage{k}", (c, n, n)))
    chain.append(("projection", (cfg.projection_channels, n, n)))
    chain.append(("primary", (cfg.primary_heads, n, n, cfg.pose_dim)))
    for name, heads in (("convcaps1", cfg.conv1_heads), ("convcaps2", cfg.conv2_heads)):
        if n < cfg.kernel:
            fail(f"{name}: grid {n} smaller than kernel {cfg.kernel}")
        n = (n - cfg.kernel) // cfg.stride + 1
        chain.append((name, (heads, n, n, cfg.pose_dim)))
    chain.append(("classcaps", (cfg.classes, cfg.pose_dim)))
    chain.append(("ham", (cfg.conv2_heads, cfg.classes, n, n)))
    return chain


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data_root: str = ""
    train_list: str = ""
    test_list: str = ""
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    split_seed: int = 0
    epochs: int = 30
    out_dir: str = "runs/default"
    augment: bool = True
    peekaboo: bool = True
    positive_class: int = 1

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d.update(self.model.to_dict())
        return d


_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "model"}


def _coerce(name: str, raw: str, kind):
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def build_run_config(pairs: dict[str, object]) -> RunConfig:
    """RunConfig from string (or already typed) values; unknown keys are rejected."""
    unknown = sorted(set(pairs) - set(_MODEL_FIELDS) - set(_RUN_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    def typed(name, fmap):
        v = pairs[name]
        return _coerce(name, v, fmap[name].type) if isinstance(v, str) else v

    model_kw = {k: typed(k, _MODEL_FIELDS) for k in pairs if k in _MODEL_FIELDS}
    desk = model_kw.pop("desk_scale", False)
    model = ModelConfig.desk(**model_kw) if desk else ModelConfig(**model_kw)
    run_kw = {k: typed(k, _RUN_FIELDS) for k in pairs if k in _RUN_FIELDS}
    return RunConfig(model=model, **run_kw)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return build_run_config(parse_pairs(text, str(path)))


def dump_run_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
