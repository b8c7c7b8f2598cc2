"""Full network: residual backbone, primary capsules, two convolutional
capsule layers and one class capsule per output class."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as T
from .capsules import ClassCapsules, ConvCapsules, PrimaryCapsules, squash
from .config import ModelConfig, shape_chain, stage_channels
from .nn import BatchNorm2d, Conv2d, Module
from .rng import Xoshiro256
from .routing import RoutingResult, activation_map, dynamic_routing_baseline, idr
from .tensor import NonFiniteError, ShapeError, Tensor


class ModelOutput(NamedTuple):
    activations: Tensor   # [N, classes], norms of the class poses
    poses: Tensor         # [N, classes, d], flattened class pose matrices
    ham: Tensor           # [N, heads, classes, h, w], last conv capsule layer


class ResidualBlock(Module):
    """Two 3x3 convolutions, the first strided, with a projection shortcut."""

    def __init__(self, cin: int, cout: int, stride: int, rng: Xoshiro256):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, padding=1)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, stride=1, padding=1)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.short = Conv2d(cin, cout, 1, rng, stride=stride)
            self.short_bn = BatchNorm2d(cout)
        else:
            self.short = self.short_bn = None

    def forward(self, x: Tensor) -> Tensor:
        y = T.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        s = x if self.short is None else self.short_bn(self.short(x))
        return T.relu(y + s)


def _route(votes: Tensor, cfg: ModelConfig) -> RoutingResult:
    if cfg.routing == "idr":
        return idr(votes, cfg.routing_iters, cfg.routing_stop_gradient)
    return dynamic_routing_baseline(votes, cfg.routing_iters)


def route_local(votes: Tensor, cfg: ModelConfig) -> Tensor:
    """Route a conv capsule layer independently at every output location.

    At location (x, y) the children are the window votes of the input heads;
    they are laid out as a one-head grid so the routing routine lets them
    compete for each parent head. Returns poses ``[N, parents, h, w, d]``.
    """
    n, heads, parents, h, w, d = votes.shape
    v = votes.transpose(0, 3, 4, 2, 1, 5).reshape(n, h, w, 1, parents, heads, 1, d)
    res = _route(v, cfg)
    return res.poses.transpose(0, 3, 1, 2, 4)


class Decaps(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.chain = shape_chain(cfg)
        rng = Xoshiro256(cfg.seed)
        chans = stage_channels(cfg)
        self.stem = Conv2d(1, chans[0], 3, rng, stride=2, padding=1)
        self.stem_bn = BatchNorm2d(chans[0])
        self.blocks = [ResidualBlock(chans[k], chans[k + 1], 2, rng) for k in range(cfg.backbone_blocks)]
        self.projection = Conv2d(chans[-1], cfg.projection_channels, 1, rng, bias=True)
        d = cfg.pose_dim
        self.primary = PrimaryCapsules(cfg.projection_channels, cfg.primary_heads, d, rng)
        self.caps1 = ConvCapsules(cfg.primary_heads, cfg.conv1_heads, d, d, cfg.kernel, cfg.stride, rng)
        self.caps2 = ConvCapsules(cfg.conv1_heads, cfg.conv2_heads, d, d, cfg.kernel, cfg.stride, rng)
        self.classcaps = ClassCapsules(cfg.conv2_heads, cfg.classes, d, d, rng, cfg.coordinate_addition)
        self.forward_count = 0

    def _stage(self, name: str, fn, *args):
        try:
            return fn(*args)
        except NonFiniteError as exc:
            raise NonFiniteError(f"layer {name}: {exc}") from None

    def features(self, x: Tensor) -> Tensor:
        y = self._stage("stem", lambda t: T.relu(self.stem_bn(self.stem(t))), x)
        for k, block in enumerate(self.blocks, 1):
            y = self._stage(f"stage{k}", block, y)
        return self._stage("projection", lambda t: T.relu(self.projection(t)), y)

    def forward(self, images) -> ModelOutput:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
        size = self.cfg.input_size
        if x.ndim != 4 or x.shape[1:] != (1, size, size):
            raise ShapeError(f"expected images [N, 1, {size}, {size}], got {x.shape}")
        self.forward_count += 1
        feats = self.features(x)
        poses = self._stage("primary", lambda t: squash(self.primary(t)), feats)
        poses = self._stage("convcaps1", lambda p: route_local(self.caps1.votes(p), self.cfg), poses)
        poses = self._stage("convcaps2", lambda p: route_local(self.caps2.votes(p), self.cfg), poses)

        def classcaps(p):
            votes = self.classcaps.votes(p)
            res = _route(votes, self.cfg)
            ham = res.ham if res.ham is not None else activation_map(votes, res.coefficients)
            return res.poses, ham

        class_poses, ham = self._stage("classcaps", classcaps, poses)
        acts = T.norm(class_poses, axis=-1)
        return ModelOutput(acts, class_poses, ham)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every weight and buffer by name (live arrays, not copies)."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            out["buffer." + name] = buf
        return out


def build(cfg: ModelConfig) -> Decaps:
    return Decaps(cfg)
