"""Capsule primitives: squash, activations, primary capsules, votes.

Shape conventions (a leading batch axis N is always allowed):

* poses  ``[N, heads, h, w, d]`` -- ``d`` is a flattened square pose matrix
* votes  ``[N, heads, parents, h, w, d_out]``
* transform bank ``[heads, parents, d, d_out]``, shared by every location of a head
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import Module, param
from .rng import Xoshiro256
from .tensor import ShapeError, Tensor

SQUASH_EPS = 1e-12


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Rescale ``s`` along ``axis`` to norm ||s||^2 / (1 + ||s||^2)."""
    n = T.norm(s, axis=axis, keepdims=True)
    n2 = T.square(n)
    factor = n2 / ((1.0 + n2) * (n + SQUASH_EPS))
    return s * factor


def squash_np(s: np.ndarray, axis: int = -1) -> np.ndarray:
    """Same formula as :func:`squash` on a plain array (no graph)."""
    n = np.sqrt((s * s).sum(axis=axis, keepdims=True))
    return s * (n * n / ((1.0 + n * n) * (n + SQUASH_EPS)))


def pose_activation(poses: Tensor) -> Tensor:
    """Existence probability of every capsule: norm of the squashed pose."""
    return T.norm(squash(poses), axis=-1)


def check_pose_dim(d: int) -> int:
    side = math.isqrt(d)
    if side * side != d:
        raise ShapeError(f"pose dimension {d} is not a perfect square")
    return side


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class TransformBank(Module):
    """One d_in x d_out matrix per (head, parent) pair."""

    def __init__(self, heads: int, parents: int, d_in: int, d_out: int, rng: Xoshiro256):
        b = glorot_bound(d_in, d_out)
        self.weight = param(rng.uniform(-b, b, size=(heads, parents, d_in, d_out)))

    @property
    def shape(self):
        return self.weight.shape


class PrimaryCapsules(Module):
    """1x1 projection of backbone features to ``heads`` grids of d-dim poses.

    No bias, so a zero feature map gives zero poses.
    """

    def __init__(self, in_channels: int, heads: int, dim: int, rng: Xoshiro256,
                 out_channels: int | None = None):
        check_pose_dim(dim)
        if out_channels is not None and out_channels != heads * dim:
            raise ShapeError(
                f"primary capsules: heads*dim = {heads}*{dim} = {heads * dim} "
                f"but projection has {out_channels} channels")
        self.heads, self.dim = heads, dim
        std = math.sqrt(2.0 / in_channels)
        self.weight = param(rng.normal(0.0, std, size=(heads * dim, in_channels, 1, 1)))

    def forward(self, features: Tensor) -> Tensor:
        n, _, h, w = features.shape
        x = T.conv2d(features, self.weight)
        return x.reshape(n, self.heads, self.dim, h, w).transpose(0, 1, 3, 4, 2)


def output_grid(size: int, kernel: int, stride: int) -> int:
    if size < kernel:
        raise ShapeError(f"capsule grid {size} is smaller than kernel {kernel}")
    return (size - kernel) // stride + 1


def conv_capsule_votes(poses: Tensor, mix: Tensor, weights: Tensor, stride: int = 1) -> Tensor:
    """Votes of a convolutional capsule layer.

    Each head's child poses inside a K x K window are blended by that head's
    kernel ``mix[i]`` (no padding), then mapped through ``weights[i, j]``.
    Returns ``[N, heads, parents, h', w', d_out]``.
    """
    n, heads, h, w, d = poses.shape
    k = mix.shape[-1]
    if mix.shape != (heads, k, k):
        raise ShapeError(f"window kernel {mix.shape} does not match {heads} heads")
    if weights.shape[0] != heads or weights.shape[2] != d:
        raise ShapeError(f"transform bank {weights.shape} does not match poses {poses.shape}")
    ho, wo = output_grid(h, k, stride), output_grid(w, k, stride)
    mixed = None
    for a in range(k):
        for b in range(k):
            window = poses[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride, :]
            term = window * mix[:, a, b].reshape(1, heads, 1, 1, 1)
            mixed = term if mixed is None else mixed + term
    parents, d_out = weights.shape[1], weights.shape[3]
    flat = mixed.reshape(n, heads, 1, ho * wo, d)
    votes = flat @ weights
    return votes.reshape(n, heads, parents, ho, wo, d_out)


def class_votes(poses: Tensor, weights: Tensor) -> Tensor:
    """Votes from every capsule of every head to each class capsule."""
    n, heads, h, w, d = poses.shape
    parents, d_out = weights.shape[1], weights.shape[3]
    votes = poses.reshape(n, heads, 1, h * w, d) @ weights
    return votes.reshape(n, heads, parents, h, w, d_out)


def coordinate_offsets(h: int, w: int, d: int) -> np.ndarray:
    """[h, w, d] array holding x/h and y/w in the final two entries."""
    if d < 2:
        raise ShapeError("coordinate addition needs pose dimension >= 2")
    off = np.zeros((h, w, d))
    off[:, :, d - 2] = (np.arange(h) / h)[:, None]
    off[:, :, d - 1] = (np.arange(w) / w)[None, :]
    return off


def add_coordinates(votes: Tensor) -> Tensor:
    h, w, d = votes.shape[-3:]
    return votes + coordinate_offsets(h, w, d)


class ConvCapsules(Module):
    """Window kernels plus head-shared transforms for one conv capsule layer."""

    def __init__(self, in_heads: int, out_heads: int, dim_in: int, dim_out: int,
                 kernel: int, stride: int, rng: Xoshiro256):
        b = glorot_bound(kernel * kernel, 1)
        self.mix = param(rng.uniform(-b, b, size=(in_heads, kernel, kernel)))
        self.transform = TransformBank(in_heads, out_heads, dim_in, dim_out, rng)
        self.stride = stride

    def votes(self, poses: Tensor) -> Tensor:
        return conv_capsule_votes(poses, self.mix, self.transform.weight, self.stride)


class ClassCapsules(Module):
    def __init__(self, in_heads: int, classes: int, dim_in: int, dim_out: int,
                 rng: Xoshiro256, coordinates: bool = True):
        self.transform = TransformBank(in_heads, classes, dim_in, dim_out, rng)
        self.coordinates = coordinates

    def votes(self, poses: Tensor) -> Tensor:
        v = class_votes(poses, self.transform.weight)
        return add_coordinates(v) if self.coordinates else v
