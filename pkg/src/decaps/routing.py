"""Inverted dynamic routing and the bottom-up dynamic routing baseline.

Votes are ``[..., heads, parents, h, w, d]``. Leading axes are independent
routing problems (batch, and output locations for conv capsule layers).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as T
from .capsules import squash, squash_np
from .tensor import ShapeError, Tensor


class RoutingResult(NamedTuple):
    poses: Tensor                 # [..., parents, d]
    ham: Tensor | None            # [..., heads, parents, h, w]
    coefficients: np.ndarray      # final routing map
    history: list[np.ndarray]     # routing map used at each iteration


def _softmax_np(x: np.ndarray, axes) -> np.ndarray:
    e = np.exp(x - x.max(axis=axes, keepdims=True))
    return e / e.sum(axis=axes, keepdims=True)


def _check(votes: Tensor, n_iter: int) -> None:
    if n_iter < 1:
        raise ValueError(f"n_iter must be >= 1, got {n_iter}")
    if votes.ndim < 5:
        raise ShapeError(f"votes need shape [..., heads, parents, h, w, d], got {votes.shape}")


def idr(votes: Tensor, n_iter: int = 3, stop_gradient: bool = True) -> RoutingResult:
    """Inverted dynamic routing.

    Capsules within each head compete (softmax over the h x w grid) for every
    parent. With ``stop_gradient`` the routing logits are computed outside the
    graph and only the final weighted sum and squash are differentiated.
    """
    _check(votes, n_iter)
    grid = (-2, -1)  # routing map [..., heads, parents, h, w]: locations within a head
    logits = np.zeros(votes.shape[:-1])
    history = []
    if stop_gradient:
        v = votes.data
        for _ in range(n_iter - 1):
            r = _softmax_np(logits, grid)
            history.append(r)
            p = squash_np((r[..., None] * v).sum(axis=(-5, -3, -2)))
            logits = logits + (p[..., None, :, None, None, :] * v).sum(axis=-1)
        r = _softmax_np(logits, grid)
        history.append(r)
        weighted = Tensor(r[..., None]) * votes
    else:
        logit_t = Tensor(logits)
        for it in range(n_iter):
            r_t = T.softmax(logit_t, axis=grid)
            history.append(r_t.data)
            weighted = r_t.reshape(r_t.shape + (1,)) * votes
            p = squash(weighted.sum(axis=(-5, -3, -2)))
            if it < n_iter - 1:
                agree = (p.reshape(p.shape[:-2] + (1, p.shape[-2], 1, 1, p.shape[-1])) * votes).sum(axis=-1)
                logit_t = logit_t + agree
        r = history[-1]
    poses = squash(weighted.sum(axis=(-5, -3, -2)))
    ham = T.norm(weighted, axis=-1)
    return RoutingResult(poses, ham, r, history)


def dynamic_routing_baseline(votes: Tensor, n_iter: int = 3) -> RoutingResult:
    """Bottom-up routing: every child capsule spreads its vote over the parents."""
    _check(votes, n_iter)
    parent_axis = -3  # on the routing map [..., heads, parents, h, w]
    v = votes.data
    logits = np.zeros(votes.shape[:-1])
    history = []
    for _ in range(n_iter - 1):
        c = _softmax_np(logits, parent_axis)
        history.append(c)
        p = squash_np((c[..., None] * v).sum(axis=(-5, -3, -2)))
        logits = logits + (p[..., None, :, None, None, :] * v).sum(axis=-1)
    c = _softmax_np(logits, parent_axis)
    history.append(c)
    poses = squash((Tensor(c[..., None]) * votes).sum(axis=(-5, -3, -2)))
    return RoutingResult(poses, None, c, history)


def activation_map(votes: Tensor, coefficients: np.ndarray) -> Tensor:
    """Length of the coefficient-weighted votes over the pose axis."""
    return T.norm(Tensor(coefficients[..., None]) * votes, axis=-1)


def average_ham(ham, j: int) -> np.ndarray:
    """Head-averaged activation map of class ``j``: ``[..., heads, parents, h, w] -> [..., h, w]``."""
    a = np.asarray(getattr(ham, "data", ham))
    if not 0 <= j < a.shape[-3]:
        raise IndexError(f"class index {j} out of range for {a.shape[-3]} parents")
    return a[..., :, j, :, :].mean(axis=-3)
