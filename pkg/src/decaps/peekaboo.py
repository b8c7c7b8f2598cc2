"""Activation-guided crop/drop training and distillation inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .loss import margin_at, spread_loss
from .nn import Adam
from .routing import average_ham
from .tensor import Tensor, bilinear_matrix


class EmptyRoi(ValueError):
    """The crop mask selected no cell."""


@dataclass(frozen=True)
class RoiBox:
    row_min: int
    col_min: int
    row_max: int
    col_max: int
    # half-open pixel rectangle [r0, r1) x [c0, c1) in image coordinates
    pixel: tuple[int, int, int, int] | None = None

    @property
    def pixel_center(self) -> tuple[float, float]:
        r0, c0, r1, c1 = self.pixel
        return (r0 + r1 - 1) / 2.0, (c0 + c1 - 1) / 2.0


def resize_np(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the last two axes (half-pixel centers, edge clamp)."""
    ry = bilinear_matrix(img.shape[-2], size[0])
    rx = bilinear_matrix(img.shape[-1], size[1])
    return ry @ img @ rx.T


def normalize_ham(a) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def crop_mask(norm_ham: np.ndarray, theta_c: float) -> np.ndarray:
    return (np.asarray(norm_ham) >= theta_c).astype(np.uint8)


def min_bbox(mask: np.ndarray, image_shape: tuple[int, int] | None = None) -> RoiBox:
    """Tightest grid box around the mask ones, plus its pixel-space box.

    Pixel edges are scaled outward (floor / ceil) and clamped to the image.
    """
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise EmptyRoi("crop mask is empty")
    rmin, rmax, cmin, cmax = int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])
    pixel = None
    if image_shape is not None:
        h, w = mask.shape
        H, W = image_shape
        r0 = max((rmin * H) // h, 0)
        c0 = max((cmin * W) // w, 0)
        r1 = min(-((-(rmax + 1) * H) // h), H)
        c1 = min(-((-(cmax + 1) * W) // w), W)
        pixel = (r0, c0, r1, c1)
    return RoiBox(rmin, cmin, rmax, cmax, pixel)


def patch_crop(image: np.ndarray, box: RoiBox, size: int | None = None) -> np.ndarray:
    """Cut the box out of ``image`` and resize it back to ``size`` (default: image size)."""
    r0, c0, r1, c1 = box.pixel
    out = (image.shape[-2], image.shape[-1]) if size is None else (size, size)
    return resize_np(image[..., r0:r1, c0:c1], out)


def patch_drop(image: np.ndarray, norm_ham: np.ndarray, theta_d: float) -> np.ndarray:
    """Zero the pixels whose upsampled normalized activation is >= theta_d."""
    up = resize_np(np.asarray(norm_ham, dtype=np.float64), image.shape[-2:])
    return np.where(up >= theta_d, 0.0, image)


def roi_from_ham(ham_map: np.ndarray, theta_c: float, image_shape) -> RoiBox:
    return min_bbox(crop_mask(normalize_ham(ham_map), theta_c), image_shape)


# -- training -----------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    coarse: float
    crop: float | None = None
    drop: float | None = None
    heads: np.ndarray | None = None


def peekaboo_views(images: np.ndarray, ham: np.ndarray, labels: np.ndarray, heads: np.ndarray,
                   theta_c: float, theta_d: float) -> tuple[np.ndarray, np.ndarray]:
    """Cropped and dropped copies of ``images`` guided by one head's map per sample."""
    crops = np.empty_like(images)
    drops = np.empty_like(images)
    for n in range(images.shape[0]):
        a = normalize_ham(ham[n, heads[n], labels[n]])
        try:
            box = min_bbox(crop_mask(a, theta_c), images.shape[-2:])
            crops[n] = patch_crop(images[n], box)
        except EmptyRoi:
            crops[n] = images[n]
        drops[n] = patch_drop(images[n], a, theta_d)
    return crops, drops


def peekaboo_train_step(model, optimizer: Adam, images: np.ndarray, labels, epoch: int,
                        rng, peekaboo: bool = True) -> StepResult:
    """One optimizer step on a batch.

    With ``peekaboo`` the batch is seen three times (whole, ROI crop, ROI drop)
    and the weighted mean of the three spread losses is backpropagated once.
    """
    cfg = model.cfg
    labels = np.asarray(labels, dtype=int)
    m = margin_at(epoch, cfg.margin_schedule)
    model.train()
    optimizer.zero_grad()
    out = model(images)
    l_coarse = spread_loss(out.activations, labels, m)
    if not peekaboo:
        l_coarse.backward()
        optimizer.step()
        return StepResult(l_coarse.item(), l_coarse.item())
    heads = rng.integers(out.ham.shape[1], size=len(labels))
    crops, drops = peekaboo_views(images, out.ham.data, labels, heads, cfg.theta_c, cfg.theta_d)
    l_crop = spread_loss(model(crops).activations, labels, m)
    l_drop = spread_loss(model(drops).activations, labels, m)
    wc, wr, wd = cfg.weight_coarse, cfg.weight_crop, cfg.weight_drop
    total = T.scale(T.scale(l_coarse, wc) + T.scale(l_crop, wr) + T.scale(l_drop, wd), 1.0 / (wc + wr + wd))
    total.backward()
    optimizer.step()
    return StepResult(total.item(), l_coarse.item(), l_crop.item(), l_drop.item(), heads)


# -- inference ------------------------------------------------------------------------

@dataclass
class PredictionSet:
    coarse: np.ndarray        # [N, classes, d]
    fine: np.ndarray
    boxes: list               # RoiBox or None (empty ROI) per sample
    coarse_ham: np.ndarray    # [N, heads, classes, h, w]
    fine_ham: np.ndarray

    @property
    def distilled(self) -> np.ndarray:
        return (self.coarse + self.fine) / 2.0

    def poses(self, mode: str = "distilled") -> np.ndarray:
        if mode not in ("coarse", "fine", "distilled"):
            raise ValueError(f"unknown prediction mode {mode!r}")
        return getattr(self, mode)

    def scores(self, mode: str = "distilled") -> np.ndarray:
        return np.linalg.norm(self.poses(mode), axis=-1)

    def predicted(self, mode: str = "distilled") -> np.ndarray:
        return self.scores(mode).argmax(axis=-1)


def distill_infer(model, images: np.ndarray, batch_size: int = 64) -> PredictionSet:
    """Coarse pass, crop around the head-averaged map of the predicted class, fine pass."""
    cfg = model.cfg
    model.eval()
    images = np.asarray(images, dtype=np.float64)
    coarse, fine, hams, fine_hams, boxes = [], [], [], [], []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            batch = images[s:s + batch_size]
            out = model(batch)
            pc = out.poses.data
            ham = out.ham.data
            cls = np.linalg.norm(pc, axis=-1).argmax(axis=-1)
            crops = batch.copy()
            for n in range(len(batch)):
                try:
                    box = roi_from_ham(average_ham(ham[n], int(cls[n])), cfg.theta_c, batch.shape[-2:])
                    crops[n] = patch_crop(batch[n], box)
                except EmptyRoi:
                    box = None
                boxes.append(box)
            out_f = model(crops)
            pf = out_f.poses.data.copy()
            for n in range(len(batch)):
                if boxes[s + n] is None:
                    pf[n] = pc[n]
            coarse.append(pc)
            fine.append(pf)
            hams.append(ham)
            fine_hams.append(out_f.ham.data)
    return PredictionSet(np.concatenate(coarse), np.concatenate(fine), boxes,
                         np.concatenate(hams), np.concatenate(fine_hams))
