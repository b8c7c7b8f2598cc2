"""Labeled image directories, deterministic splits, augmentation and the
synthetic two-class dataset.

On disk a dataset is ``root/<class_name>/<stem>.pgm``; a sample id is
``<class_name>/<stem>``. Optional split list files hold one id per line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .peekaboo import resize_np
from .pnm import PnmError, read_pgm, write_pgm
from .rng import Xoshiro256, derive_seed


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    label: int
    id: str


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    train_list: str | None = None
    test_list: str | None = None


@dataclass
class Dataset:
    classes: list[str]
    train: list[Sample]
    test: list[Sample]


def list_classes(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset root is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"{root}: no class directories")
    return classes


def _read_list(path) -> list[str]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror}") from None
    return [s.strip() for s in lines if s.strip()]


def stratified_split(ids_by_class: dict[int, list[str]], fraction: float, seed: int):
    """Per-class seeded shuffle; the first round(fraction * n) ids go to the first part."""
    first, second = [], []
    for label in sorted(ids_by_class):
        ids = sorted(ids_by_class[label])
        perm = Xoshiro256(derive_seed("split", seed, label)).permutation(len(ids))
        k = int(round(fraction * len(ids)))
        first += [ids[i] for i in perm[:k]]
        second += [ids[i] for i in perm[k:]]
    return first, second


def load_image(path, size: int) -> np.ndarray:
    try:
        img = read_pgm(path)
    except PnmError as exc:
        raise DatasetError(str(exc)) from None
    if img.shape != (size, size):
        img = resize_np(img, (size, size))
    return img


def load_dataset(root, spec: SplitSpec = SplitSpec(), input_size: int = 448) -> Dataset:
    """Read every class directory, resize to ``input_size`` and split."""
    root = Path(root)
    classes = list_classes(root)
    label_of, files = {}, {}
    ids_by_class: dict[int, list[str]] = {}
    for label, name in enumerate(classes):
        paths = sorted((root / name).glob("*.pgm"))
        if not paths:
            raise DatasetError(f"{root / name}: class directory holds no .pgm images")
        for p in paths:
            sid = f"{name}/{p.stem}"
            label_of[sid] = label
            files[sid] = p
            ids_by_class.setdefault(label, []).append(sid)

    if spec.train_list or spec.test_list:
        if not (spec.train_list and spec.test_list):
            raise DatasetError("both train_list and test_list are required")
        train_ids, test_ids = _read_list(spec.train_list), _read_list(spec.test_list)
        leak = sorted(set(train_ids) & set(test_ids))
        if leak:
            raise DatasetError(f"split leakage: {len(leak)} ids in both lists, e.g. {leak[0]}")
        missing = [i for i in train_ids + test_ids if i not in files]
        if missing:
            raise DatasetError(f"{root}: listed id {missing[0]} has no image file")
    else:
        train_ids, test_ids = stratified_split(ids_by_class, spec.train_fraction, spec.seed)

    def make(ids):
        return [Sample(load_image(files[i], input_size), label_of[i], i) for i in ids]

    return Dataset(classes, make(train_ids), make(test_ids))


def split_validation(samples: list[Sample], fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Hold out a stratified ``fraction`` of ``samples`` for validation."""
    by_id = {s.id: s for s in samples}
    groups: dict[int, list[str]] = {}
    for s in samples:
        groups.setdefault(s.label, []).append(s.id)
    val_ids, train_ids = stratified_split(groups, fraction, derive_seed("val", seed))
    return [by_id[i] for i in sorted(train_ids)], [by_id[i] for i in sorted(val_ids)]


# -- augmentation -----------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    angle: float          # degrees
    crop_area: float      # fraction of the image area kept
    offset: tuple[float, float]  # crop origin as a fraction of the free margin


def draw_augment(seed: int, sample_id: str, epoch: int) -> AugmentParams:
    rng = Xoshiro256(derive_seed("augment", seed, sample_id, epoch))
    flip = rng.random() < 0.5
    angle = rng.uniform(-10.0, 10.0)
    area = rng.uniform(0.9, 1.0)
    off = (rng.random(), rng.random())
    return AugmentParams(flip, angle, area, off)


def apply_augment(img: np.ndarray, p: AugmentParams) -> np.ndarray:
    out = img[:, ::-1] if p.flip else img
    if p.angle != 0.0:
        h, w = out.shape
        t = math.radians(p.angle)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        out = ndimage.affine_transform(out, rot, offset=center - rot @ center, order=1, mode="nearest")
    if p.crop_area < 1.0:
        h, w = out.shape
        side = math.sqrt(p.crop_area)
        ch, cw = max(int(round(h * side)), 1), max(int(round(w * side)), 1)
        r0 = int(p.offset[0] * (h - ch + 1)) if h > ch else 0
        c0 = int(p.offset[1] * (w - cw + 1)) if w > cw else 0
        r0, c0 = min(r0, h - ch), min(c0, w - cw)
        out = resize_np(out[r0:r0 + ch, c0:c0 + cw], (h, w))
    return np.clip(np.ascontiguousarray(out, dtype=np.float64), 0.0, 1.0)


def augment(sample: Sample, seed: int, epoch: int = 0) -> Sample:
    """Random flip, small rotation and 90-100% area crop; fixed by (seed, id, epoch)."""
    return replace(sample, image=apply_augment(sample.image, draw_augment(seed, sample.id, epoch)))


# -- synthetic data ---------------------------------------------------------------

SYNTH_CLASSES = ("class0", "class1")


def in_band(r: float, c: float, size: int, width: float | None = None) -> bool:
    """True when (r, c) lies in the outer quarter strip along either axis."""
    width = size / 4.0 if width is None else width
    return min(r, size - 1 - r) < width or min(c, size - 1 - c) < width


def synth_image(label: int, size: int, rng: Xoshiro256) -> tuple[np.ndarray, tuple[float, float] | None]:
    img = 0.2 * rng.random((size, size))
    rows = np.arange(size, dtype=np.float64)
    if label == 0:
        sigma = size / 12.0
        # keep the blob peak clear of the inner band edge so the brightest pixel stays in the band
        width = size / 4.0 - sigma / 2.0
        while True:
            r, c = rng.uniform(0.0, size - 1.0), rng.uniform(0.0, size - 1.0)
            if in_band(r, c, size, width):
                break
        d2 = (rows[:, None] - r) ** 2 + (rows[None, :] - c) ** 2
        img = img + 0.8 * np.exp(-d2 / (2.0 * sigma * sigma))
        center = (r, c)
    else:
        period = size / 8.0
        phase = rng.uniform(0.0, 2.0 * math.pi)
        stripes = 0.25 * (1.0 + np.sin(2.0 * math.pi * rows / period + phase))
        img = img + stripes[:, None]
        center = None
    return np.clip(img, 0.0, 1.0), center


def synth_generate(root, n_train: int = 400, n_test: int = 100, size: int = 96, seed: int = 0) -> Path:
    """Write the synthetic two-class dataset with train/test list files and blob centers."""
    if size < 32:
        raise ValueError(f"synthetic images need size >= 32, got {size}")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        train, test, blobs = [], [], ["id,center_row,center_col"]
        for label, name in enumerate(SYNTH_CLASSES):
            (root / name).mkdir(exist_ok=True)
            for k in range(n_train + n_test):
                img, center = synth_image(label, size, Xoshiro256(derive_seed("synth", seed, label, k)))
                sid = f"{name}/{k:05d}"
                write_pgm(root / f"{sid}.pgm", img)
                (train if k < n_train else test).append(sid)
                if center is not None:
                    blobs.append(f"{sid},{center[0]:.6f},{center[1]:.6f}")
        (root / "train.txt").write_text("\n".join(train) + "\n")
        (root / "test.txt").write_text("\n".join(test) + "\n")
        (root / "blobs.csv").write_text("\n".join(blobs) + "\n")
    except OSError as exc:
        raise DatasetError(f"{root}: cannot write dataset ({exc.strerror})") from None
    return root


def read_blob_centers(root) -> dict[str, tuple[float, float]]:
    path = Path(root) / "blobs.csv"
    out = {}
    for line in path.read_text().splitlines()[1:]:
        if line.strip():
            sid, r, c = line.split(",")
            out[sid] = (float(r), float(c))
    return out
