"""Training loop, checkpoint evaluation and HAM rendering used by the CLI."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, dump_run_config
from .dataio import Dataset, Sample, SplitSpec, augment, load_dataset, split_validation
from .loss import margin_at
from .metrics import EvalReport, evaluate
from .model import Decaps, build
from .nn import Adam
from .peekaboo import PredictionSet, distill_infer, normalize_ham, patch_crop, peekaboo_train_step, resize_np
from .pnm import write_pgm, write_ppm
from .rng import Xoshiro256, derive_seed
from .routing import average_ham

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "margin", "loss", "val_accuracy")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    margin: float
    loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: Decaps
    history: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    forward_passes: int = 0
    backward_passes: int = 0


def split_spec(run: RunConfig) -> SplitSpec:
    root = Path(run.data_root)

    def resolve(p):
        if not p:
            return None
        p = Path(p)
        return str(p if p.is_absolute() or p.exists() else root / p)

    return SplitSpec(run.train_fraction, run.split_seed, resolve(run.train_list), resolve(run.test_list))


def load_run_dataset(run: RunConfig) -> Dataset:
    return load_dataset(run.data_root, split_spec(run), run.model.input_size)


def _stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples], dtype=int)


def accuracy(preds: PredictionSet, labels: np.ndarray, mode: str = "distilled") -> float:
    return float(np.mean(preds.predicted(mode) == labels))


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / f"epoch_{epoch:03d}.dcaps"


def train(run: RunConfig, dataset: Dataset | None = None) -> TrainResult:
    """Train from scratch, writing a checkpoint and a log row per epoch."""
    cfg = run.model
    data = dataset if dataset is not None else load_run_dataset(run)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(dump_run_config(run))
    train_set, val_set = split_validation(data.train, run.val_fraction, cfg.seed)
    val_x, val_y = _stack(val_set) if val_set else (None, None)

    model = build(cfg)
    opt = Adam(model.named_parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2))
    rng = Xoshiro256(derive_seed("train", cfg.seed))
    result = TrainResult(model)
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        csv.writer(fh).writerow(LOG_HEADER)

    bs = cfg.batch_size
    for epoch in range(run.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), bs)):
            batch = [train_set[i] for i in order[start:start + bs]]
            if run.augment:
                batch = [augment(s, cfg.seed, epoch) for s in batch]
            x, y = _stack(batch)
            before = model.forward_count
            try:
                step = peekaboo_train_step(model, opt, x, y, epoch, rng, peekaboo=run.peekaboo)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {b}: {exc}") from None
            if not math.isfinite(step.loss):
                raise TrainingDiverged(f"epoch {epoch} batch {b}: loss is {step.loss}")
            result.forward_passes += model.forward_count - before
            result.backward_passes += 1
            losses.append(step.loss)
        val_acc = accuracy(distill_infer(model, val_x), val_y) if val_set else float("nan")
        rec = EpochRecord(epoch, margin_at(epoch, cfg.margin_schedule), float(np.mean(losses)), val_acc)
        result.history.append(rec)
        with open(log_path, "a", newline="") as fh:
            csv.writer(fh).writerow([rec.epoch, repr(rec.margin), repr(rec.loss), repr(rec.val_accuracy)])
        path = checkpoint_path(out, epoch)
        checkpoint.save(path, model, epoch + 1, rng.state, opt, extra={"val_accuracy": val_acc})
        result.checkpoints.append(path)
        log.info("epoch %d margin %.2f loss %.5f val_acc %.4f", epoch, rec.margin, rec.loss, val_acc)
    return result


def read_log(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), float(r["margin"]), float(r["loss"]), float(r["val_accuracy"]))
            for r in rows]


def best_checkpoints(run_dir, k: int = 5) -> list[Path]:
    """Top-k epochs by validation accuracy (later epochs win ties)."""
    recs = read_log(Path(run_dir) / "train_log.csv")
    ranked = sorted(recs, key=lambda r: (r.val_accuracy, r.epoch), reverse=True)[:k]
    return [checkpoint_path(run_dir, r.epoch) for r in ranked]


def evaluate_predictions(preds: PredictionSet, labels: np.ndarray, mode: str = "distilled",
                         positive: int = 1) -> EvalReport:
    scores = preds.scores(mode)
    return evaluate(preds.predicted(mode) == positive, scores[:, positive], labels)


def predict_samples(model: Decaps, samples: list[Sample]) -> tuple[PredictionSet, np.ndarray]:
    x, y = _stack(samples)
    return distill_infer(model, x), y


# -- HAM rendering ---------------------------------------------------------------------

def _heat(ham_map: np.ndarray, size: int) -> np.ndarray:
    return np.clip(resize_np(normalize_ham(ham_map), (size, size)), 0.0, 1.0)


def draw_box(image: np.ndarray, pixel_box, width: int = 2) -> np.ndarray:
    """Gray image -> RGB with a red rectangle outline of ``width`` pixels inside the box."""
    rgb = np.repeat(image[:, :, None], 3, axis=2).astype(np.float64)
    if pixel_box is None:
        return rgb
    r0, c0, r1, c1 = pixel_box
    red = np.array([1.0, 0.0, 0.0])
    rgb[r0:min(r0 + width, r1), c0:c1] = red
    rgb[max(r1 - width, r0):r1, c0:c1] = red
    rgb[r0:r1, c0:min(c0 + width, c1)] = red
    rgb[r0:r1, max(c1 - width, c0):c1] = red
    return rgb


@dataclass
class HamRender:
    overlay: np.ndarray
    heatmap: np.ndarray
    crop: np.ndarray
    fine_heatmap: np.ndarray
    box: object
    predicted: int


def render_ham(model: Decaps, image: np.ndarray) -> HamRender:
    size = model.cfg.input_size
    preds = distill_infer(model, image[None])
    cls = int(np.linalg.norm(preds.coarse[0], axis=-1).argmax())
    coarse_map = average_ham(preds.coarse_ham[0], cls)
    box = preds.boxes[0]
    crop = patch_crop(image, box) if box is not None else image.copy()
    return HamRender(
        overlay=draw_box(image, None if box is None else box.pixel),
        heatmap=_heat(coarse_map, size),
        crop=crop,
        fine_heatmap=_heat(average_ham(preds.fine_ham[0], cls), size),
        box=box,
        predicted=int(preds.predicted()[0]),
    )


def write_ham_images(render: HamRender, out_dir, stem: str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}_overlay.ppm", out / f"{stem}_ham.pgm", out / f"{stem}_crop.pgm",
             out / f"{stem}_fine_ham.pgm"]
    write_ppm(paths[0], render.overlay)
    write_pgm(paths[1], render.heatmap)
    write_pgm(paths[2], render.crop)
    write_pgm(paths[3], render.fine_heatmap)
    return paths
