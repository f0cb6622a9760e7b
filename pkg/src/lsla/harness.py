"""Desk-scale data, training and evaluation for ViT-LSLA.

Images are stored one per file in a raw float64 container (``.lslt``) next to
a ``manifest.csv`` listing ``file,label``. Everything random is driven from a
single seed so that runs are bit-reproducible.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore as nc
from .model import ModelConfig, Params, init_model, load_checkpoint, model_forward, save_checkpoint

log = logging.getLogger(__name__)

TENSOR_MAGIC = b"LSLT"
TENSOR_VERSION = 1
LOG_HEADER = ["epoch", "train_loss", "eval_top1", "lr"]


class DatasetError(ValueError):
    pass


class SizeMismatchError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


# tensor container


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    body = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    body += struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"missing tensor file {path}") from None
    if len(blob) < 16 or blob[:4] != TENSOR_MAGIC:
        raise DatasetError(f"{path}: not an LSLT tensor file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise DatasetError(f"{path}: checksum mismatch")
    version, rank = struct.unpack_from("<II", body, 4)
    if version != TENSOR_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    dims = struct.unpack_from(f"<{rank}Q", body, 12)
    off = 12 + 8 * rank
    n = int(np.prod(dims))
    if len(body) - off != 8 * n:
        raise DatasetError(f"{path}: payload size does not match shape {dims}")
    return np.frombuffer(body, dtype="<f8", offset=off).astype(np.float64).reshape(dims)


# datasets


@dataclass
class Dataset:
    root: Path
    files: list[str]
    labels: np.ndarray
    images: np.ndarray  # (n, h, w, 3) in [0, 1]
    num_classes: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.files)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def subset(self, order) -> "Dataset":
        order = np.asarray(order)
        return Dataset(
            self.root, [self.files[i] for i in order], self.labels[order], self.images[order], self.num_classes, self.split
        )


def ingest(root, num_classes: int | None = None, split: str | None = None) -> Dataset:
    """Load and validate a manifest directory. Sample order follows the manifest."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise DatasetError(f"missing manifest {manifest}")
    with open(manifest, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["file", "label"]:
        raise DatasetError(f"{manifest}: header must be 'file,label'")
    files, labels = [], []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != 2:
            raise DatasetError(f"{manifest}:{lineno}: expected 2 columns")
        try:
            labels.append(int(row[1]))
        except ValueError:
            raise DatasetError(f"{manifest}:{lineno}: bad label {row[1]!r}") from None
        files.append(row[0])
    if not files:
        raise DatasetError(f"{manifest}: no samples")
    labels_arr = np.asarray(labels, dtype=np.int64)
    classes = int(labels_arr.max()) + 1 if num_classes is None else num_classes
    if labels_arr.min() < 0 or labels_arr.max() >= classes:
        raise DatasetError(f"{manifest}: label out of range [0, {classes})")
    images = []
    for f in files:
        if not (root / f).is_file():
            raise DatasetError(f"manifest references missing file {f}")
        img = read_tensor(root / f)
        if img.ndim != 3 or img.shape[2] != 3 or (images and img.shape != images[0].shape):
            raise DatasetError(f"{f}: expected h x w x 3 matching the other samples, got {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise DatasetError(f"{f}: pixel values outside [0, 1]")
        images.append(img)
    return Dataset(root, files, labels_arr, np.stack(images), classes, split or root.name)


def _write_split(root: Path, images: np.ndarray, labels: np.ndarray) -> None:
    root.mkdir(parents=True, exist_ok=True)
    lines = ["file,label"]
    for i, (img, lab) in enumerate(zip(images, labels)):
        name = f"{i:05d}.lslt"
        write_tensor(root / name, img)
        lines.append(f"{name},{int(lab)}")
    with open(root / "manifest.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def grating_images(labels: np.ndarray, classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Class-conditional gratings with random phase plus noise.

    Class k alternates horizontal/vertical stripes and steps up in frequency
    every two classes, so horizontal flips and small crops keep the label.
    Samples of a class come in antiphase pairs sharing every other draw, so
    class means carry no grating; a faint per-class brightness offset is the
    only cue left for a pixel-space nearest-centroid classifier.
    """
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((len(labels), size, size, 3))
    pending: dict[int, tuple] = {}
    for i, k in enumerate(int(k) for k in labels):
        if k in pending:
            freq, phase, contrast, colour, base = pending.pop(k)
            phase += math.pi
        else:
            freq = (3.0 + 5.0 * (k // 2)) * rng.uniform(0.9, 1.1) / size
            phase = rng.uniform(0.0, 2.0 * math.pi)
            contrast = rng.uniform(0.25, 0.4)
            colour = rng.uniform(0.7, 1.0, size=3)
            base = 0.5 + 0.01 * (k - (classes - 1) / 2.0) + rng.normal(0.0, 0.03)
            pending[k] = (freq, phase, contrast, colour, base)
        coord = yy if k % 2 == 0 else xx
        wave = np.sin(2.0 * math.pi * freq * coord + phase)
        img = base + contrast * wave[..., None] * colour + rng.normal(0.0, 0.05, size=(size, size, 3))
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def synth_arrays(classes: int, per_class: int, size: int, seed: int = 42) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """In-memory synthetic splits: ``{"train": (images, labels), "eval": (...)}``.

    train holds ``per_class`` samples per class, eval ``per_class // 4`` (at least 1).
    """
    if size % 4:
        raise ValueError(f"image size {size} not divisible by 4")
    rng = np.random.default_rng(seed)
    out = {}
    for split, count in (("train", per_class), ("eval", max(1, per_class // 4))):
        labels = np.repeat(np.arange(classes), count)
        labels = labels[rng.permutation(labels.size)]
        out[split] = (grating_images(labels, classes, size, rng), labels)
    return out


def synth_dataset(root, classes: int, per_class: int, size: int, seed: int = 42) -> tuple[Path, Path]:
    """Write ``root/train`` and ``root/eval`` manifests; returns both paths."""
    root = Path(root)
    for split, (images, labels) in synth_arrays(classes, per_class, size, seed).items():
        _write_split(root / split, images, labels)
    return root / "train", root / "eval"


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    x = train.images.reshape(len(train), -1)
    cents = np.stack([x[train.labels == k].mean(axis=0) for k in range(train.num_classes)])
    y = test.images.reshape(len(test), -1)
    d = (y * y).sum(1)[:, None] - 2.0 * y @ cents.T + (cents * cents).sum(1)[None, :]
    return float(np.mean(d.argmin(axis=1) == test.labels))


# training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 2.5e-4
    min_lr: float = 0.0
    weight_decay: float = 0.05
    warmup_epochs: int | None = None  # None: 10% of epochs
    seed: int = 42
    input_size: int = 56
    random_crop_pad: int = 4
    horizontal_flip: bool = True
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.base_lr < 0:
            raise ValueError("learning rate must be non-negative")

    @property
    def warmup(self) -> int:
        return int(round(0.1 * self.epochs)) if self.warmup_epochs is None else self.warmup_epochs


def lr_at(tcfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup then cosine decay to ``min_lr``; ``step`` counts from 0."""
    total = tcfg.epochs * steps_per_epoch
    warm = tcfg.warmup * steps_per_epoch
    if step < warm:
        return tcfg.base_lr * (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return tcfg.min_lr + 0.5 * (tcfg.base_lr - tcfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def no_decay_names(params: Params) -> list[str]:
    """Vectors, the dynamic scale and position biases are exempt from weight decay."""
    skip = ("dynamic_scale", "inner_bias", "outer_bias")
    return [k for k, v in params.items() if v.ndim < 2 or k.endswith(skip)]


def augment(images: np.ndarray, tcfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    out = images
    pad = tcfg.random_crop_pad
    if pad:
        b, h, w, _ = images.shape
        padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
        offs = rng.integers(0, 2 * pad + 1, size=(b, 2))
        out = np.stack([padded[i, dy : dy + h, dx : dx + w] for i, (dy, dx) in enumerate(offs)])
    if tcfg.horizontal_flip:
        flip = rng.random(len(out)) < 0.5
        out = np.where(flip[:, None, None, None], out[:, :, ::-1], out)
    return out


def predict(cfg: ModelConfig, params: Params, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    preds = []
    frozen = {k: v.detach() for k, v in params.items()}
    for i in range(0, len(images), batch_size):
        logits = model_forward(cfg, frozen, nc.Tensor(images[i : i + batch_size]))
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def accuracy(cfg: ModelConfig, params: Params, ds: Dataset, batch_size: int = 64) -> float:
    if ds.image_size != cfg.image_size:
        raise SizeMismatchError(f"dataset images are {ds.image_size}px, model expects {cfg.image_size}px")
    return float(np.mean(predict(cfg, params, ds.images, batch_size) == ds.labels))


def evaluate(checkpoint, ds: Dataset) -> float:
    """Top-1 accuracy of a checkpoint (path or (cfg, params)) on ``ds``."""
    cfg, params = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    return accuracy(cfg, params, ds)


@dataclass
class TrainResult:
    cfg: ModelConfig
    params: Params
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def epochs_to(self, target: float) -> float:
        for epoch, _, acc, _ in self.rows:
            if acc >= target:
                return epoch
        return math.inf


def format_log(rows) -> str:
    lines = [",".join(LOG_HEADER)]
    for epoch, loss, acc, lr in rows:
        lines.append(f"{epoch},{loss:.17g},{acc:.17g},{lr:.17g}")
    return "\n".join(lines) + "\n"


def train(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    train_ds: Dataset,
    eval_ds: Dataset,
    checkpoint_path=None,
    log_path=None,
    on_epoch: Callable[[tuple], None] | None = None,
) -> TrainResult:
    if train_ds.image_size != cfg.image_size or eval_ds.image_size != cfg.image_size:
        raise SizeMismatchError(f"dataset size does not match model input {cfg.image_size}")
    if train_ds.num_classes > cfg.num_classes:
        raise SizeMismatchError(f"{train_ds.num_classes} classes but model head has {cfg.num_classes}")
    init_seq, shuffle_seq, aug_seq = np.random.SeedSequence(tcfg.seed).spawn(3)
    params = init_model(cfg, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    aug_rng = np.random.default_rng(aug_seq)
    skip = no_decay_names(params)
    state = nc.AdamWState()
    n = len(train_ds)
    spe = math.ceil(n / tcfg.batch_size)
    result = TrainResult(cfg, params)
    step = 0
    lr = 0.0
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total_loss = 0.0
        for s in range(spe):
            idx = order[s * tcfg.batch_size : (s + 1) * tcfg.batch_size]
            batch = augment(train_ds.images[idx], tcfg, aug_rng)
            for p in params.values():
                p.grad = None
            loss = nc.cross_entropy(model_forward(cfg, params, nc.Tensor(batch)), train_ds.labels[idx])
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {s}")
            loss.backward()
            lr = lr_at(tcfg, step, spe)
            grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in params.items()}
            nc.adamw_step(
                {k: v.data for k, v in params.items()}, grads, state, lr,
                weight_decay=tcfg.weight_decay, no_decay=skip,
            )
            total_loss += loss.item() * len(idx)
            step += 1
        acc = accuracy(cfg, params, eval_ds, tcfg.eval_batch_size)
        row = (epoch, total_loss / n, acc, lr)
        result.rows.append(row)
        log.info("epoch %d loss %.4f eval_top1 %.4f lr %.3g", *row)
        if on_epoch:
            on_epoch(row)
    for p in params.values():
        p.grad = None
    if checkpoint_path is not None:
        save_checkpoint(cfg, params, checkpoint_path)
    if log_path is not None:
        Path(log_path).write_text(format_log(result.rows), encoding="utf-8")
    return result
