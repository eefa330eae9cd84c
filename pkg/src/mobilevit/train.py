"""Toy-scale training: warmup + cosine schedule, smoothed cross-entropy, AdamW, EMA.

:func:`train_toy` composes the whole loop over a synthetic or on-disk image
dataset with either the standard or the multi-scale sampler.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .blocks import resize_array
from .model import ArchSpec, ModelConfig, build
from .rng import Rng
from .sampler import ResolutionSet, plan_epoch, plan_standard
from .tensor import Tensor, backward, log_softmax, no_grad

log = logging.getLogger(__name__)


# -- schedule ---------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    start_lr: float = 2e-4
    peak_lr: float = 2e-3
    final_lr: float = 2e-4
    warmup: int = 3000
    total: int = 375_600

    def __post_init__(self):
        if not 0 <= self.warmup <= self.total:
            raise ValueError(f"need 0 <= warmup <= total, got {self.warmup}, {self.total}")


def lr_at(schedule: Schedule, t: float) -> float:
    """Linear warmup from ``start_lr`` to ``peak_lr``, then cosine down to ``final_lr``."""
    s = schedule
    t = min(max(t, 0), s.total)
    if t < s.warmup:
        return s.start_lr + (s.peak_lr - s.start_lr) * t / s.warmup
    span = s.total - s.warmup
    frac = (t - s.warmup) / span if span else 1.0
    return s.final_lr + 0.5 * (s.peak_lr - s.final_lr) * (1.0 + math.cos(math.pi * frac))


# -- loss ---------------------------------------------------------------------------


def label_smoothing_ce(logits: Tensor, targets, smoothing: float = 0.1) -> Tensor:
    """Mean cross-entropy against ``(1 - eps) * onehot + eps / K``."""
    b, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape != (b,):
        raise ValueError(f"expected {b} targets, got {targets.shape}")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"targets must lie in [0, {k}), got range [{targets.min()}, {targets.max()}]")
    q = np.full((b, k), smoothing / k, dtype=np.float32)
    q[np.arange(b), targets] += 1.0 - smoothing
    return (log_softmax(logits, axis=1) * Tensor(q)).sum() * (-1.0 / b)


# -- optimizer state -----------------------------------------------------------------


@dataclass
class TrainState:
    weights: dict
    decay_mask: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def from_model(cls, model) -> "TrainState":
        weights = dict(model.named_parameters())
        return cls(
            weights=weights,
            decay_mask=model.decay_mask(),
            m={n: np.zeros_like(p.data) for n, p in weights.items()},
            v={n: np.zeros_like(p.data) for n, p in weights.items()},
            ema={n: p.data.copy() for n, p in weights.items()},
        )


def adamw_step(state: TrainState, grads: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01) -> TrainState:
    """Decoupled weight decay, then a bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}; step {state.step + 1} rejected")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in state.weights.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        w = p.data
        if weight_decay and state.decay_mask.get(name, True):
            w -= np.float32(lr * weight_decay) * w
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(np.float32)
    return state


def ema_update(shadow: dict, weights: dict, decay: float = 0.9995) -> dict:
    """In place: ``shadow <- decay * shadow + (1 - decay) * weights``."""
    for name, s in shadow.items():
        w = weights[name]
        w = w.data if isinstance(w, Tensor) else w
        s *= decay
        s += (1.0 - decay) * w
    return shadow


# -- data -----------------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray
    classes: list

    def __len__(self) -> int:
        return len(self.labels)


def synthetic_blobs(n: int, num_classes: int = 4, size: int = 64, seed: int = 0, noise: float = 0.05) -> Dataset:
    """Gaussian-blob images whose blob colour encodes the class.

    Blob position and width vary per image. A faint class tint covers the
    whole image, so any crop still carries the label.
    """
    if n < 1:
        raise ValueError("dataset must not be empty")
    rng = Rng(seed).split("synthetic")
    hues = np.linspace(0, 2 * np.pi, num_classes, endpoint=False)
    palette = 0.5 + 0.45 * np.stack([np.cos(hues), np.cos(hues - 2.094), np.cos(hues + 2.094)], axis=1)
    labels = np.arange(n) % num_classes
    labels = labels[rng.split("order").permutation(n)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i, k in enumerate(labels):
        r = rng.split("img", i)
        cy, cx = r.uniform(2, 0.25 * size, 0.75 * size)
        sig = size * (0.12 + 0.1 * r.random())
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
        tint = (palette[k] - 0.5)[:, None, None]
        img = 0.5 + (0.3 + 0.7 * blob[None]) * tint + r.normal((3, size, size), noise)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), [f"class{k}" for k in range(num_classes)])


IMAGE_SUFFIXES = {".png", ".ppm"}


def load_image_folder(root, size: int = 64) -> Dataset:
    """``root/<class-name>/*.png|ppm`` (8-bit RGB), resized to ``size`` x ``size``."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for k, cls in enumerate(classes):
        for f in sorted((root / cls).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            with Image.open(f) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            images.append(resize_array(arr.transpose(2, 0, 1), size, size))
            labels.append(k)
    if not images:
        raise ValueError(f"no .png/.ppm images under {root}")
    return Dataset(np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.int64), classes)


def random_resized_crop(img: np.ndarray, out_h: int, out_w: int, rng: Rng,
                        scale=(0.08, 1.0), ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    _, h, w = img.shape
    area = h * w
    for _ in range(10):
        target = area * (scale[0] + (scale[1] - scale[0]) * rng.random())
        logr = math.log(ratio[0]) + (math.log(ratio[1]) - math.log(ratio[0])) * rng.random()
        ar = math.exp(logr)
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            break
    else:  # central crop at the clamped ratio
        ch, cw = h, w
        y0 = x0 = 0
    return resize_array(img[:, y0:y0 + ch, x0:x0 + cw], out_h, out_w)


def augment(img: np.ndarray, out_h: int, out_w: int, rng: Rng) -> np.ndarray:
    out = random_resized_crop(img, out_h, out_w, rng)
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return out


def normalize(images: np.ndarray) -> np.ndarray:
    return ((images - 0.5) / 0.25).astype(np.float32)


# -- loop -------------------------------------------------------------------------------

MICRO_ARCH = ArchSpec(8, ((8,), (16, 16), (24,), (32,), (32,)), (32, 32, 32), (1, 1, 1), 64, 2)


@dataclass
class TrainConfig:
    epochs: int = 20
    sampler: str = "multiscale"
    resolutions: tuple = ((32, 32), (48, 48), (64, 64))
    batch_size: int = 16
    start_lr: float = 2e-4
    peak_lr: float = 2e-3
    final_lr: float = 2e-4
    warmup: int = 20
    weight_decay: float = 0.01
    label_smoothing: float = 0.1
    ema_decay: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_resolution: int = 64
    augment: bool = True

    def __post_init__(self):
        if self.sampler not in ("standard", "multiscale"):
            raise ValueError(f"sampler must be 'standard' or 'multiscale', got {self.sampler!r}")
        self.resolutions = tuple(tuple(int(v) for v in r) for r in self.resolutions)


def micro_config(num_classes: int = 4, patch=(2, 2, 2)) -> ModelConfig:
    return ModelConfig(variant="micro", patch=tuple(patch), num_classes=num_classes, arch=MICRO_ARCH)


def _plans(cfg: TrainConfig, n: int) -> list:
    if cfg.sampler == "standard":
        res = cfg.resolutions[-1]
        return [plan_standard(res, cfg.batch_size, n, cfg.seed, e) for e in range(cfg.epochs)]
    rset = ResolutionSet(cfg.resolutions, cfg.batch_size)
    return [plan_epoch(rset, n, cfg.seed, e) for e in range(cfg.epochs)]


def _make_batch(data: Dataset, idx: np.ndarray, res: tuple, cfg: TrainConfig, epoch: int) -> np.ndarray:
    root = Rng(cfg.seed).split("augment", epoch)
    out = np.empty((len(idx), 3, res[0], res[1]), dtype=np.float32)
    for j, i in enumerate(idx):
        img = data.images[i]
        if cfg.augment:
            out[j] = augment(img, res[0], res[1], root.split(int(i)))
        else:
            out[j] = resize_array(img, res[0], res[1])
    return normalize(out)


def evaluate(model, data: Dataset, resolution: int, batch: int = 64) -> tuple:
    """(mean unsmoothed loss, top-1) in eval mode without augmentation."""
    model.eval()
    losses, correct = 0.0, 0
    with no_grad():
        for lo in range(0, len(data), batch):
            x = normalize(resize_array(data.images[lo:lo + batch], resolution, resolution))
            y = data.labels[lo:lo + batch]
            logits = model(Tensor(x))
            losses += label_smoothing_ce(logits, y, 0.0).item() * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    return losses / len(data), correct / len(data)


def _swap(weights: dict, arrays: dict) -> dict:
    saved = {n: p.data.copy() for n, p in weights.items()}
    for n, p in weights.items():
        p.data[...] = arrays[n]
    return saved


def train_toy(model_config: ModelConfig, train_data: Dataset, cfg: TrainConfig,
              val_data: Dataset | None = None) -> dict:
    """Run the recipe end to end; returns ``{"metrics": rows, "state", "model", "summary"}``.

    Metric rows carry ``epoch, split, loss, top1, lr, updates``. Splits:
    ``train`` (running, augmented), ``val`` (raw weights), ``val_ema``.
    """
    if len(train_data) == 0:
        raise ValueError("training dataset is empty")
    model = build(model_config, cfg.seed)
    state = TrainState.from_model(model)
    plans = _plans(cfg, len(train_data))
    total = sum(len(p) for p in plans)
    sched = Schedule(cfg.start_lr, cfg.peak_lr, cfg.final_lr, min(cfg.warmup, total), total)
    rows = []
    val_data = val_data if val_data is not None else train_data
    for epoch, plan in enumerate(plans):
        model.train()
        loss_sum, correct, seen = 0.0, 0, 0
        lr = lr_at(sched, state.step)
        for b in plan:
            idx = plan.batch_indices(b)
            x = _make_batch(train_data, idx, b.resolution, cfg, epoch)
            y = train_data.labels[idx]
            for p in state.weights.values():
                p.grad = None
            logits = model(Tensor(x))
            loss = label_smoothing_ce(logits, y, cfg.label_smoothing)
            grads = backward(loss)
            lr = lr_at(sched, state.step)
            adamw_step(state, {n: grads[p.id] for n, p in state.weights.items() if p.id in grads},
                       lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
            ema_update(state.ema, state.weights, cfg.ema_decay)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(idx)
        rows.append(_row(epoch, "train", loss_sum / seen, correct / seen, lr, state.step))
        vl, va = evaluate(model, val_data, cfg.eval_resolution)
        rows.append(_row(epoch, "val", vl, va, lr, state.step))
        saved = _swap(state.weights, state.ema)
        el, ea = evaluate(model, val_data, cfg.eval_resolution)
        _swap(state.weights, saved)
        rows.append(_row(epoch, "val_ema", el, ea, lr, state.step))
        log.info("epoch %d: train loss %.4f top1 %.3f | val %.3f ema %.3f | updates %d",
                 epoch, rows[-3]["loss"], rows[-3]["top1"], va, ea, state.step)
    train_rows = [r for r in rows if r["split"] == "train"]
    summary = {
        "epochs": cfg.epochs,
        "updates": state.step,
        "updates_per_epoch": [len(p) for p in plans],
        "final_train_loss": train_rows[-1]["loss"],
        "initial_train_loss": train_rows[0]["loss"],
        "final_train_top1": train_rows[-1]["top1"],
        "best_train_top1": max(r["top1"] for r in train_rows),
        "final_val_top1": rows[-2]["top1"],
        "final_val_ema_top1": rows[-1]["top1"],
        "config": asdict(cfg),
    }
    return {"metrics": rows, "state": state, "model": model, "summary": summary}


def _row(epoch, split, loss, top1, lr, updates) -> dict:
    return {"epoch": epoch, "split": split, "loss": round(float(loss), 6), "top1": round(float(top1), 6),
            "lr": float(lr), "updates": int(updates)}


def write_metrics(out_dir, result: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "split", "loss", "top1", "lr", "updates"])
        w.writeheader()
        w.writerows(result["metrics"])
    (out / "report.json").write_text(json.dumps(result["summary"], indent=2, sort_keys=True))
