"""Multi-scale variably-sized batch sampler, the fixed-resolution baseline, and update counting.

Each batch draws a resolution uniformly from a sorted set and sizes itself
inversely to that resolution's area, so a pass over the data at mostly
smaller resolutions takes fewer optimizer updates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng

DEFAULT_RESOLUTIONS = ((160, 160), (192, 192), (256, 256), (288, 288), (320, 320))


@dataclass(frozen=True)
class ResolutionSet:
    resolutions: tuple
    base_batch: int

    def __post_init__(self):
        res = tuple((int(h), int(w)) for h, w in self.resolutions)
        object.__setattr__(self, "resolutions", res)
        if not res:
            raise ValueError("resolution set is empty")
        areas = [h * w for h, w in res]
        if any(a >= b for a, b in zip(areas, areas[1:])):
            raise ValueError(f"resolutions must be strictly increasing by area: {res}")
        if self.base_batch < 1:
            raise ValueError("base batch size must be >= 1")

    @property
    def largest(self) -> tuple:
        return self.resolutions[-1]

    def batch_sizes(self) -> list:
        return [batch_size_at(self, r) for r in self.resolutions]


def batch_size_at(rset: ResolutionSet, resolution) -> int:
    """floor(H_n * W_n * b / (H_t * W_t)), at least 1."""
    h, w = int(resolution[0]), int(resolution[1])
    if (h, w) not in rset.resolutions:
        raise ValueError(f"resolution {(h, w)} not in {rset.resolutions}")
    hn, wn = rset.largest
    return max(1, hn * wn * rset.base_batch // (h * w))


@dataclass(frozen=True)
class Batch:
    resolution: tuple
    batch_size: int
    start: int
    stop: int


@dataclass(frozen=True)
class EpochPlan:
    batches: tuple
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    def batch_indices(self, batch: Batch) -> np.ndarray:
        return self.indices[batch.start:batch.stop]

    @property
    def total_samples(self) -> int:
        return sum(b.stop - b.start for b in self.batches)


def _draw_batches(rset: ResolutionSet, dataset_size: int, rng: Rng) -> list:
    sizes = rset.batch_sizes()
    out, pos = [], 0
    k = len(sizes)
    while pos < dataset_size:
        r = int(rng.integers(k)) if k > 1 else 0
        stop = min(pos + sizes[r], dataset_size)
        out.append(Batch(rset.resolutions[r], stop - pos, pos, stop))
        pos = stop
    return out


def plan_epoch(rset: ResolutionSet, dataset_size: int, seed: int = 0, epoch: int = 0) -> EpochPlan:
    """Shuffle the data and cut it into batches of randomly drawn resolutions."""
    if dataset_size < 1:
        raise ValueError("dataset_size must be >= 1")
    rng = Rng(seed).split("sampler", epoch)
    indices = rng.split("shuffle").permutation(dataset_size)
    return EpochPlan(tuple(_draw_batches(rset, dataset_size, rng.split("resolution"))), indices)


def draw_batches(rset: ResolutionSet, dataset_size: int, seed: int = 0, epoch: int = 0) -> list:
    """The batches :func:`plan_epoch` would produce, without shuffling indices."""
    return _draw_batches(rset, dataset_size, Rng(seed).split("sampler", epoch).split("resolution"))


def plan_standard(resolution, batch_size: int, dataset_size: int, seed: int = 0, epoch: int = 0) -> EpochPlan:
    """Fixed-resolution, fixed-batch baseline."""
    return plan_epoch(ResolutionSet((tuple(resolution),), batch_size), dataset_size, seed, epoch)


def count_updates(rset: ResolutionSet | None, dataset_size: int, epochs: int,
                  batch_size: int | None = None, seed: int = 0) -> int:
    """Optimizer updates over ``epochs``.

    ``rset=None`` is the standard sampler: ``epochs * ceil(dataset_size / batch_size)``.
    Otherwise the multi-scale plans are simulated (same draws as :func:`plan_epoch`).
    """
    if rset is None:
        if batch_size is None:
            raise ValueError("standard mode needs batch_size")
        return epochs * math.ceil(dataset_size / batch_size)
    return sum(len(draw_batches(rset, dataset_size, seed, e)) for e in range(epochs))


def expected_updates(rset: ResolutionSet, dataset_size: int, epochs: int) -> float:
    """Renewal-rate estimate: epochs * dataset_size / mean batch size."""
    return epochs * dataset_size / float(np.mean(rset.batch_sizes()))


def write_plan_csv(path, plans) -> None:
    """``plans`` is an iterable of (epoch, EpochPlan or list of Batch)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "height", "width", "batch_size"])
        for epoch, plan in plans:
            batches = plan.batches if isinstance(plan, EpochPlan) else plan
            for step, b in enumerate(batches):
                w.writerow([epoch, step, b.resolution[0], b.resolution[1], b.batch_size])
