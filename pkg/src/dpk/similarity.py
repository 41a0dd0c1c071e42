"""Representation similarity between teacher and student activations.

Linear-kernel Gram matrices, the unbiased HSIC estimator, minibatch CKA,
per-example cosine similarity and the mapping from a similarity score to a
mask ratio. Everything here runs in float64 numpy, independent of the
precision the networks train in.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from dpk._validation import check_activation_matrix, check_square_pair

MIN_BATCH = 4


class DegenerateBatchError(ValueError):
    """Raised when a CKA normalizer is not strictly positive."""


def gram(x) -> np.ndarray:
    """Linear-kernel Gram matrix ``x @ x.T`` in float64."""
    x = check_activation_matrix(x, min_rows=1)
    return x @ x.T


def hsic1(k, l) -> float:
    """Unbiased HSIC estimator on two Gram matrices.

    The diagonals of both matrices are zeroed before use, so the estimate
    ignores self-similarity terms. The value can be negative.

    Args:
        k: (n, n) Gram matrix of the first representation.
        l: (n, n) Gram matrix of the second representation, same n.

    Returns:
        The scalar estimate.
    """
    k, l = check_square_pair(k, l, min_n=MIN_BATCH)
    n = k.shape[0]
    k = k.copy()
    l = l.copy()
    np.fill_diagonal(k, 0.0)
    np.fill_diagonal(l, 0.0)

    trace_kl = np.sum(k * l.T)
    sums = k.sum() * l.sum() / ((n - 1) * (n - 2))
    # both matrices are symmetric, so column sums stand in for row sums;
    # using the same axis on both sides keeps hsic1(k, l) == hsic1(l, k) bitwise
    cross = 2.0 / (n - 2) * (k.sum(axis=0) @ l.sum(axis=0))
    return float((trace_kl + sums - cross) / (n * (n - 3)))


def cka_minibatch(xs: Sequence, ys: Sequence) -> float:
    """CKA averaged over paired minibatches.

    HSIC terms are averaged over the k batches before normalization, so a
    single noisy batch does not dominate the estimate.

    Raises:
        DegenerateBatchError: if either self-HSIC mean is <= 0.
    """
    if len(xs) != len(ys):
        raise ValueError(f"got {len(xs)} x-batches but {len(ys)} y-batches")
    if len(xs) == 0:
        raise ValueError("need at least one minibatch")

    xy = xx = yy = 0.0
    for x, y in zip(xs, ys):
        x = check_activation_matrix(x, min_rows=MIN_BATCH)
        y = check_activation_matrix(y, min_rows=MIN_BATCH)
        if x.shape[0] != y.shape[0]:
            raise ValueError(
                f"paired batches differ in size: {x.shape[0]} vs {y.shape[0]}"
            )
        kx, ly = gram(x), gram(y)
        xy += hsic1(kx, ly)
        xx += hsic1(kx, kx)
        yy += hsic1(ly, ly)

    count = len(xs)
    xy, xx, yy = xy / count, xx / count, yy / count
    if xx <= 0.0 or yy <= 0.0:
        raise DegenerateBatchError(
            f"non-positive self-HSIC mean (x: {xx:.3g}, y: {yy:.3g})"
        )
    if xx == yy and xy == xx:
        return 1.0
    return float(xy / math.sqrt(xx) / math.sqrt(yy))


def random_orthonormal(rows: int, cols: int, seed: int) -> np.ndarray:
    """(rows, cols) matrix with orthonormal columns, reproducible from seed."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # sign fix so the draw is uniform over the Stiefel manifold
    return q * np.sign(np.diag(r))


class CosineProjector:
    """Caches the fixed random projection used when feature widths differ."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def __call__(self, x: np.ndarray, target_dim: int) -> np.ndarray:
        p = x.shape[1]
        if p == target_dim:
            return x
        key = (p, target_dim)
        if key not in self._cache:
            self._cache[key] = random_orthonormal(p, target_dim, self.seed)
        return x @ self._cache[key]


def cosine_gap(x, y, projector: CosineProjector | None = None) -> float:
    """Mean per-example cosine similarity between two activation matrices.

    When the widths differ, the wider matrix is projected down to the
    narrower width with a fixed seeded orthonormal projection. Rows with
    zero norm contribute a cosine of 0.
    """
    x = check_activation_matrix(x, min_rows=1)
    y = check_activation_matrix(y, min_rows=1)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[1] != y.shape[1]:
        projector = projector or CosineProjector()
        dim = min(x.shape[1], y.shape[1])
        x, y = projector(x, dim), projector(y, dim)

    norms = np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)
    dots = np.einsum("ij,ij->i", x, y)
    safe = norms > 0
    cos = np.zeros(x.shape[0])
    cos[safe] = dots[safe] / norms[safe]
    return float(np.clip(cos, -1.0, 1.0).mean())


def dynamic_ratio(similarity: float) -> float:
    """Mask ratio from a similarity score: ``clip(1 - similarity, 0, 1)``."""
    if not math.isfinite(similarity):
        raise ValueError(f"similarity must be finite, got {similarity}")
    return min(1.0, max(0.0, 1.0 - similarity))


def merge_small_batches(sizes: Iterable[int], minimum: int = MIN_BATCH) -> list[int]:
    """Fold any batch smaller than ``minimum`` into its predecessor.

    >>> merge_small_batches([32, 32, 3])
    [32, 35]
    """
    merged: list[int] = []
    for s in sizes:
        if s < minimum and merged:
            merged[-1] += s
        else:
            merged.append(s)
    return merged


TRACE_COLUMNS = (
    "step",
    "stage",
    "cka",
    "cosine",
    "ratio",
    "cls_loss",
    "logits_loss",
    "feat_loss",
)


@dataclass(frozen=True)
class TraceEntry:
    step: int
    stage: str
    cka: float
    cosine: float
    ratio: float
    epoch: int = 0
    cls_loss: float = 0.0
    logits_loss: float = 0.0
    feat_loss: float = 0.0


@dataclass
class SimilarityTrace:
    """Per-step similarity values and the mask ratios derived from them."""

    entries: list[TraceEntry] = field(default_factory=list)
    _stages_at_step: set = field(default_factory=set, repr=False, compare=False)

    def append(self, entry: TraceEntry) -> None:
        if not 0.0 <= entry.ratio <= 1.0:
            raise ValueError(f"ratio {entry.ratio} outside [0, 1]")
        if self.entries:
            last = self.entries[-1]
            if entry.step < last.step:
                raise ValueError(f"step {entry.step} after step {last.step}")
            if entry.step == last.step and entry.stage in self._stages_at_step:
                raise ValueError(f"duplicate entry for step {entry.step}, {entry.stage}")
            if entry.step != last.step:
                self._stages_at_step = set()
        self._stages_at_step.add(entry.stage)
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def stages(self) -> list[str]:
        return list(dict.fromkeys(e.stage for e in self.entries))

    def epoch_means(self, column: str, stage: str | None = None) -> dict[int, float]:
        """Mean of ``column`` per epoch, optionally for a single stage.

        NaN values (degenerate batches) are skipped.
        """
        buckets: dict[int, list[float]] = {}
        for e in self.entries:
            if stage is not None and e.stage != stage:
                continue
            v = getattr(e, column)
            if math.isfinite(v):
                buckets.setdefault(e.epoch, []).append(v)
        return {ep: float(np.mean(v)) for ep, v in sorted(buckets.items())}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for e in self.entries:
                writer.writerow(
                    [e.step, e.stage]
                    + [_fmt(getattr(e, c)) for c in TRACE_COLUMNS[2:]]
                )


def _fmt(value: float) -> str:
    return repr(float(value))
