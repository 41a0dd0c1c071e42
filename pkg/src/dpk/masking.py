"""Token masks and mask-ratio schedules.

A mask marks the token positions whose student features are replaced by
the filler (the teacher's tokens by default). All ratio-driven strategies
realize exactly ``round(ratio * N)`` masked positions per sample.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from dpk._validation import check_ratio
from dpk.similarity import dynamic_ratio

logger = logging.getLogger(__name__)

PATTERNS = ("random", "block", "grid")
SCHEDULES = ("fixed", "exponential", "linear", "cka", "cosine")

EXP_DECAY = 0.95
LINEAR_DECREMENT = 0.95
INITIAL_DYNAMIC_RATIO = 0.5

MIN_BLOCK_TOKENS = 4
MIN_ASPECT = 0.3


def derive_seed(seed: int, purpose: str) -> int:
    """Sub-seed for one consumer of randomness.

    The first 8 bytes of ``sha256(f"{seed}:{purpose}")``, little-endian,
    masked to 63 bits.
    """
    digest = hashlib.sha256(f"{seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def mask_stream(seed: int, step: int, index: int) -> np.random.Generator:
    """Randomness for the mask of sample ``index`` at training step ``step``."""
    return np.random.default_rng([seed, step, index])


def target_count(ratio: float, n: int) -> int:
    """``round(ratio * n)`` with halves rounded up."""
    return int(math.floor(ratio * n + 0.5))


@dataclass(frozen=True)
class MaskPattern:
    """Boolean flags over a (rows, cols) token grid; True = filled by teacher."""

    flags: np.ndarray
    grid: tuple[int, int]
    blocks: tuple[tuple[int, int, int, int], ...] = field(default=(), compare=False)

    def __post_init__(self):
        rows, cols = self.grid
        if self.flags.shape != (rows * cols,):
            raise ValueError(f"flags shape {self.flags.shape} does not match grid {self.grid}")

    @property
    def realized_count(self) -> int:
        return int(self.flags.sum())

    @property
    def ratio(self) -> float:
        return self.realized_count / self.flags.size

    def as_grid(self) -> np.ndarray:
        return self.flags.reshape(self.grid)


def random_mask(grid, ratio: float, rng: np.random.Generator) -> MaskPattern:
    rows, cols = grid
    n = rows * cols
    count = target_count(check_ratio(ratio), n)
    flags = np.zeros(n, dtype=bool)
    flags[rng.permutation(n)[:count]] = True
    return MaskPattern(flags, (rows, cols))


def _block_shapes(rows: int, cols: int) -> list[tuple[int, int]]:
    return [
        (h, w)
        for h in range(1, rows + 1)
        for w in range(1, cols + 1)
        if h * w >= MIN_BLOCK_TOKENS and MIN_ASPECT <= h / w <= 1 / MIN_ASPECT
    ]


def block_mask(grid, ratio: float, rng: np.random.Generator) -> MaskPattern:
    """Union of random rectangles, trimmed to the exact target count.

    Rectangles cover at least 4 tokens with aspect ratio in [0.3, 1/0.3];
    each one is at most as large as the still-missing count (or the minimum
    block). Once the union reaches the target, random masked tokens on the
    block boundary are released until the count matches exactly.
    """
    rows, cols = grid
    n = rows * cols
    count = target_count(check_ratio(ratio), n)
    shapes = _block_shapes(rows, cols)
    if not shapes:
        logger.warning("grid %dx%d too small for block masking; using random mask", rows, cols)
        return random_mask(grid, ratio, rng)
    if count == 0:
        return MaskPattern(np.zeros(n, dtype=bool), (rows, cols))
    if count == n:
        return MaskPattern(np.ones(n, dtype=bool), (rows, cols), ((0, 0, rows, cols),))

    canvas = np.zeros((rows, cols), dtype=bool)
    blocks = []
    while canvas.sum() < count:
        budget = max(MIN_BLOCK_TOKENS, count - int(canvas.sum()))
        fitting = [s for s in shapes if s[0] * s[1] <= budget]
        h, w = fitting[rng.integers(len(fitting))] if fitting else min(shapes, key=lambda s: s[0] * s[1])
        top = int(rng.integers(rows - h + 1))
        left = int(rng.integers(cols - w + 1))
        canvas[top : top + h, left : left + w] = True
        blocks.append((top, left, h, w))

    while canvas.sum() > count:
        boundary = np.argwhere(canvas & _touches_unmasked(canvas))
        r, c = boundary[rng.integers(len(boundary))]
        canvas[r, c] = False

    return MaskPattern(canvas.ravel(), (rows, cols), tuple(blocks))


def _touches_unmasked(canvas: np.ndarray) -> np.ndarray:
    # a masked cell is on the boundary if a 4-neighbour is unmasked or off-grid
    padded = np.pad(canvas, 1, constant_values=False)
    return (
        ~padded[:-2, 1:-1] | ~padded[2:, 1:-1] | ~padded[1:-1, :-2] | ~padded[1:-1, 2:]
    )


def grid_mask(grid) -> MaskPattern:
    """Keep the top-left token of every 2x2 cell, mask the other three.

    Odd grids use the same rule on the partial boundary cells, so the ratio
    is exactly 0.75 only when both sides are even.
    """
    rows, cols = grid
    r, c = np.indices((rows, cols))
    keep = (r % 2 == 0) & (c % 2 == 0)
    return MaskPattern((~keep).ravel(), (rows, cols))


def make_mask(pattern: str, grid, ratio: float, rng: np.random.Generator) -> MaskPattern:
    if pattern == "random":
        return random_mask(grid, ratio, rng)
    if pattern == "block":
        return block_mask(grid, ratio, rng)
    if pattern == "grid":
        return grid_mask(grid)
    raise ValueError(f"unknown mask pattern {pattern!r}; expected one of {PATTERNS}")


def batch_masks(
    pattern: str, grid, ratio: float, batch_size: int, seed: int, step: int
) -> np.ndarray:
    """Independent per-sample masks as a (batch, rows, cols) bool array."""
    return np.stack(
        [
            make_mask(pattern, grid, ratio, mask_stream(seed, step, i)).as_grid()
            for i in range(batch_size)
        ]
    )


@dataclass
class ScheduleState:
    strategy: str = "cka"
    pi0: float = 1.0
    epoch: int = 0
    last_valid_ratio: float = INITIAL_DYNAMIC_RATIO
    linear_decrement: float = LINEAR_DECREMENT
    ema: float = 0.0

    def __post_init__(self):
        if self.strategy not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.strategy!r}; expected one of {SCHEDULES}")
        check_ratio(self.pi0)
        check_ratio(self.last_valid_ratio)
        if not 0.0 <= self.ema < 1.0:
            raise ValueError(f"ema must lie in [0, 1), got {self.ema}")

    @classmethod
    def initial(cls, strategy: str, pi0: float, **kwargs) -> "ScheduleState":
        start = INITIAL_DYNAMIC_RATIO if strategy in ("cka", "cosine") else pi0
        return cls(strategy=strategy, pi0=pi0, last_valid_ratio=start, **kwargs)


def schedule_ratio(state: ScheduleState, similarity: float | None = None) -> float:
    """Mask ratio for the current step; updates ``state.last_valid_ratio``.

    ``similarity`` is required for the ``cka`` and ``cosine`` strategies; if
    it is missing or non-finite the previous ratio is reused.
    """
    s = state.strategy
    if s == "fixed":
        ratio = state.pi0
    elif s == "exponential":
        ratio = state.pi0 * EXP_DECAY**state.epoch
    elif s == "linear":
        ratio = state.pi0 - state.epoch * state.linear_decrement
    else:
        if similarity is None or not math.isfinite(similarity):
            logger.debug("no similarity estimate for %s schedule; reusing %.4f", s, state.last_valid_ratio)
            return state.last_valid_ratio
        ratio = dynamic_ratio(similarity)
        if state.ema > 0.0:
            ratio = state.ema * state.last_valid_ratio + (1.0 - state.ema) * ratio

    ratio = min(1.0, max(0.0, ratio))
    state.last_valid_ratio = ratio
    return ratio
