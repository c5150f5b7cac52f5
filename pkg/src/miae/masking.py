"""Visible/masked residue selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from miae.errors import InvalidMaskError

SPAN_LENGTH = 5
STRATEGIES = ("random", "span")


@dataclass(frozen=True)
class MaskPlan:
    n: int
    visible: np.ndarray
    masked: np.ndarray
    ratio: float
    strategy: str
    seed: int
    spans: tuple = ()

    @property
    def mask(self) -> np.ndarray:
        """Boolean array of length ``n``, True where masked."""
        m = np.zeros(self.n, dtype=bool)
        m[self.masked] = True
        return m


def visible_count(n: int, ratio: float) -> int:
    # round half up, never fewer than one visible residue
    return max(1, int(np.floor((1.0 - ratio) * n + 0.5)))


def _span_masks(n, n_mask, rng):
    masked = np.zeros(n, dtype=bool)
    spans = []
    n_spans = n_mask // SPAN_LENGTH
    for _ in range(n_spans):
        # start positions whose whole run is still unmasked
        free = ~masked
        window = np.convolve(free.astype(int), np.ones(SPAN_LENGTH, dtype=int), mode="valid")
        starts = np.nonzero(window == SPAN_LENGTH)[0]
        if starts.size == 0:
            break
        s = rng.choice(starts)
        masked[s:s + SPAN_LENGTH] = True
        spans.append(int(s))
    remaining = n_mask - int(masked.sum())
    if remaining > 0:
        extra = rng.choice(np.nonzero(~masked)[0], size=remaining, replace=False)
        masked[extra] = True
    return masked, tuple(sorted(spans))


def sample_mask(n: int, ratio: float, strategy: str = "random", seed: int = 0) -> MaskPlan:
    """Draw a reproducible mask plan.

    ``random`` masks indices uniformly without replacement. ``span`` places
    non-overlapping runs of five and tops up with uniform single indices.
    """
    if n < 1:
        raise InvalidMaskError(f"need at least one residue, got n={n}")
    if not 0.0 <= ratio < 1.0:
        raise InvalidMaskError(f"masking ratio must lie in [0, 1), got {ratio}")
    if strategy not in STRATEGIES:
        raise InvalidMaskError(f"unknown masking strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    n_mask = n - visible_count(n, ratio)
    spans = ()
    if strategy == "random":
        masked = np.zeros(n, dtype=bool)
        masked[rng.permutation(n)[:n_mask]] = True
    else:
        masked, spans = _span_masks(n, n_mask, rng)
    return MaskPlan(
        n=n,
        visible=np.nonzero(~masked)[0],
        masked=np.nonzero(masked)[0],
        ratio=float(ratio),
        strategy=strategy,
        seed=int(seed),
        spans=spans,
    )


def full_plan(n: int) -> MaskPlan:
    """Plan with every residue visible."""
    return MaskPlan(n=n, visible=np.arange(n), masked=np.array([], dtype=np.int64),
                    ratio=0.0, strategy="random", seed=0)
