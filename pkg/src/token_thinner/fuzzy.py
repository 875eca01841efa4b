"""Quantile-anchored fuzzy memberships over token importance scores.

Scores are graded against the 0.25/0.75 quantiles of the pooled score
distribution. A token is *protected* from pruning when it is importance-like
at a very permissive cut and not unimportance-like at a strict one; every
other token is a pruning candidate. With a flat score distribution the rule
collapses to "protect everything", so total uncertainty disables pruning
instead of pruning arbitrarily.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ParameterError

# Permissive cut for the importance set; strict cut for the unimportance set.
DEFAULT_ALPHA_IMPORTANCE = 0.01
DEFAULT_ALPHA_UNIMPORTANCE = 0.9

# Quantile rule: linear interpolation between adjacent order statistics.
_QUANTILE_METHOD = "linear"


def quantile_anchors(scores: Sequence[float]) -> tuple[float, float]:
    """Return the (0.25, 0.75) quantiles of the scores under linear
    interpolation."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ParameterError("quantile anchors need a non-empty score list")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("quantile anchors need finite scores")
    low = float(np.quantile(arr, 0.25, method=_QUANTILE_METHOD))
    high = float(np.quantile(arr, 0.75, method=_QUANTILE_METHOD))
    return low, high


def importance_membership(score: float, anchor_low: float, anchor_high: float) -> float:
    """Piecewise-linear grade of importance in [0, 1].

    0 at or below the low anchor, 1 at or above the high anchor, linear ramp
    between. The high branch is checked first so coincident anchors grade a
    tied score as fully important (the no-prune degenerate rule).
    """
    if anchor_low > anchor_high:
        raise ParameterError(f"anchors out of order: {anchor_low} > {anchor_high}")
    if score >= anchor_high:
        return 1.0
    if score <= anchor_low:
        return 0.0
    return (score - anchor_low) / (anchor_high - anchor_low)


def unimportance_membership(score: float, anchor_low: float, anchor_high: float) -> float:
    """Exact complement of the importance grade.

    (high - s)/(high - low) on the ramp equals 1 - (s - low)/(high - low)
    algebraically; computing it as the complement makes the pair sum to 1
    exactly in floating point as well.
    """
    return 1.0 - importance_membership(score, anchor_low, anchor_high)


def alpha_cut(memberships: Sequence[float], alpha: float) -> frozenset[int]:
    """Indices whose membership value is at least alpha."""
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    arr = np.asarray(memberships, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ParameterError("memberships must lie in [0, 1]")
    return frozenset(int(i) for i in np.flatnonzero(arr >= alpha))


def partition(
    scores: Sequence[float],
    alpha_importance: float = DEFAULT_ALPHA_IMPORTANCE,
    alpha_unimportance: float = DEFAULT_ALPHA_UNIMPORTANCE,
) -> tuple[frozenset[int], frozenset[int]]:
    """Split score positions into (protected, candidates).

    protected = importance-cut minus unimportance-cut; candidates is its
    complement. Only candidates may be pruned by ratio-based selection.
    """
    arr = np.asarray(scores, dtype=np.float64)
    anchor_low, anchor_high = quantile_anchors(arr)
    importance = [importance_membership(s, anchor_low, anchor_high) for s in arr]
    unimportance = [unimportance_membership(s, anchor_low, anchor_high) for s in arr]
    important = alpha_cut(importance, alpha_importance)
    unimportant = alpha_cut(unimportance, alpha_unimportance)
    protected = important - unimportant
    candidates = frozenset(range(arr.size)) - protected
    return frozenset(protected), candidates


@dataclass(frozen=True)
class ImportanceProfile:
    """Per-layer importance scores and their fuzzy partition.

    Positions index the embedded tokens that are currently retained as
    attention keys, in their original sequence order; combination tokens are
    never scored and never appear in either set.
    """

    positions: tuple[int, ...]
    scores: tuple[float, ...]
    anchor_low: float
    anchor_high: float
    importance: tuple[float, ...]
    unimportance: tuple[float, ...]
    protected: frozenset[int] = field(default_factory=frozenset)
    candidates: frozenset[int] = field(default_factory=frozenset)

    def score_of(self, position: int) -> float:
        return self.scores[self.positions.index(position)]


def build_importance_profile(
    positions: Sequence[int],
    scores: Sequence[float],
    alpha_importance: float = DEFAULT_ALPHA_IMPORTANCE,
    alpha_unimportance: float = DEFAULT_ALPHA_UNIMPORTANCE,
    fuzzy: bool = True,
) -> ImportanceProfile:
    """Profile the given (position, score) pairs.

    With `fuzzy` disabled the memberships are still reported but the
    protected set is empty, which reduces selection to plain top-k pruning.
    """
    pos = tuple(int(p) for p in positions)
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size != len(pos):
        raise ParameterError(f"{len(pos)} positions but {arr.size} scores")
    anchor_low, anchor_high = quantile_anchors(arr)
    importance = tuple(importance_membership(s, anchor_low, anchor_high) for s in arr)
    unimportance = tuple(unimportance_membership(s, anchor_low, anchor_high) for s in arr)
    if fuzzy:
        local_protected, local_candidates = partition(arr, alpha_importance, alpha_unimportance)
    else:
        local_protected = frozenset()
        local_candidates = frozenset(range(arr.size))
    return ImportanceProfile(
        positions=pos,
        scores=tuple(float(s) for s in arr),
        anchor_low=anchor_low,
        anchor_high=anchor_high,
        importance=importance,
        unimportance=unimportance,
        protected=frozenset(pos[i] for i in local_protected),
        candidates=frozenset(pos[i] for i in local_candidates),
    )
