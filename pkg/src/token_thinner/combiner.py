"""Token combining: absorb the embedded tokens into a small set of learned
combination tokens.

Each embedded token is softly scored against every combination token
(optionally with Gumbel noise on the logits), then hard-assigned to its
best match by a column-wise one-hot with straight-through gradients. Each
combination token is updated with the projected mean of the value vectors
assigned to it; a combination token that attracts nothing keeps its input
value unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import LAYER_NORM_EPS
from .exceptions import DimensionError, ParameterError
from .tensor import Tensor


@dataclass
class CombinerWeights:
    """Square projections for similarity (query/key), merge (value/output),
    and one layer-norm pair per input stream. Biases are optional and off by
    default."""

    query_proj: Tensor
    key_proj: Tensor
    value_proj: Tensor
    out_proj: Tensor
    combo_norm_gain: Tensor
    combo_norm_bias: Tensor
    embedded_norm_gain: Tensor
    embedded_norm_bias: Tensor
    query_bias: Tensor | None = None
    key_bias: Tensor | None = None
    value_bias: Tensor | None = None
    out_bias: Tensor | None = None


@dataclass(frozen=True)
class AssignmentMatrix:
    """Soft and hard assignment of embedded tokens to combination tokens.

    Every column of `sim` is a probability distribution over the
    combination tokens; every column of `hard` is one-hot in the forward
    sense, with gradients that flow as if it were `sim`.
    """

    sim: Tensor
    hard: Tensor


def sample_gumbel(
    rng: np.random.Generator,
    n_combo: int,
    n_embedded: int | None = None,
    per_pair: bool = False,
) -> np.ndarray:
    """Draw Gumbel(0, 1) logit noise.

    By default one draw per combination token, shared across embedded
    tokens; `per_pair` switches to an independent draw per matrix entry.
    """
    if per_pair:
        if n_embedded is None:
            raise ParameterError("per-pair noise needs the embedded token count")
        return rng.gumbel(size=(n_combo, n_embedded))
    return rng.gumbel(size=(n_combo, 1))


def similarity(
    combo: Tensor,
    embedded: Tensor,
    weights: CombinerWeights,
    gumbel_noise: np.ndarray | None = None,
) -> Tensor:
    """Column-stochastic similarity between combination and embedded tokens.

    Both inputs are layer-normed and projected; logits are plain dot
    products plus optional Gumbel noise; each embedded token's column is
    softmaxed over the combination tokens.
    """
    if combo.shape[0] == 0:
        raise ParameterError("similarity needs at least one combination token")
    if embedded.shape[0] == 0:
        raise ParameterError("similarity needs at least one embedded token")
    combo_q = T.linear(
        T.layer_norm(combo, weights.combo_norm_gain, weights.combo_norm_bias, LAYER_NORM_EPS),
        weights.query_proj,
        weights.query_bias,
    )
    embedded_k = T.linear(
        T.layer_norm(embedded, weights.embedded_norm_gain, weights.embedded_norm_bias, LAYER_NORM_EPS),
        weights.key_proj,
        weights.key_bias,
    )
    logits = T.matmul(combo_q, T.transpose(embedded_k))
    if gumbel_noise is not None:
        noise = np.asarray(gumbel_noise, dtype=np.float64)
        if noise.shape not in ((logits.shape[0], 1), logits.shape):
            raise DimensionError(
                f"noise shape {noise.shape} incompatible with logits {logits.shape}"
            )
        logits = T.add(logits, T.constant(noise))
    return T.transpose(T.softmax_rows(T.transpose(logits)))


def hard_assign(sim: Tensor) -> AssignmentMatrix:
    """One-hot each column at its argmax row, straight-through gradient.

    Ties go to the lowest combination-token index.
    """
    return AssignmentMatrix(sim=sim, hard=T.hard_assign_columns(sim))


def combine(
    assignment: AssignmentMatrix,
    embedded: Tensor,
    combo: Tensor,
    weights: CombinerWeights,
) -> Tensor:
    """Residual update of each combination token with the output-projected
    mean of its assigned value vectors.

    The assignment count is clamped at one before dividing, so a
    combination token with no assignees receives a zero update and passes
    through unchanged.
    """
    return _merge(assignment.hard, embedded, combo, weights)


def _merge(matrix: Tensor, embedded: Tensor, combo: Tensor, weights: CombinerWeights) -> Tensor:
    values = T.linear(embedded, weights.value_proj, weights.value_bias)
    merged = T.matmul(matrix, values)
    counts = T.sum_rows(matrix)
    update = T.div(merged, T.clamp_min(counts, 1.0))
    projected = T.linear(update, weights.out_proj, weights.out_bias)
    # rows with no assignees must stay residual-only even when a projection
    # bias is enabled
    occupied = T.constant((counts.data > 0.0).astype(np.float64))
    return T.add(combo, T.mul(projected, occupied))


def combining_module(
    x_embedded: Tensor,
    x_combo: Tensor,
    weights: CombinerWeights,
    gumbel_noise: np.ndarray | None = None,
    hard: bool = True,
) -> Tensor:
    """Replace the embedded tokens with updated combination tokens.

    Output has exactly as many rows as there are combination tokens; the
    embedded tokens are not forwarded past this point. `hard=False` keeps
    the soft assignment weights in the merge instead of the one-hot; the
    soft path has a true gradient everywhere, which the straight-through
    estimator of the hard path borrows.
    """
    sim = similarity(x_combo, x_embedded, weights, gumbel_noise)
    if hard:
        return combine(hard_assign(sim), x_embedded, x_combo, weights)
    return _merge(sim, x_embedded, x_combo, weights)
