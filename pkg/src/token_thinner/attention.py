"""Multi-head self-attention with a shrinking key/value token set.

Queries always cover every row of the residual stream; only the key/value
side is restricted, by gathering a kept subset of embedded-token rows plus
the always-kept combination-token rows. Each layer also reports an
importance profile (column means of its attention probabilities, averaged
over heads, with a fuzzy protected/candidate split) that the *next* layer
uses to shrink its kept set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .exceptions import DimensionError, ParameterError, TokenIndexError
from .fuzzy import (
    DEFAULT_ALPHA_IMPORTANCE,
    DEFAULT_ALPHA_UNIMPORTANCE,
    ImportanceProfile,
    build_importance_profile,
)
from .tensor import Tensor

# Guard against float products like 460 * 0.9 landing one ulp under the
# exact integer they represent.
_FLOOR_EPS = 1e-9

LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class TokenSet:
    """Embedded-token rows retained as attention keys/values for one layer.

    `embedded_indices` are positions into the residual stream (equal to the
    original sequence positions, since query rows are never removed) and
    must be sorted. The `combo_count` combination-token rows at the end of
    the stream are always retained and are exempt from pruning.
    """

    embedded_indices: tuple[int, ...]
    combo_count: int
    layer: int = 1

    def __post_init__(self):
        idx = self.embedded_indices
        if any(idx[i] >= idx[i + 1] for i in range(len(idx) - 1)):
            raise TokenIndexError(f"embedded indices must be strictly increasing, got {idx}")
        if idx and idx[0] < 0:
            raise TokenIndexError(f"negative embedded index in {idx}")
        if self.combo_count < 0:
            raise ParameterError(f"combo_count must be non-negative, got {self.combo_count}")

    @property
    def embedded_count(self) -> int:
        return len(self.embedded_indices)

    def all_indices(self, total_rows: int) -> list[int]:
        """Kept rows in stream order: embedded subset then combination rows."""
        first_combo = total_rows - self.combo_count
        if self.embedded_indices and self.embedded_indices[-1] >= first_combo:
            raise TokenIndexError(
                f"embedded index {self.embedded_indices[-1]} overlaps the "
                f"{self.combo_count} combination rows of a {total_rows}-row stream"
            )
        return list(self.embedded_indices) + list(range(first_combo, total_rows))


@dataclass
class AttentionBlockWeights:
    """Parameters of one encoder block: per-head QKV projections, output
    projection, two-layer feed-forward, and two layer-norm pairs."""

    query_projs: list[Tensor]
    query_biases: list[Tensor]
    key_projs: list[Tensor]
    key_biases: list[Tensor]
    value_projs: list[Tensor]
    value_biases: list[Tensor]
    out_proj: Tensor
    out_bias: Tensor
    ff_in: Tensor
    ff_in_bias: Tensor
    ff_out: Tensor
    ff_out_bias: Tensor
    attn_norm_gain: Tensor
    attn_norm_bias: Tensor
    ff_norm_gain: Tensor
    ff_norm_bias: Tensor

    @property
    def n_heads(self) -> int:
        return len(self.query_projs)

    @property
    def head_width(self) -> int:
        return self.query_projs[0].shape[1]


def attention_probs(q: Tensor, k: Tensor, d: int) -> Tensor:
    """Row-stochastic attention: softmax(q k^T / sqrt(d))."""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(
            f"query width {q.shape} does not match key width {k.shape}"
        )
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    return T.softmax_rows(logits)


def importance_scores(
    probs_per_head: Sequence[Tensor | np.ndarray],
    embedded_cols: int | None = None,
    query_rows: Sequence[int] | None = None,
) -> np.ndarray:
    """Mean attention mass received by each embedded key column.

    Column means are taken over the chosen query rows and averaged across
    heads. Columns at and beyond `embedded_cols` (the combination tokens)
    are excluded from scoring. The result drives token selection only, so
    it is plain numpy, outside the gradient tape.
    """
    if len(probs_per_head) == 0:
        raise ParameterError("importance scores need at least one head")
    mats = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in probs_per_head]
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise DimensionError(f"per-head probability shapes differ: {[m.shape for m in mats]}")
    if embedded_cols is None:
        embedded_cols = shape[1]
    if not 0 <= embedded_cols <= shape[1]:
        raise ParameterError(f"embedded_cols {embedded_cols} out of range for {shape[1]} columns")
    rows = np.arange(shape[0]) if query_rows is None else np.asarray(query_rows, dtype=np.intp)
    if rows.size == 0:
        raise ParameterError("importance scores need at least one query row")
    per_head = [m[rows, :embedded_cols].mean(axis=0) for m in mats]
    return np.mean(per_head, axis=0)


def preserved_count(t: int, p: float) -> int:
    """Tokens retained after one pruning step: floor(t * p), at least 1."""
    if t < 1:
        raise ParameterError(f"token count must be at least 1, got {t}")
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"preservation ratio must lie in (0, 1], got {p}")
    return max(int(math.floor(t * p + _FLOOR_EPS)), 1)


def select_tokens(
    scores: Sequence[float],
    profile: ImportanceProfile,
    t_next: int,
    current: TokenSet,
) -> TokenSet:
    """Choose the kept set for the next layer.

    All protected positions are retained unconditionally (they may exceed
    the budget); the remaining budget is filled with the highest-scoring
    candidates, ties resolved toward lower sequence positions.
    """
    positions = current.embedded_indices
    if len(scores) != len(positions):
        raise ParameterError(
            f"{len(scores)} scores for {len(positions)} retained tokens"
        )
    if t_next > len(positions):
        raise ParameterError(
            f"cannot keep {t_next} of {len(positions)} tokens"
        )
    score_at = dict(zip(positions, scores))
    protected = [pos for pos in positions if pos in profile.protected]
    budget = t_next - len(protected)
    chosen = list(protected)
    if budget > 0:
        candidates = [pos for pos in positions if pos not in profile.protected]
        candidates.sort(key=lambda pos: (-score_at[pos], pos))
        chosen.extend(candidates[:budget])
    return TokenSet(tuple(sorted(chosen)), current.combo_count, current.layer + 1)


def pruned_attention(
    x: Tensor,
    weights: AttentionBlockWeights,
    kept: TokenSet,
    *,
    alpha_importance: float = DEFAULT_ALPHA_IMPORTANCE,
    alpha_unimportance: float = DEFAULT_ALPHA_UNIMPORTANCE,
    fuzzy: bool = True,
    score_query_rows: Sequence[int] | None = None,
) -> tuple[Tensor, ImportanceProfile | None]:
    """Multi-head attention over a restricted key/value set.

    Every row of `x` is a query; keys and values are projected from the
    gathered kept rows only, so the projection and score matmuls shrink with
    the kept set. Returns the attended output (same shape as `x`) and the
    importance profile for the next layer's selection, or None when no
    embedded tokens remain to score.
    """
    total_rows = x.shape[0]
    kv_rows = kept.all_indices(total_rows)
    kv_src = T.gather_rows(x, kv_rows)
    n_embedded = kept.embedded_count

    head_outputs = []
    probs_per_head = []
    for h in range(weights.n_heads):
        q = T.linear(x, weights.query_projs[h], weights.query_biases[h])
        k = T.linear(kv_src, weights.key_projs[h], weights.key_biases[h])
        v = T.linear(kv_src, weights.value_projs[h], weights.value_biases[h])
        probs = attention_probs(q, k, weights.head_width)
        probs_per_head.append(probs)
        head_outputs.append(T.matmul(probs, v))
    context = T.concat_cols(head_outputs) if len(head_outputs) > 1 else head_outputs[0]
    out = T.linear(context, weights.out_proj, weights.out_bias)

    profile = None
    if n_embedded > 0:
        scores = importance_scores(probs_per_head, n_embedded, score_query_rows)
        profile = build_importance_profile(
            kept.embedded_indices,
            scores,
            alpha_importance,
            alpha_unimportance,
            fuzzy=fuzzy,
        )
    return out, profile


def block_forward(
    x: Tensor,
    weights: AttentionBlockWeights,
    kept: TokenSet,
    *,
    attention_residual: bool = True,
    alpha_importance: float = DEFAULT_ALPHA_IMPORTANCE,
    alpha_unimportance: float = DEFAULT_ALPHA_UNIMPORTANCE,
    fuzzy: bool = True,
    score_query_rows: Sequence[int] | None = None,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, ImportanceProfile | None]:
    """One encoder block: pruned attention, then feed-forward with residual
    and layer norm.

    `attention_residual` keeps the conventional residual + norm around the
    attention sublayer; switched off, the attention output feeds the
    feed-forward sublayer directly and only the feed-forward residual/norm
    remains.
    """
    attn_out, profile = pruned_attention(
        x,
        weights,
        kept,
        alpha_importance=alpha_importance,
        alpha_unimportance=alpha_unimportance,
        fuzzy=fuzzy,
        score_query_rows=score_query_rows,
    )
    dropping = dropout_rate > 0.0 and rng is not None
    if dropping:
        attn_out = T.dropout(attn_out, dropout_rate, rng)
    if attention_residual:
        u = T.layer_norm(
            T.add(attn_out, x), weights.attn_norm_gain, weights.attn_norm_bias, LAYER_NORM_EPS
        )
    else:
        u = attn_out
    hidden = T.gelu(T.linear(u, weights.ff_in, weights.ff_in_bias))
    ff = T.linear(hidden, weights.ff_out, weights.ff_out_bias)
    if dropping:
        ff = T.dropout(ff, dropout_rate, rng)
    y = T.layer_norm(T.add(ff, u), weights.ff_norm_gain, weights.ff_norm_bias, LAYER_NORM_EPS)
    return y, profile
