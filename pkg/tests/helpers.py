"""Shared test fixtures: weight factories and independent numpy oracles."""

import itertools
import math

import numpy as np
from scipy.special import erf

from token_thinner import tensor as T
from token_thinner.attention import AttentionBlockWeights


def make_block_weights(rng, d, h, requires_grad=False):
    dh = d // h
    mk = T.parameter if requires_grad else T.constant

    def w(*shape, scale=0.3):
        return mk(rng.normal(scale=scale, size=shape))

    return AttentionBlockWeights(
        query_projs=[w(d, dh) for _ in range(h)],
        query_biases=[w(1, dh, scale=0.05) for _ in range(h)],
        key_projs=[w(d, dh) for _ in range(h)],
        key_biases=[w(1, dh, scale=0.05) for _ in range(h)],
        value_projs=[w(d, dh) for _ in range(h)],
        value_biases=[w(1, dh, scale=0.05) for _ in range(h)],
        out_proj=w(d, d),
        out_bias=w(1, d, scale=0.05),
        ff_in=w(d, 4 * d),
        ff_in_bias=w(1, 4 * d, scale=0.05),
        ff_out=w(4 * d, d),
        ff_out_bias=w(1, d, scale=0.05),
        attn_norm_gain=mk(np.ones((1, d))),
        attn_norm_bias=mk(np.zeros((1, d))),
        ff_norm_gain=mk(np.ones((1, d))),
        ff_norm_bias=mk(np.zeros((1, d))),
    )


def softmax_rows_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def masked_dense_attention(x, weights, kv_rows):
    """Dense attention in which every key/value row outside `kv_rows` gets a
    -inf logit. Independent of the gather-based implementation."""
    n = x.shape[0]
    mask = np.zeros(n, dtype=bool)
    mask[list(kv_rows)] = True
    heads = []
    for h in range(weights.n_heads):
        q = x @ weights.query_projs[h].data + weights.query_biases[h].data
        k = x @ weights.key_projs[h].data + weights.key_biases[h].data
        v = x @ weights.value_projs[h].data + weights.value_biases[h].data
        logits = (q @ k.T) / math.sqrt(weights.head_width)
        logits[:, ~mask] = -np.inf
        heads.append(softmax_rows_np(logits) @ v)
    context = np.concatenate(heads, axis=1)
    return context @ weights.out_proj.data + weights.out_bias.data


def layer_norm_np(x, gain, bias, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    return normed * gain + bias


def gelu_np(x):
    return x * (0.5 * (1.0 + erf(x * (1.0 / math.sqrt(2.0)))))


def dense_encoder_logits(model, ids):
    """Vanilla transformer encoder forward, written directly in numpy and
    mirroring the model's arithmetic op for op. Valid reference for configs
    with pruning disabled and no combining module."""
    cfg = model.config
    d, h = cfg.d, cfg.h
    dh = d // h
    x = model.token_table.data[list(ids)] + model.position_table.data[: len(ids)]
    for blk in model.blocks:
        heads = []
        for i in range(h):
            q = x @ blk.query_projs[i].data + blk.query_biases[i].data
            k = x @ blk.key_projs[i].data + blk.key_biases[i].data
            v = x @ blk.value_projs[i].data + blk.value_biases[i].data
            logits = (q @ k.T) * (1.0 / math.sqrt(dh))
            heads.append(softmax_rows_np(logits) @ v)
        context = np.concatenate(heads, axis=1) if h > 1 else heads[0]
        attn = context @ blk.out_proj.data + blk.out_bias.data
        u = layer_norm_np(attn + x, blk.attn_norm_gain.data, blk.attn_norm_bias.data)
        hidden = gelu_np(u @ blk.ff_in.data + blk.ff_in_bias.data)
        ff = hidden @ blk.ff_out.data + blk.ff_out_bias.data
        x = layer_norm_np(ff + u, blk.ff_norm_gain.data, blk.ff_norm_bias.data)
    pooled = x.mean(axis=0, keepdims=True)
    return pooled @ model.head_weight.data + model.head_bias.data


def pipeline_fd_check(cfg, ids, label, n_coords, coord_seed, weight_seed=99, step=1e-4):
    """Finite-difference spot check of the full pipeline gradient.

    Weights are redrawn at a scale where attention is far from uniform, so
    token selection and hard assignment have margins much wider than the
    probe step and the loss is smooth at every probed point. Returns a list
    of (name, analytic, finite_difference) triples.
    """
    from token_thinner import model as M
    from token_thinner import tensor as T

    def fresh_model(shift_name=None, shift=None):
        model = M.Model.build(cfg)
        wrng = np.random.default_rng(weight_seed)
        for name, t in model.parameters().items():
            t.data = wrng.normal(scale=0.3, size=t.data.shape)
        if shift_name is not None:
            t = model.parameters()[shift_name]
            t.data = t.data + shift
        return model

    def loss_of(model):
        return T.cross_entropy_with_logits(model.forward(ids), int(label))

    model = fresh_model()
    loss_of(model).backward()
    params = model.parameters()
    names = sorted(n for n, t in params.items() if t.grad is not None)
    rng = np.random.default_rng(coord_seed)
    results = []
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        t = params[name]
        flat = int(rng.integers(t.data.size))
        delta = np.zeros(t.data.size)
        delta[flat] = step
        delta = delta.reshape(t.data.shape)
        hi = loss_of(fresh_model(name, delta)).item()
        lo = loss_of(fresh_model(name, -delta)).item()
        fd = (hi - lo) / (2.0 * step)
        results.append((f"{name}[{flat}]", float(t.grad.reshape(-1)[flat]), fd))
    return results


def brute_force_select(scores, protected, t_next, positions):
    """Enumerate every budget-compliant candidate subset and return the
    protected set plus the max-score (lexicographically smallest) fill."""
    score_at = dict(zip(positions, scores))
    kept_protected = [p for p in positions if p in protected]
    budget = t_next - len(kept_protected)
    if budget <= 0:
        return tuple(sorted(kept_protected))
    candidates = [p for p in positions if p not in protected]
    best = None
    for combo in itertools.combinations(sorted(candidates), budget):
        total = sum(score_at[c] for c in combo)
        if best is None or total > best[0] or (total == best[0] and combo < best[1]):
            best = (total, combo)
    return tuple(sorted(kept_protected + list(best[1])))
