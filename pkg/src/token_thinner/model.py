"""The full classifier: embeddings, learnable combination tokens, pruned
attention blocks up to the placement layer, one combining module in place of
that layer's block, plain blocks on the combined tokens after it, and a
mean-pooled classification head.

Checkpoints are a small versioned binary container; the exact layout is
documented in `save`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attention import (
    AttentionBlockWeights,
    TokenSet,
    block_forward,
    preserved_count,
    select_tokens,
)
from .combiner import CombinerWeights, combining_module, sample_gumbel
from .exceptions import ConfigError, DataError, FormatError, VocabularyError
from .tensor import Tensor

# placement sentinel: replace the second-to-last layer
AUTO_PLACEMENT = -1

INIT_STD = 0.02

_CHECKPOINT_MAGIC = b"TTCKPT1\n"
_CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Hyperparameters and switches for one model.

    `placement` selects the layer whose attention block is replaced by the
    combining module: a 1-based layer index, AUTO_PLACEMENT (-1) for the
    second-to-last layer, or None to disable combining entirely (no
    combination tokens are appended in that case). `preserve_ratio` set to
    1.0 disables pruning; together with placement None the model reduces to
    a vanilla dense encoder.
    """

    vocab_size: int
    n_classes: int
    n_layers: int = 4
    d: int = 64
    h: int = 4
    max_seq: int = 128
    n_combo: int = 8
    preserve_ratio: float = 0.9
    placement: int | None = AUTO_PLACEMENT
    alpha_importance: float = 0.01
    alpha_unimportance: float = 0.9
    pad_id: int = 0
    dropout: float = 0.0
    gumbel: bool = True
    gumbel_per_pair: bool = False
    hard_assignment: bool = True
    attention_residual: bool = True
    use_fuzzy: bool = True
    combiner_bias: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.placement == AUTO_PLACEMENT:
            self.placement = max(self.n_layers - 1, 1)
        self.validate()

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be at least 2, got {self.vocab_size}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be at least 2, got {self.n_classes}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be at least 1, got {self.n_layers}")
        if self.d < 1 or self.h < 1 or self.d % self.h != 0:
            raise ConfigError(f"d must be a positive multiple of h, got d={self.d} h={self.h}")
        if self.max_seq < 1:
            raise ConfigError(f"max_seq must be at least 1, got {self.max_seq}")
        if self.n_combo < 1:
            raise ConfigError(f"n_combo must be at least 1, got {self.n_combo}")
        if not 0.0 < self.preserve_ratio <= 1.0:
            raise ConfigError(f"preserve_ratio must lie in (0, 1], got {self.preserve_ratio}")
        if self.placement is not None and not 1 <= self.placement <= self.n_layers:
            raise ConfigError(
                f"placement must lie in [1, {self.n_layers}] or be None, got {self.placement}"
            )
        for name in ("alpha_importance", "alpha_unimportance"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {value}")
        if not 0 <= self.pad_id < self.vocab_size:
            raise ConfigError(f"pad_id must be a valid token id, got {self.pad_id}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal draws redrawn until they land within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class Model:
    """A built classifier; construct with `Model.build`."""

    def __init__(
        self,
        config: ModelConfig,
        token_table: Tensor,
        position_table: Tensor,
        combo_tokens: Tensor | None,
        blocks: list[AttentionBlockWeights],
        combiner: CombinerWeights | None,
        head_weight: Tensor,
        head_bias: Tensor,
        rng: np.random.Generator,
    ):
        self.config = config
        self.token_table = token_table
        self.position_table = position_table
        self.combo_tokens = combo_tokens
        self.blocks = blocks
        self.combiner = combiner
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.rng = rng
        self.step = 0

    @classmethod
    def build(cls, config: ModelConfig, seed: int | None = None) -> "Model":
        """Initialize all weights from the seed (truncated normal, unit
        layer-norm gains, zero biases)."""
        config.validate()
        rng = np.random.default_rng(config.seed if seed is None else seed)
        d, h = config.d, config.h
        dh = d // h

        def tn(*shape):
            return T.parameter(truncated_normal(rng, shape))

        def zeros(*shape):
            return T.parameter(np.zeros(shape))

        def ones(*shape):
            return T.parameter(np.ones(shape))

        token_table = tn(config.vocab_size, d)
        position_table = tn(config.max_seq, d)
        has_combiner = config.placement is not None
        combo_tokens = tn(config.n_combo, d) if has_combiner else None

        blocks = []
        for _ in range(config.n_layers):
            blocks.append(
                AttentionBlockWeights(
                    query_projs=[tn(d, dh) for _ in range(h)],
                    query_biases=[zeros(1, dh) for _ in range(h)],
                    key_projs=[tn(d, dh) for _ in range(h)],
                    key_biases=[zeros(1, dh) for _ in range(h)],
                    value_projs=[tn(d, dh) for _ in range(h)],
                    value_biases=[zeros(1, dh) for _ in range(h)],
                    out_proj=tn(d, d),
                    out_bias=zeros(1, d),
                    ff_in=tn(d, 4 * d),
                    ff_in_bias=zeros(1, 4 * d),
                    ff_out=tn(4 * d, d),
                    ff_out_bias=zeros(1, d),
                    attn_norm_gain=ones(1, d),
                    attn_norm_bias=zeros(1, d),
                    ff_norm_gain=ones(1, d),
                    ff_norm_bias=zeros(1, d),
                )
            )

        combiner = None
        if has_combiner:
            combiner = CombinerWeights(
                query_proj=tn(d, d),
                key_proj=tn(d, d),
                value_proj=tn(d, d),
                out_proj=tn(d, d),
                combo_norm_gain=ones(1, d),
                combo_norm_bias=zeros(1, d),
                embedded_norm_gain=ones(1, d),
                embedded_norm_bias=zeros(1, d),
                query_bias=zeros(1, d) if config.combiner_bias else None,
                key_bias=zeros(1, d) if config.combiner_bias else None,
                value_bias=zeros(1, d) if config.combiner_bias else None,
                out_bias=zeros(1, d) if config.combiner_bias else None,
            )

        head_weight = tn(d, config.n_classes)
        head_bias = zeros(1, config.n_classes)
        return cls(
            config,
            token_table,
            position_table,
            combo_tokens,
            blocks,
            combiner,
            head_weight,
            head_bias,
            rng,
        )

    def parameters(self) -> dict[str, Tensor]:
        """Stable name -> tensor map covering every trainable weight."""
        params: dict[str, Tensor] = {
            "embed.token": self.token_table,
            "embed.position": self.position_table,
        }
        if self.combo_tokens is not None:
            params["combo.tokens"] = self.combo_tokens
        for i, blk in enumerate(self.blocks):
            prefix = f"layers.{i}"
            for hh in range(self.config.h):
                params[f"{prefix}.query.{hh}"] = blk.query_projs[hh]
                params[f"{prefix}.query_bias.{hh}"] = blk.query_biases[hh]
                params[f"{prefix}.key.{hh}"] = blk.key_projs[hh]
                params[f"{prefix}.key_bias.{hh}"] = blk.key_biases[hh]
                params[f"{prefix}.value.{hh}"] = blk.value_projs[hh]
                params[f"{prefix}.value_bias.{hh}"] = blk.value_biases[hh]
            params[f"{prefix}.out"] = blk.out_proj
            params[f"{prefix}.out_bias"] = blk.out_bias
            params[f"{prefix}.ff_in"] = blk.ff_in
            params[f"{prefix}.ff_in_bias"] = blk.ff_in_bias
            params[f"{prefix}.ff_out"] = blk.ff_out
            params[f"{prefix}.ff_out_bias"] = blk.ff_out_bias
            params[f"{prefix}.attn_norm_gain"] = blk.attn_norm_gain
            params[f"{prefix}.attn_norm_bias"] = blk.attn_norm_bias
            params[f"{prefix}.ff_norm_gain"] = blk.ff_norm_gain
            params[f"{prefix}.ff_norm_bias"] = blk.ff_norm_bias
        if self.combiner is not None:
            c = self.combiner
            params["combiner.query"] = c.query_proj
            params["combiner.key"] = c.key_proj
            params["combiner.value"] = c.value_proj
            params["combiner.out"] = c.out_proj
            params["combiner.combo_norm_gain"] = c.combo_norm_gain
            params["combiner.combo_norm_bias"] = c.combo_norm_bias
            params["combiner.embedded_norm_gain"] = c.embedded_norm_gain
            params["combiner.embedded_norm_bias"] = c.embedded_norm_bias
            for name, t in (
                ("combiner.query_bias", c.query_bias),
                ("combiner.key_bias", c.key_bias),
                ("combiner.value_bias", c.value_bias),
                ("combiner.out_bias", c.out_bias),
            ):
                if t is not None:
                    params[name] = t
        params["head.weight"] = self.head_weight
        params["head.bias"] = self.head_bias
        return params

    def _prepare_ids(self, token_ids: Sequence[int]) -> list[int]:
        ids = [int(t) for t in token_ids]
        if len(ids) > self.config.max_seq:
            ids = ids[: self.config.max_seq]
        if not ids:
            raise DataError("cannot run an empty token sequence")
        for t in ids:
            if not 0 <= t < self.config.vocab_size:
                raise VocabularyError(
                    f"token id {t} outside vocabulary of size {self.config.vocab_size}"
                )
        return ids

    def encode(
        self, token_ids: Sequence[int], train_mode: bool = False
    ) -> tuple[Tensor, list[int] | None, list[int]]:
        """Run the encoder stack.

        Returns the final token states, the rows to pool for classification
        (None means pool every row), and the per-layer trace of key/value
        token counts (embedded tokens up to the placement layer, combination
        tokens after it).
        """
        cfg = self.config
        ids = self._prepare_ids(token_ids)
        seq_len = len(ids)
        non_pad = tuple(i for i, t in enumerate(ids) if t != cfg.pad_id)
        if not non_pad:
            raise DataError("token sequence contains only padding")

        x = T.add(T.take_rows(self.token_table, ids), T.take_rows(self.position_table, range(seq_len)))
        has_combiner = cfg.placement is not None
        m = cfg.n_combo if has_combiner else 0
        if has_combiner:
            x = T.concat_rows([x, self.combo_tokens])

        kept = TokenSet(non_pad, m, layer=1)
        score_rows: list[int] | None = list(non_pad) + list(range(seq_len, seq_len + m))
        rng = self.rng if train_mode else None
        drop = cfg.dropout if train_mode else 0.0
        combined = False
        trace: list[int] = []

        for layer in range(1, cfg.n_layers + 1):
            if has_combiner and layer == cfg.placement:
                embedded = T.gather_rows(x, kept.embedded_indices)
                combo = T.gather_rows(x, range(seq_len, seq_len + m))
                noise = None
                if train_mode and cfg.gumbel:
                    noise = sample_gumbel(
                        self.rng, m, kept.embedded_count, per_pair=cfg.gumbel_per_pair
                    )
                trace.append(kept.embedded_count)
                x = combining_module(
                    embedded, combo, self.combiner, noise, hard=cfg.hard_assignment
                )
                combined = True
                kept = TokenSet((), m, layer=layer + 1)
                score_rows = None
                continue
            x, profile = block_forward(
                x,
                self.blocks[layer - 1],
                kept,
                attention_residual=cfg.attention_residual,
                alpha_importance=cfg.alpha_importance,
                alpha_unimportance=cfg.alpha_unimportance,
                fuzzy=cfg.use_fuzzy,
                score_query_rows=score_rows,
                dropout_rate=drop,
                rng=rng,
            )
            trace.append(kept.embedded_count if not combined else m)
            prunes_next = (not combined) and layer < cfg.n_layers and profile is not None
            if prunes_next:
                t_next = preserved_count(kept.embedded_count, cfg.preserve_ratio)
                kept = select_tokens(list(profile.scores), profile, t_next, kept)

        pool_rows = None if combined else list(non_pad)
        return x, pool_rows, trace

    def forward(self, token_ids: Sequence[int], train_mode: bool = False) -> Tensor:
        """Class logits for one token sequence, shape (1, n_classes)."""
        logits, _ = self.forward_with_trace(token_ids, train_mode)
        return logits

    def forward_with_trace(
        self, token_ids: Sequence[int], train_mode: bool = False
    ) -> tuple[Tensor, list[int]]:
        states, pool_rows, trace = self.encode(token_ids, train_mode)
        pooled = T.mean_rows(states if pool_rows is None else T.gather_rows(states, pool_rows))
        return T.linear(pooled, self.head_weight, self.head_bias), trace

    def predict(self, token_ids: Sequence[int]) -> int:
        return int(np.argmax(self.forward(token_ids).data[0]))


def save(model: Model, path) -> None:
    """Write a checkpoint.

    Layout: the magic bytes b"TTCKPT1\\n"; an 8-byte little-endian unsigned
    header length; a UTF-8 JSON header with the format version, the config,
    the training step counter, the generator state, and an ordered weight
    manifest of (name, shape); then each weight's raw little-endian float64
    bytes, concatenated in manifest order.
    """
    params = model.parameters()
    manifest = [{"name": name, "shape": list(t.data.shape)} for name, t in params.items()]
    header = {
        "format_version": _CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "step": model.step,
        "rng_state": model.rng.bit_generator.state,
        "weights": manifest,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load(path) -> Model:
    """Read a checkpoint written by `save`; any mismatch in magic, version,
    manifest, or payload size fails without producing a partial model."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise FormatError(f"not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}") from exc
        version = header.get("format_version")
        if version != _CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version!r}")
        config = ModelConfig(**header["config"])
        model = Model.build(config)
        params = model.parameters()
        manifest = header["weights"]
        if [m["name"] for m in manifest] != list(params.keys()):
            raise FormatError("checkpoint weight manifest does not match the model")
        for entry in manifest:
            tensor = params[entry["name"]]
            shape = tuple(entry["shape"])
            if shape != tensor.data.shape:
                raise FormatError(
                    f"weight {entry['name']} has shape {shape}, expected {tensor.data.shape}"
                )
            n_bytes = int(np.prod(shape)) * 8
            raw = fh.read(n_bytes)
            if len(raw) != n_bytes:
                raise FormatError(f"checkpoint truncated while reading {entry['name']}")
            tensor.data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise FormatError("checkpoint has trailing bytes")
    model.rng.bit_generator.state = header["rng_state"]
    model.step = int(header["step"])
    return model
