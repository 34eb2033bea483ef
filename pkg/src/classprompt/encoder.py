"""Frozen, seeded transformer text encoder with layer-level access.

The encoder stands in for a large pretrained text tower: its weights are
generated once from a seed and never updated. It exposes the pieces the
prompt-tuning pipeline needs individually: the token embedding table,
single-layer forwards (so prompt tokens can be swapped in mid-stack),
a composed forward over a layer range, and the end-of-text readout that
turns final token states into unit-norm class embeddings.

Weight generation is pinned so equal configs give bit-identical encoders:
one SplitMix64 stream seeded with ``weight_seed`` produces, in order,

    token_table [vocab_size x D]            entries N(0, 1) / sqrt(D)
    for each layer 1..L:
        attn_q, attn_k, attn_v, attn_out    [D x D],   / sqrt(D)
        mlp_in                              [D x R*D], / sqrt(D)
        mlp_out                             [R*D x D], / sqrt(R*D)
    readout                                 [D x D_t], / sqrt(D)

filled row-major. Layer-norm gains are fixed at 1 and biases at 0 (not
drawn). Blocks are pre-norm: x + Attn(LN(x)), then + MLP(LN(.)).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConfigError,
    ContractError,
    DegenerateEmbeddingError,
    VocabularyError,
)
from .rng import SplitMix64, derive

_VOCAB_TAG = 0x766F6361  # "voca"

_MIN_READOUT_NORM = 1e-30


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 6
    token_dim: int = 32
    num_heads: int = 4
    mlp_ratio: int = 4
    output_dim: int = 32
    vocab_size: int = 256
    seq_len: int = 8
    weight_seed: int = 7

    def validate(self, path: str = "encoder") -> None:
        for name in ("num_layers", "token_dim", "num_heads", "mlp_ratio",
                     "output_dim", "vocab_size", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{path}.{name} must be positive")
        if self.token_dim % self.num_heads != 0:
            raise ConfigError(
                f"{path}.num_heads={self.num_heads} must divide token_dim={self.token_dim}"
            )
        if not (0 <= self.weight_seed < 2 ** 64):
            raise ConfigError(f"{path}.weight_seed must be an unsigned 64-bit int")


@dataclass(frozen=True)
class ClassVocabulary:
    """Token-id layout for one task: template ids, per-class ids, EOT id."""

    vocab_size: int
    template_token_ids: tuple
    class_token_ids: tuple  # tuple of per-class id tuples, all the same length
    eot_id: int
    class_indices: tuple = field(default=None)  # global class index per entry

    def __post_init__(self):
        if self.class_indices is None:
            object.__setattr__(self, "class_indices", tuple(range(len(self.class_token_ids))))
        all_ids = list(self.template_token_ids) + [self.eot_id]
        for seq in self.class_token_ids:
            all_ids.extend(seq)
        if any(i < 0 or i >= self.vocab_size for i in all_ids):
            raise VocabularyError("token id outside vocabulary")
        if len(set(self.class_token_ids)) != len(self.class_token_ids):
            raise VocabularyError("class token sequences must be pairwise distinct")
        lengths = {len(seq) for seq in self.class_token_ids}
        if len(lengths) > 1:
            raise VocabularyError("class token sequences must share one length")

    @property
    def num_classes(self) -> int:
        return len(self.class_token_ids)

    @property
    def class_token_len(self) -> int:
        return len(self.class_token_ids[0])

    @property
    def template_len(self) -> int:
        return len(self.template_token_ids)

    def subset(self, indices) -> "ClassVocabulary":
        """Vocabulary view holding only the selected classes, in the given order."""
        return ClassVocabulary(
            vocab_size=self.vocab_size,
            template_token_ids=self.template_token_ids,
            class_token_ids=tuple(self.class_token_ids[i] for i in indices),
            eot_id=self.eot_id,
            class_indices=tuple(self.class_indices[i] for i in indices),
        )


def build_vocabulary(num_classes: int, class_token_len: int, prompt_len: int,
                     vocab_size: int, task_seed: int) -> ClassVocabulary:
    """Deterministic vocabulary layout for a task.

    Ids [0, prompt_len) are the hand-written template, id prompt_len is the
    end-of-text marker, and each class draws ``class_token_len`` ids from
    the remaining range without replacement (seeded shuffle, first
    num_classes*class_token_len entries, chunked per class in order).
    """
    if num_classes < 2:
        raise ConfigError("task.num_classes must be at least 2")
    if class_token_len < 1 or prompt_len < 1:
        raise ConfigError("prompt_len and class_token_len must be positive")
    first_free = prompt_len + 1
    pool = list(range(first_free, vocab_size))
    need = num_classes * class_token_len
    if need > len(pool):
        raise ConfigError(
            f"vocab_size={vocab_size} too small for {num_classes} classes of "
            f"{class_token_len} tokens after reserving {first_free} ids"
        )
    stream = SplitMix64(derive(task_seed, _VOCAB_TAG))
    stream.shuffle(pool)
    chosen = pool[:need]
    per_class = tuple(
        tuple(chosen[i * class_token_len : (i + 1) * class_token_len])
        for i in range(num_classes)
    )
    return ClassVocabulary(
        vocab_size=vocab_size,
        template_token_ids=tuple(range(prompt_len)),
        class_token_ids=per_class,
        eot_id=prompt_len,
    )


class _LayerWeights:
    __slots__ = ("attn_q", "attn_k", "attn_v", "attn_out",
                 "mlp_in", "mlp_out", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")


class FrozenEncoder:
    """Immutable L-layer pre-norm transformer over token sequences.

    All forwards accept [num_classes x seq_len x D] stacks; attention mixes
    tokens only within each class's own sequence.
    """

    def __init__(self, config: EncoderConfig):
        config.validate()
        self.config = config
        d = config.token_dim
        hidden = config.mlp_ratio * d
        stream = SplitMix64(config.weight_seed)

        def draw(rows, cols, fan_in):
            scale = 1.0 / np.sqrt(fan_in)
            return Tensor(stream.normals((rows, cols)) * scale)

        self.token_table = draw(config.vocab_size, d, d)
        ones = Tensor(np.ones(d))
        zeros = Tensor(np.zeros(d))
        self.layers = []
        for _ in range(config.num_layers):
            lw = _LayerWeights()
            lw.attn_q = draw(d, d, d)
            lw.attn_k = draw(d, d, d)
            lw.attn_v = draw(d, d, d)
            lw.attn_out = draw(d, d, d)
            lw.mlp_in = draw(d, hidden, d)
            lw.mlp_out = draw(hidden, d, hidden)
            lw.ln1_gain = ones
            lw.ln1_bias = zeros
            lw.ln2_gain = ones
            lw.ln2_bias = zeros
            self.layers.append(lw)
        self.readout_projection = draw(d, config.output_dim, d)

    # -- token embedding ----------------------------------------------------

    def embed_tokens(self, ids) -> Tensor:
        """Rows of the embedding table for a sequence of token ids."""
        ids = list(ids)
        if any(i < 0 or i >= self.config.vocab_size for i in ids):
            raise VocabularyError(
                f"token id outside vocabulary of size {self.config.vocab_size}"
            )
        if not ids:
            return Tensor(np.zeros((0, self.config.token_dim)))
        return Tensor(self.token_table.data[ids])

    # -- transformer stack ----------------------------------------------------

    def _attention(self, x: Tensor, lw: _LayerWeights) -> Tensor:
        cfg = self.config
        n_c, n_t, d = x.shape
        heads = cfg.num_heads
        head_dim = d // heads

        def split_heads(t):
            return t.reshape(n_c, n_t, heads, head_dim).transpose((0, 2, 1, 3))

        q = split_heads(x @ lw.attn_q)
        k = split_heads(x @ lw.attn_k)
        v = split_heads(x @ lw.attn_v)
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(head_dim))
        weights = ad.softmax(scores)
        ctx = weights @ v
        merged = ctx.transpose((0, 2, 1, 3)).reshape(n_c, n_t, d)
        return merged @ lw.attn_out

    def _mlp(self, x: Tensor, lw: _LayerWeights) -> Tensor:
        return ad.gelu(x @ lw.mlp_in) @ lw.mlp_out

    def layer_forward(self, layer_index: int, tokens: Tensor) -> Tensor:
        """One pre-norm block; layer_index counts from 1."""
        if not 1 <= layer_index <= self.config.num_layers:
            raise ContractError(
                f"layer index {layer_index} outside [1, {self.config.num_layers}]"
            )
        if tokens.ndim != 3 or tokens.shape[-1] != self.config.token_dim:
            raise ContractError(
                f"expected [classes x seq x {self.config.token_dim}] tokens, got {tokens.shape}"
            )
        lw = self.layers[layer_index - 1]
        h = tokens + self._attention(ad.layer_norm(tokens, lw.ln1_gain, lw.ln1_bias), lw)
        return h + self._mlp(ad.layer_norm(h, lw.ln2_gain, lw.ln2_bias), lw)

    def forward_range(self, tokens: Tensor, from_layer: int, to_layer: int) -> Tensor:
        """Compose layers from_layer..to_layer inclusive; empty range is identity."""
        L = self.config.num_layers
        if from_layer == to_layer + 1:
            return tokens
        if not (1 <= from_layer <= to_layer <= L):
            raise ContractError(
                f"invalid layer range [{from_layer}, {to_layer}] for {L} layers"
            )
        out = tokens
        for i in range(from_layer, to_layer + 1):
            out = self.layer_forward(i, out)
        return out

    def readout(self, final_tokens: Tensor) -> Tensor:
        """Class embeddings: end-of-text position, projected, unit-normalized."""
        n_c, n_t, d = final_tokens.shape
        eot = ad.slice_axis(final_tokens, n_t - 1, n_t, axis=1).reshape(n_c, d)
        projected = eot @ self.readout_projection
        norms = np.sqrt((projected.data ** 2).sum(axis=-1))
        if np.any(norms < _MIN_READOUT_NORM):
            raise DegenerateEmbeddingError(
                "readout produced a zero-norm row; cannot normalize"
            )
        return ad.normalize_rows(projected)

    # -- integrity ---------------------------------------------------------------

    def weight_tensors(self):
        yield self.token_table
        for lw in self.layers:
            for name in ("attn_q", "attn_k", "attn_v", "attn_out", "mlp_in",
                         "mlp_out", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
                yield getattr(lw, name)
        yield self.readout_projection

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for t in self.weight_tensors():
            digest.update(t.data.astype("<f8").tobytes())
        return digest.hexdigest()


def frozen_class_embeddings(encoder: FrozenEncoder, vocab: ClassVocabulary) -> Tensor:
    """Unit-norm class embeddings of the untouched template forward pass.

    For each class the sequence [template ids; class ids; EOT] is embedded,
    run through every layer, and read out. The result carries no gradient
    and plays the role of the fixed general-knowledge classifier that both
    the consistency loss and the class-prompt generator consume.
    """
    cfg = encoder.config
    expected = vocab.template_len + vocab.class_token_len + 1
    if expected != cfg.seq_len:
        raise ContractError(
            f"template({vocab.template_len}) + class({vocab.class_token_len}) + 1 "
            f"!= encoder seq_len {cfg.seq_len}"
        )
    rows = []
    for ids in vocab.class_token_ids:
        seq = tuple(vocab.template_token_ids) + tuple(ids) + (vocab.eot_id,)
        rows.append(encoder.embed_tokens(seq).data)
    stacked = Tensor(np.stack(rows))
    final = encoder.forward_range(stacked, 1, cfg.num_layers)
    return encoder.readout(final)


def embedding_checksum(embeddings: Tensor) -> str:
    return hashlib.sha256(embeddings.data.astype("<f8").tobytes()).hexdigest()
