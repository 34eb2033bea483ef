"""Learnable prompts: shared tokens, the class-prompt adapter, injection.

Two kinds of prompt live here. The shared prompt is a single trainable
M x D token block prepended to every class's sequence, exactly the
classic soft-prompt setup. The class-prompt adapter is a two-matrix
bottleneck that maps each class's frozen embedding (D_t) down to a
small width and back up to M*D, reshaped into M prompt tokens per
class; because it is a function of the frozen embedding, it produces
prompts for classes never seen in training.

Injection swaps (or blends, with a fusion weight) the first M sequence
positions of a chosen layer's output for the class-aware tokens before
the remaining layers run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import ClassVocabulary, FrozenEncoder
from .errors import ConfigError, ContractError
from .rng import SplitMix64

INIT_RANDOM = "random"
INIT_TEMPLATE = "template-embedding"
INIT_MODES = (INIT_RANDOM, INIT_TEMPLATE)

_PROMPT_INIT_STD = 0.02


@dataclass(frozen=True)
class PromptConfig:
    length: int = 4
    init_mode: str = INIT_RANDOM
    d_mid: int = 8
    linear_adapter: bool = False

    def validate(self, path: str = "prompt") -> None:
        if self.length < 1:
            raise ConfigError(f"{path}.length must be >= 1")
        if self.d_mid < 1:
            raise ConfigError(f"{path}.d_mid must be >= 1")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(
                f"{path}.init_mode must be one of {INIT_MODES}, got {self.init_mode!r}"
            )


@dataclass(frozen=True)
class InjectionConfig:
    """Where class-aware tokens enter the stack and how strongly."""

    layers: tuple = (4,)
    fusion_weight: float = 1.0

    def validate(self, num_layers: int, path: str = "injection") -> None:
        if not self.layers:
            raise ConfigError(f"{path}.layers must not be empty")
        if list(self.layers) != sorted(set(self.layers)):
            raise ConfigError(f"{path}.layers must be strictly increasing")
        for l in self.layers:
            if not 1 <= l <= num_layers:
                raise ConfigError(
                    f"{path}.layers entry {l} outside [1, {num_layers}]"
                )
        if not 0.0 <= self.fusion_weight <= 1.0:
            raise ConfigError(f"{path}.fusion_weight must lie in [0, 1]")


def default_insert_layer(num_layers: int) -> int:
    """Two thirds of the way up the stack, the depth that works best."""
    return max(1, math.ceil(2 * num_layers / 3))


class SharedPrompt:
    """Trainable M x D prompt tokens shared by every class."""

    def __init__(self, tokens: Tensor, init_mode: str = INIT_RANDOM):
        if tokens.ndim != 2:
            raise ContractError(f"shared prompt must be 2-d, got {tokens.shape}")
        self.tokens = tokens
        self.init_mode = init_mode

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def build(cls, length: int, dim: int, init_mode: str,
              encoder: FrozenEncoder, seed: int) -> "SharedPrompt":
        if init_mode == INIT_RANDOM:
            stream = SplitMix64(seed)
            data = stream.normals((length, dim)) * _PROMPT_INIT_STD
        elif init_mode == INIT_TEMPLATE:
            # start from the embeddings of the hand-written template ids
            data = encoder.token_table.data[list(range(length))].copy()
        else:
            raise ConfigError(f"unknown prompt init mode {init_mode!r}")
        return cls(Tensor(data, requires_grad=True), init_mode)


class ClassPromptAdapter:
    """Bottleneck mapping frozen class embeddings to per-class prompt tokens."""

    def __init__(self, down_proj: Tensor, up_proj: Tensor,
                 prompt_len: int, token_dim: int, linear: bool = False):
        if down_proj.ndim != 2 or up_proj.ndim != 2:
            raise ContractError("adapter projections must be matrices")
        if down_proj.shape[1] != up_proj.shape[0]:
            raise ConfigError(
                f"adapter widths disagree: down {down_proj.shape} vs up {up_proj.shape}"
            )
        if up_proj.shape[1] != prompt_len * token_dim:
            raise ConfigError(
                f"adapter output dim {up_proj.shape[1]} != prompt_len*token_dim "
                f"= {prompt_len}*{token_dim}"
            )
        self.down_proj = down_proj
        self.up_proj = up_proj
        self.prompt_len = prompt_len
        self.token_dim = token_dim
        self.linear = linear

    @classmethod
    def build(cls, embed_dim: int, d_mid: int, prompt_len: int, token_dim: int,
              seed: int, linear: bool = False) -> "ClassPromptAdapter":
        # zero-init up-projection: the adapter starts class-blind and learns
        # its correction gradually, which transfers far better to unseen
        # classes than a random start
        stream = SplitMix64(seed)
        down = stream.normals((embed_dim, d_mid)) * (1.0 / math.sqrt(embed_dim))
        up = np.zeros((d_mid, prompt_len * token_dim))
        return cls(
            Tensor(down, requires_grad=True),
            Tensor(up, requires_grad=True),
            prompt_len,
            token_dim,
            linear=linear,
        )

    def generate(self, class_embeddings: Tensor) -> Tensor:
        """Per-class prompt tokens, shape [num_classes x M x D]."""
        if class_embeddings.ndim != 2 or class_embeddings.shape[1] != self.down_proj.shape[0]:
            raise ContractError(
                f"expected [classes x {self.down_proj.shape[0]}] embeddings, "
                f"got {class_embeddings.shape}"
            )
        hidden = class_embeddings @ self.down_proj
        if not self.linear:
            hidden = ad.relu(hidden)
        flat = hidden @ self.up_proj
        n_c = class_embeddings.shape[0]
        return flat.reshape(n_c, self.prompt_len, self.token_dim)


def assemble_inputs(shared: SharedPrompt, vocab: ClassVocabulary,
                    encoder: FrozenEncoder) -> Tensor:
    """Layer-0 token stack: [shared prompt; class name tokens; EOT] per class."""
    cfg = encoder.config
    m = shared.length
    if shared.tokens.shape[1] != cfg.token_dim:
        raise ContractError(
            f"prompt dim {shared.tokens.shape[1]} != encoder dim {cfg.token_dim}"
        )
    n_t = m + vocab.class_token_len + 1
    if n_t != cfg.seq_len:
        raise ContractError(
            f"prompt({m}) + class({vocab.class_token_len}) + 1 != seq_len {cfg.seq_len}"
        )
    n_c = vocab.num_classes
    prompt_block = ad.expand_leading(shared.tokens, n_c)
    class_rows = np.stack([encoder.embed_tokens(ids).data for ids in vocab.class_token_ids])
    class_block = Tensor(class_rows)
    eot_row = encoder.embed_tokens([vocab.eot_id]).data
    eot_block = Tensor(np.broadcast_to(eot_row, (n_c, 1, cfg.token_dim)).copy())
    return ad.concat([prompt_block, class_block, eot_block], axis=1)


def inject_prompts(layer_tokens: Tensor, class_tokens: Tensor, fusion_weight: float) -> Tensor:
    """Replace (or blend into) the first M positions of a layer's output.

    fusion_weight 1 is pure replacement and 0 returns the input unchanged;
    both endpoints are exact, not epsilon-close.
    """
    if not 0.0 <= fusion_weight <= 1.0:
        raise ContractError(f"fusion weight {fusion_weight} outside [0, 1]")
    n_c, n_t, d = layer_tokens.shape
    if class_tokens.ndim != 3 or class_tokens.shape[0] != n_c or class_tokens.shape[2] != d:
        raise ContractError(
            f"class tokens {class_tokens.shape} incompatible with layer tokens {layer_tokens.shape}"
        )
    m = class_tokens.shape[1]
    if m > n_t:
        raise ContractError(f"prompt length {m} exceeds sequence length {n_t}")
    if fusion_weight == 0.0:
        return layer_tokens
    if fusion_weight == 1.0:
        head = class_tokens
    else:
        kept = ad.slice_axis(layer_tokens, 0, m, axis=1)
        head = class_tokens * fusion_weight + kept * (1.0 - fusion_weight)
    tail = ad.slice_axis(layer_tokens, m, n_t, axis=1)
    return ad.concat([head, tail], axis=1)


def build_classifier(shared: SharedPrompt, adapter, injection: InjectionConfig,
                     class_embeddings: Tensor, encoder: FrozenEncoder,
                     vocab: ClassVocabulary) -> Tensor:
    """Unit-norm class embeddings of the tuned forward pass.

    Works for any class set, trained-on or not: everything class-specific
    enters through the vocabulary token ids and the frozen embedding rows.
    With adapter=None no injection happens and the result is the plain
    shared-prompt classifier.
    """
    tokens = assemble_inputs(shared, vocab, encoder)
    L = encoder.config.num_layers
    if adapter is None:
        final = encoder.forward_range(tokens, 1, L)
        return encoder.readout(final)
    injection.validate(L)
    class_tokens = adapter.generate(class_embeddings)
    done_through = 0
    for layer in injection.layers:
        tokens = encoder.forward_range(tokens, done_through + 1, layer)
        tokens = inject_prompts(tokens, class_tokens, injection.fusion_weight)
        done_through = layer
    final = encoder.forward_range(tokens, done_through + 1, L)
    return encoder.readout(final)


def trainable_parameters(shared: SharedPrompt, adapter) -> list:
    """Named trainable tensors in a fixed order."""
    params = [("prompt_tokens", shared.tokens)]
    if adapter is not None:
        params.append(("adapter_down", adapter.down_proj))
        params.append(("adapter_up", adapter.up_proj))
    return params
