"""Adam training loop for the prompt parameters, with exact checkpointing.

Only the shared prompt and (depending on mode) the class-prompt adapter
are updated; encoder weights and frozen class embeddings never change.
Training is a pure function of its seeds and configs: repeated runs are
bit-identical, and a run resumed from a checkpoint matches the
uninterrupted run bit for bit (the data-order stream, the mid-epoch
cursor, and the full optimizer state are all part of the checkpoint).

Modes select the parameter set and the consistency weight:

    coop       shared prompt only, no consistency term
    kgcoop     shared prompt only, consistency term on
    coop+tke   shared prompt + class-prompt adapter, no consistency term
    tcp        shared prompt + class-prompt adapter, consistency term on
"""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, zero_grads
from .encoder import ClassVocabulary, FrozenEncoder
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    ContractError,
    DivergenceError,
    FormatVersionError,
)
from .losses import LossConfig, consistency_loss, contrastive_loss, total_loss
from .prompts import (
    ClassPromptAdapter,
    InjectionConfig,
    PromptConfig,
    SharedPrompt,
    build_classifier,
    trainable_parameters,
)
from .rng import SplitMix64
from .tasks import FewShotDataset, epoch_batches

MODES = ("coop", "kgcoop", "coop+tke", "tcp")
_ADAPTER_MODES = ("coop+tke", "tcp")
_CONSISTENCY_MODES = ("kgcoop", "tcp")

_CHECKPOINT_FORMAT = "classprompt-checkpoint"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 32
    epochs: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = None
    run_seed: int = 1
    mode: str = "tcp"
    max_steps: int = None
    divergence_threshold: float = 1e3

    def validate(self, loss_cfg: LossConfig = None, path: str = "train") -> None:
        if self.learning_rate <= 0.0:
            raise ConfigError(f"{path}.learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError(f"{path}.epochs must be >= 0")
        if not 0.0 <= self.adam_beta1 < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            raise ConfigError(f"{path}.adam betas must lie in [0, 1)")
        if self.adam_eps <= 0.0:
            raise ConfigError(f"{path}.adam_eps must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0.0:
            raise ConfigError(f"{path}.grad_clip must be positive when set")
        if self.mode not in MODES:
            raise ConfigError(f"{path}.mode must be one of {MODES}, got {self.mode!r}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError(f"{path}.max_steps must be >= 0 when set")
        if loss_cfg is not None and self.mode in _CONSISTENCY_MODES:
            if loss_cfg.consistency_weight <= 0.0:
                raise ConfigError(
                    f"{path}.mode={self.mode} requires loss.consistency_weight > 0"
                )


def mode_uses_adapter(mode: str) -> bool:
    return mode in _ADAPTER_MODES


def effective_consistency_weight(mode: str, loss_cfg: LossConfig) -> float:
    return loss_cfg.consistency_weight if mode in _CONSISTENCY_MODES else 0.0


class AdamState:
    """First/second moment estimates per named parameter plus step count."""

    def __init__(self, named_params):
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in named_params}
        self.v = {name: np.zeros(p.shape) for name, p in named_params}


def adam_step(named_params, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update; rebinds each parameter's value array."""
    for name, p in named_params:
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ContractError(f"gradient/state shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in named_params:
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        new_data = p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_data = np.ascontiguousarray(new_data)
        new_data.setflags(write=False)
        p.data = new_data


def clip_gradients(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}


class TrainerState:
    """Everything a run owns: parameters, optimizer, data order, position."""

    def __init__(self, mode: str, shared: SharedPrompt, adapter,
                 injection: InjectionConfig, adam: AdamState,
                 data_stream: SplitMix64, step: int = 0, epoch: int = 0,
                 epoch_perm=None, epoch_pos: int = 0):
        self.mode = mode
        self.shared = shared
        self.adapter = adapter
        self.injection = injection
        self.adam = adam
        self.data_stream = data_stream
        self.step = step
        self.epoch = epoch
        self.epoch_perm = epoch_perm
        self.epoch_pos = epoch_pos

    def named_params(self):
        return trainable_parameters(self.shared, self.adapter)


def init_trainer(mode: str, prompt_cfg: PromptConfig, injection: InjectionConfig,
                 encoder: FrozenEncoder, run_seed: int) -> TrainerState:
    """Fresh trainer state; all run-owned randomness branches off run_seed."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    prompt_cfg.validate()
    seeder = SplitMix64(run_seed)
    prompt_seed = seeder.next_raw()
    adapter_seed = seeder.next_raw()
    data_seed = seeder.next_raw()
    shared = SharedPrompt.build(
        prompt_cfg.length, encoder.config.token_dim, prompt_cfg.init_mode,
        encoder, prompt_seed,
    )
    adapter = None
    if mode_uses_adapter(mode):
        adapter = ClassPromptAdapter.build(
            encoder.config.output_dim, prompt_cfg.d_mid, prompt_cfg.length,
            encoder.config.token_dim, adapter_seed, linear=prompt_cfg.linear_adapter,
        )
    return TrainerState(mode, shared, adapter, injection, AdamState(
        trainable_parameters(shared, adapter)), SplitMix64(data_seed))


def train(state: TrainerState, train_ds: FewShotDataset, encoder: FrozenEncoder,
          vocab: ClassVocabulary, frozen_embeddings: Tensor,
          train_cfg: TrainConfig, loss_cfg: LossConfig):
    """Run the loop until the epoch or step budget is exhausted.

    vocab and frozen_embeddings must already be restricted to the classes
    present in train_ds. Returns (metrics, timings): metrics rows are
    (step, ce, kg, total) and timings rows (step, wall_ms). Raises
    DivergenceError carrying the last healthy state snapshot if the loss
    explodes or a gradient goes non-finite.
    """
    train_cfg.validate(loss_cfg)
    loss_cfg.validate()
    if vocab.num_classes != len(train_ds.class_indices):
        raise ContractError("vocabulary does not match the training split's classes")
    omega = effective_consistency_weight(state.mode, loss_cfg)
    base_features = frozen_embeddings
    metrics = []
    timings = []
    last_good = state_to_dict(state)

    def budget_left():
        if train_cfg.max_steps is not None and state.step >= train_cfg.max_steps:
            return False
        return state.epoch < train_cfg.epochs

    while budget_left():
        resume_perm = state.epoch_perm
        resume_pos = state.epoch_pos
        state.epoch_perm = None
        state.epoch_pos = 0
        completed = True
        for _, xb, yb, perm, pos in epoch_batches(
                train_ds, train_cfg.batch_size, state.data_stream,
                start_perm=resume_perm, start_pos=resume_pos):
            t0 = time.perf_counter()
            params = state.named_params()
            zero_grads([p for _, p in params])
            learned = build_classifier(
                state.shared, state.adapter, state.injection,
                base_features, encoder, vocab,
            )
            ce = contrastive_loss(Tensor(xb), yb, learned, loss_cfg.temperature)
            if omega > 0.0:
                kg = consistency_loss(base_features, learned)
                loss = total_loss(ce, kg, omega)
                kg_value = kg.item()
            else:
                loss = ce
                kg_value = 0.0
            loss_value = loss.item()
            if not np.isfinite(loss_value) or loss_value > train_cfg.divergence_threshold:
                raise DivergenceError(
                    f"loss {loss_value} at step {state.step + 1} exceeds "
                    f"threshold {train_cfg.divergence_threshold}",
                    last_good=last_good,
                )
            loss.backward()
            grads = {}
            for name, p in params:
                if p.grad is None:
                    grads[name] = np.zeros(p.shape)
                    continue
                if not np.all(np.isfinite(p.grad)):
                    raise DivergenceError(
                        f"non-finite gradient for parameter {name!r} "
                        f"at step {state.step + 1}",
                        last_good=last_good,
                    )
                grads[name] = p.grad
            if train_cfg.grad_clip is not None:
                grads = clip_gradients(grads, train_cfg.grad_clip)
            adam_step(params, grads, state.adam, train_cfg)
            state.step += 1
            state.epoch_perm = perm
            state.epoch_pos = pos
            metrics.append((state.step, ce.item(), kg_value, loss_value))
            timings.append((state.step, (time.perf_counter() - t0) * 1e3))
            if train_cfg.max_steps is not None and state.step >= train_cfg.max_steps:
                completed = pos >= len(perm)
                break
        if completed:
            state.epoch += 1
            state.epoch_perm = None
            state.epoch_pos = 0
            last_good = state_to_dict(state)
        if not completed:
            break
    return metrics, timings


# -- checkpoint serialization ------------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype("<f8").tobytes(order="C")).decode("ascii"),
    }


def _decode_array(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
    if len(raw) != count * 8:
        raise TruncatedFileError(
            f"array payload has {len(raw)} bytes, expected {count * 8}"
        )
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def state_to_dict(state: TrainerState) -> dict:
    params = {name: _encode_array(p.data) for name, p in state.named_params()}
    return {
        "mode": state.mode,
        "step": state.step,
        "epoch": state.epoch,
        "epoch_perm": list(state.epoch_perm) if state.epoch_perm is not None else None,
        "epoch_pos": state.epoch_pos,
        "data_stream": state.data_stream.state(),
        "injection": {
            "layers": list(state.injection.layers),
            "fusion_weight": state.injection.fusion_weight,
        },
        "prompt_init_mode": state.shared.init_mode,
        "adapter": None if state.adapter is None else {
            "prompt_len": state.adapter.prompt_len,
            "token_dim": state.adapter.token_dim,
            "linear": state.adapter.linear,
        },
        "params": params,
        "adam": {
            "t": state.adam.t,
            "m": {name: _encode_array(a) for name, a in state.adam.m.items()},
            "v": {name: _encode_array(a) for name, a in state.adam.v.items()},
        },
    }


def state_from_dict(payload: dict) -> TrainerState:
    mode = payload["mode"]
    if mode not in MODES:
        raise CheckpointMismatchError(f"checkpoint mode {mode!r} unknown")
    params = {name: _decode_array(entry) for name, entry in payload["params"].items()}
    shared = SharedPrompt(
        Tensor(params["prompt_tokens"], requires_grad=True),
        payload.get("prompt_init_mode", "random"),
    )
    adapter = None
    if mode_uses_adapter(mode):
        if payload["adapter"] is None or "adapter_down" not in params:
            raise CheckpointMismatchError(
                f"mode {mode!r} needs adapter parameters missing from checkpoint"
            )
        info = payload["adapter"]
        adapter = ClassPromptAdapter(
            Tensor(params["adapter_down"], requires_grad=True),
            Tensor(params["adapter_up"], requires_grad=True),
            info["prompt_len"], info["token_dim"], linear=info["linear"],
        )
    injection = InjectionConfig(
        layers=tuple(payload["injection"]["layers"]),
        fusion_weight=payload["injection"]["fusion_weight"],
    )
    state = TrainerState(
        mode, shared, adapter, injection,
        AdamState(trainable_parameters(shared, adapter)),
        SplitMix64.from_state(payload["data_stream"]),
        step=payload["step"], epoch=payload["epoch"],
        epoch_perm=payload["epoch_perm"], epoch_pos=payload["epoch_pos"],
    )
    state.adam.t = payload["adam"]["t"]
    for name in state.adam.m:
        state.adam.m[name] = _decode_array(payload["adam"]["m"][name])
        state.adam.v[name] = _decode_array(payload["adam"]["v"][name])
    return state


def save_checkpoint(state_or_dict, path, configs: dict = None, seeds: dict = None) -> None:
    """Write a versioned JSON checkpoint (accepts a state or a snapshot dict)."""
    payload = state_or_dict if isinstance(state_or_dict, dict) else state_to_dict(state_or_dict)
    doc = {
        "format": _CHECKPOINT_FORMAT,
        "format_version": _CHECKPOINT_VERSION,
        "configs": configs or {},
        "seeds": seeds or {},
        "state": payload,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path, expected_mode: str = None, encoder_config: dict = None):
    """Read a checkpoint; returns (TrainerState, configs dict, seeds dict)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != _CHECKPOINT_FORMAT or doc.get("format_version") != _CHECKPOINT_VERSION:
        raise FormatVersionError(
            f"{path}: expected {_CHECKPOINT_FORMAT} v{_CHECKPOINT_VERSION}"
        )
    mode = doc["state"]["mode"]
    if expected_mode is not None and mode != expected_mode:
        raise CheckpointMismatchError(
            f"checkpoint holds mode {mode!r}, requested {expected_mode!r}"
        )
    if encoder_config is not None:
        stored = doc.get("configs", {}).get("encoder")
        if stored is not None and stored != encoder_config:
            raise CheckpointMismatchError(
                "checkpoint encoder config disagrees with the provided one"
            )
    return state_from_dict(doc["state"]), doc.get("configs", {}), doc.get("seeds", {})
