"""Synthetic few-shot tasks over a rotated copy of the frozen embedding space.

Real image features and text embeddings of the same class sit near each
other but not on top of each other. The generator reproduces that
structure at desk scale: each class's "image" prototype is its frozen
text embedding pushed through a fixed partial rotation of the feature
space, and samples are unit-normalized noisy copies of the prototype.
Because the rotation is shared by every class, the discrepancy is
class-consistent and learnable, while plain zero-shot matching is left
mid-range accurate: there is headroom both to gain and to lose.

Classes are split into a base half (trained on) and a new half (never
trained on); the three emitted splits are train-base, test-base, and
test-new.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .encoder import ClassVocabulary, FrozenEncoder, frozen_class_embeddings
from .errors import (
    ConfigError,
    ContractError,
    FormatVersionError,
    NonUnitVectorError,
    TruncatedFileError,
)
from .rng import SplitMix64, derive, rotation_matrix

_GAP_TAG = 0x67617021   # "gap!"
_SAMPLE_TAG = 0x73616D70  # "samp"

TAG_TRAIN_BASE = "train-base"
TAG_TEST_BASE = "test-base"
TAG_TEST_NEW = "test-new"

_DATASET_FORMAT = "classprompt-dataset"
_DATASET_VERSION = 1

_LOAD_UNIT_TOL = 1e-9


@dataclass(frozen=True)
class TaskConfig:
    num_classes: int = 20
    shots_per_class: int = 16
    test_per_class: int = 50
    noise_sigma: float = 0.25
    gap_strength: float = 0.15
    gap_rotation_seed: int = None  # default: derived from task_seed
    task_seed: int = 1
    base_fraction: float = 0.5
    class_token_len: int = 3

    def validate(self, path: str = "task") -> None:
        if self.num_classes < 2:
            raise ConfigError(f"{path}.num_classes must be >= 2")
        if self.shots_per_class < 1:
            raise ConfigError(f"{path}.shots_per_class must be >= 1")
        if self.test_per_class < 1:
            raise ConfigError(f"{path}.test_per_class must be >= 1")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"{path}.noise_sigma must be nonnegative")
        if self.gap_strength < 0.0:
            raise ConfigError(f"{path}.gap_strength must be nonnegative")
        if not 0.0 < self.base_fraction < 1.0:
            raise ConfigError(f"{path}.base_fraction must lie strictly in (0, 1)")
        if self.class_token_len < 1:
            raise ConfigError(f"{path}.class_token_len must be >= 1")

    def resolved_gap_seed(self) -> int:
        if self.gap_rotation_seed is not None:
            return self.gap_rotation_seed
        return derive(self.task_seed, _GAP_TAG)

    def split_sizes(self):
        n_base = max(1, min(self.num_classes - 1,
                            int(np.ceil(self.num_classes * self.base_fraction))))
        return n_base, self.num_classes - n_base


class FewShotDataset:
    """Immutable labeled feature set for one split.

    labels are local indices into class_indices, which holds the global
    class ids this split covers.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray,
                 class_indices, tag: str):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2:
            raise ContractError("features must be [samples x dim]")
        if labels.shape != (features.shape[0],):
            raise ContractError("one label per sample required")
        self.features = features
        self.labels = labels
        self.class_indices = tuple(class_indices)
        self.tag = tag
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def base_new_split(cfg: TaskConfig):
    """Global class index tuples (base, new): first chunk base, rest new."""
    n_base, _ = cfg.split_sizes()
    return tuple(range(n_base)), tuple(range(n_base, cfg.num_classes))


def generate_task(cfg: TaskConfig, encoder: FrozenEncoder, vocab: ClassVocabulary,
                  rotation: np.ndarray = None):
    """Three splits (train-base, test-base, test-new), deterministically.

    Pass an explicit rotation matrix to override the seeded one (the
    identity turns the modality gap off entirely).
    """
    cfg.validate()
    if vocab.num_classes != cfg.num_classes:
        raise ContractError(
            f"vocabulary has {vocab.num_classes} classes, config says {cfg.num_classes}"
        )
    anchors = frozen_class_embeddings(encoder, vocab).data
    dim = anchors.shape[1]
    if rotation is None:
        rotation = rotation_matrix(dim, cfg.resolved_gap_seed(), cfg.gap_strength)
    protos = anchors @ rotation.T
    protos = protos / np.sqrt((protos ** 2).sum(axis=1, keepdims=True))

    base_ids, new_ids = base_new_split(cfg)
    stream = SplitMix64(derive(cfg.task_seed, _SAMPLE_TAG))

    def draw_split(class_ids, per_class, tag):
        feats, labels = [], []
        for local, global_id in enumerate(class_ids):
            proto = protos[global_id]
            if cfg.noise_sigma == 0.0:
                block = np.broadcast_to(proto, (per_class, dim)).copy()
            else:
                noise = stream.normals((per_class, dim))
                block = proto + cfg.noise_sigma * noise
                block = block / np.sqrt((block ** 2).sum(axis=1, keepdims=True))
            feats.append(block)
            labels.extend([local] * per_class)
        return FewShotDataset(np.concatenate(feats), np.asarray(labels), class_ids, tag)

    train_base = draw_split(base_ids, cfg.shots_per_class, TAG_TRAIN_BASE)
    test_base = draw_split(base_ids, cfg.test_per_class, TAG_TEST_BASE)
    test_new = draw_split(new_ids, cfg.test_per_class, TAG_TEST_NEW)
    return train_base, test_base, test_new


def epoch_batches(ds: FewShotDataset, batch_size: int, stream: SplitMix64,
                  start_perm=None, start_pos: int = 0):
    """Yield (features, labels) batches covering the split exactly once.

    The permutation is drawn from the stream at epoch start; passing
    start_perm/start_pos resumes a partially consumed epoch (used when
    restoring training from a mid-epoch checkpoint). The final batch may
    be smaller than batch_size.
    """
    if len(ds) == 0:
        raise ContractError("cannot sample from an empty dataset")
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if start_perm is None:
        perm = stream.shuffle(list(range(len(ds))))
        pos = 0
    else:
        perm = list(start_perm)
        pos = start_pos
    while pos < len(perm):
        take = perm[pos : pos + batch_size]
        pos += len(take)
        yield np.asarray(take), ds.features[take], ds.labels[take], perm, pos


def unit_feature_tensor(ds: FewShotDataset) -> Tensor:
    return Tensor(ds.features)


# -- persistence: versioned JSON metadata + flat little-endian binary ------------


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def dataset_paths(stem):
    stem = Path(stem)
    if stem.suffix == ".json":
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_dataset(ds: FewShotDataset, stem) -> None:
    """Write <stem>.json (metadata) and <stem>.bin (row-major <f8 vectors)."""
    meta_path, bin_path = dataset_paths(stem)
    payload = ds.features.astype("<f8").tobytes(order="C")
    meta = {
        "format": _DATASET_FORMAT,
        "format_version": _DATASET_VERSION,
        "split": ds.tag,
        "num_samples": int(len(ds)),
        "feature_dim": int(ds.feature_dim),
        "class_indices": [int(c) for c in ds.class_indices],
        "labels": [int(y) for y in ds.labels],
        "vector_file": bin_path.name,
        "vector_bytes": len(payload),
    }
    bin_path.write_bytes(payload)
    meta_path.write_text(_canonical_json(meta))


def load_dataset(stem) -> FewShotDataset:
    meta_path, _ = dataset_paths(stem)
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != _DATASET_FORMAT or meta.get("format_version") != _DATASET_VERSION:
        raise FormatVersionError(
            f"{meta_path}: expected {_DATASET_FORMAT} v{_DATASET_VERSION}, "
            f"got {meta.get('format')!r} v{meta.get('format_version')!r}"
        )
    bin_path = meta_path.parent / meta["vector_file"]
    payload = bin_path.read_bytes()
    n, dim = meta["num_samples"], meta["feature_dim"]
    expected = n * dim * 8
    if meta["vector_bytes"] != expected or len(payload) != expected:
        raise TruncatedFileError(
            f"{bin_path}: expected {expected} bytes for {n}x{dim} float64, "
            f"declared {meta['vector_bytes']}, found {len(payload)}"
        )
    features = np.frombuffer(payload, dtype="<f8").reshape(n, dim).astype(np.float64)
    if n:
        norms = np.sqrt((features ** 2).sum(axis=1))
        worst = float(np.abs(norms - 1.0).max())
        if worst > _LOAD_UNIT_TOL:
            raise NonUnitVectorError(
                f"{bin_path}: vectors deviate from unit norm by {worst:.3e}"
            )
    return FewShotDataset(features, meta["labels"], meta["class_indices"], meta["split"])


def dataset_checksum(ds: FewShotDataset) -> str:
    digest = hashlib.sha256()
    digest.update(ds.features.astype("<f8").tobytes())
    digest.update(ds.labels.astype("<i8").tobytes())
    return digest.hexdigest()
