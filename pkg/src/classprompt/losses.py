"""Training objective: contrastive classification plus embedding consistency.

The contrastive term is standard temperature-scaled cross entropy over
cosine similarities (inner products of unit rows). The consistency term
penalizes the mean squared row distance between the tuned classifier and
the frozen class embeddings, keeping the learned embeddings close to the
general-knowledge ones; its weight is the single knob trading base-class
fit against generalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

_UNIT_TOL = 1e-9


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.01
    consistency_weight: float = 8.0

    def validate(self, path: str = "loss") -> None:
        if self.temperature <= 0.0:
            raise ConfigError(f"{path}.temperature must be positive")
        if self.consistency_weight < 0.0:
            raise ConfigError(f"{path}.consistency_weight must be nonnegative")


def _check_unit_rows(t: Tensor, what: str) -> None:
    norms = np.sqrt((t.data ** 2).sum(axis=-1))
    worst = float(np.abs(norms - 1.0).max()) if norms.size else 0.0
    if worst > _UNIT_TOL:
        raise ContractError(f"{what} rows must be unit-norm (off by {worst:.3e})")


def contrastive_loss(features: Tensor, labels, classifier: Tensor,
                     temperature: float) -> Tensor:
    """Mean negative log-likelihood of the true class under the cosine softmax."""
    if temperature <= 0.0:
        raise ContractError("temperature must be positive")
    if features.ndim != 2 or classifier.ndim != 2:
        raise ContractError("features and classifier must be 2-d")
    if features.shape[1] != classifier.shape[1]:
        raise ContractError(
            f"feature dim {features.shape[1]} != classifier dim {classifier.shape[1]}"
        )
    _check_unit_rows(features, "feature")
    _check_unit_rows(classifier, "classifier")
    labels = np.asarray(labels, dtype=np.int64)
    n, n_c = features.shape[0], classifier.shape[0]
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_c):
        raise ContractError(f"label outside [0, {n_c})")
    logits = (features @ ad.transpose(classifier, (1, 0))) * (1.0 / temperature)
    probs = ad.softmax(logits)
    onehot = np.zeros((n, n_c))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.tensor_sum(probs * Tensor(onehot), axis=-1)
    return -(ad.log(picked).mean())


def consistency_loss(frozen_embeddings: Tensor, learned_embeddings: Tensor) -> Tensor:
    """Mean over classes of the squared distance between matching rows."""
    if frozen_embeddings.shape != learned_embeddings.shape:
        raise ContractError(
            f"shape mismatch: {frozen_embeddings.shape} vs {learned_embeddings.shape}"
        )
    _check_unit_rows(frozen_embeddings, "frozen embedding")
    _check_unit_rows(learned_embeddings, "learned embedding")
    n_c = frozen_embeddings.shape[0]
    diff = frozen_embeddings - learned_embeddings
    return ad.tensor_sum(diff * diff) * (1.0 / n_c)


def total_loss(contrastive: Tensor, consistency, weight: float) -> Tensor:
    """contrastive + weight * consistency; weight 0 returns contrastive itself."""
    if weight < 0.0:
        raise ContractError("consistency weight must be nonnegative")
    if weight == 0.0:
        return contrastive
    return contrastive + consistency * weight
