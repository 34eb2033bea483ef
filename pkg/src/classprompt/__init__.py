"""Class-aware prompt tuning on a frozen text encoder, at desk scale.

The package is a small numpy laboratory for prompt tuning: a frozen,
seeded transformer text encoder; a trainable shared prompt; a bottleneck
adapter that turns frozen class embeddings into per-class prompt tokens
injected mid-stack; a contrastive-plus-consistency objective; synthetic
few-shot tasks with a controlled text-to-feature gap; and a base-to-new
evaluation harness with ablation sweeps. Everything runs on a custom
reverse-mode autodiff engine that is verified coordinate-by-coordinate
against finite differences.
"""

from .autodiff import Tensor, finite_diff_check
from .config import ExperimentConfig, TOOL_VERSION
from .encoder import (
    ClassVocabulary,
    EncoderConfig,
    FrozenEncoder,
    build_vocabulary,
    frozen_class_embeddings,
)
from .errors import ClassPromptError
from .evaluation import (
    EvalReport,
    accuracy,
    harmonic_mean,
    run_base_to_new,
    run_single,
    run_sweep,
)
from .losses import LossConfig, consistency_loss, contrastive_loss, total_loss
from .prompts import (
    ClassPromptAdapter,
    InjectionConfig,
    PromptConfig,
    SharedPrompt,
    build_classifier,
    inject_prompts,
)
from .tasks import FewShotDataset, TaskConfig, generate_task, load_dataset, save_dataset
from .training import TrainConfig, init_trainer, load_checkpoint, save_checkpoint, train

__version__ = TOOL_VERSION

__all__ = [
    "Tensor",
    "finite_diff_check",
    "ExperimentConfig",
    "EncoderConfig",
    "FrozenEncoder",
    "ClassVocabulary",
    "build_vocabulary",
    "frozen_class_embeddings",
    "ClassPromptError",
    "EvalReport",
    "accuracy",
    "harmonic_mean",
    "run_base_to_new",
    "run_single",
    "run_sweep",
    "LossConfig",
    "consistency_loss",
    "contrastive_loss",
    "total_loss",
    "ClassPromptAdapter",
    "InjectionConfig",
    "PromptConfig",
    "SharedPrompt",
    "build_classifier",
    "inject_prompts",
    "FewShotDataset",
    "TaskConfig",
    "generate_task",
    "load_dataset",
    "save_dataset",
    "TrainConfig",
    "init_trainer",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "TOOL_VERSION",
]
