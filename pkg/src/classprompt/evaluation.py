"""Base-to-new evaluation and the ablation sweep harness.

A single protocol underlies everything here: per seed, generate a task,
train on the base classes only, then build classifiers for the base and
the new split from the same trained state and score both. The headline
number is the harmonic mean H of the two accuracies. Sweeps repeat the
protocol across one varying axis and emit a long-form CSV plus an
aggregate table.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import ExperimentConfig, TOOL_VERSION, canonical_json, config_hash
from .encoder import FrozenEncoder, build_vocabulary, frozen_class_embeddings
from .errors import ContractError
from .prompts import INIT_MODES, build_classifier
from .tasks import FewShotDataset, base_new_split, generate_task
from .training import MODES, TrainerState, init_trainer, train


def accuracy(ds: FewShotDataset, classifier) -> float:
    """Fraction of samples whose most-similar classifier row is their label.

    Ties go to the lowest class index, so results do not depend on any
    library's tie-breaking whims.
    """
    if len(ds) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    rows = classifier.data if isinstance(classifier, Tensor) else np.asarray(classifier)
    if rows.ndim != 2 or rows.shape[1] != ds.feature_dim:
        raise ContractError(
            f"classifier shape {rows.shape} incompatible with features "
            f"of dim {ds.feature_dim}"
        )
    norms = np.sqrt((rows ** 2).sum(axis=1))
    if np.abs(norms - 1.0).max() > 1e-9:
        raise ContractError("classifier rows must be unit-norm")
    scores = ds.features @ rows.T
    preds = np.argmax(scores, axis=1)  # first maximum = lowest class index
    return float((preds == ds.labels).mean())


def harmonic_mean(base: float, new: float) -> float:
    """2*base*new / (base + new); zero when both are zero."""
    if base < 0.0 or new < 0.0:
        raise ContractError("harmonic_mean arguments must be nonnegative")
    if base + new == 0.0:
        return 0.0
    return 2.0 * base * new / (base + new)


def _seeded_config(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Bind one evaluation seed: it becomes both task_seed and run_seed."""
    return dataclasses.replace(
        cfg,
        task=dataclasses.replace(cfg.task, task_seed=seed),
        train=dataclasses.replace(cfg.train, run_seed=seed),
    )


def evaluate_seed(cfg: ExperimentConfig, seed: int, encoder: FrozenEncoder = None):
    """One full protocol pass under an evaluation seed."""
    return run_single(_seeded_config(cfg.validate(), seed), encoder=encoder)


def run_single(cfg: ExperimentConfig, encoder: FrozenEncoder = None):
    """Train and score one run with the config's own seeds.

    Returns (row dict, trained state, extras with metrics/timings/task).
    """
    cfg = cfg.validate()
    if encoder is None:
        encoder = FrozenEncoder(cfg.encoder)
    vocab = build_vocabulary(
        cfg.task.num_classes, cfg.task.class_token_len, cfg.prompt.length,
        cfg.encoder.vocab_size, cfg.task.task_seed,
    )
    anchors = frozen_class_embeddings(encoder, vocab)
    train_ds, test_base, test_new = generate_task(cfg.task, encoder, vocab)
    base_ids, new_ids = base_new_split(cfg.task)

    state = init_trainer(
        cfg.train.mode, cfg.prompt, cfg.injection, encoder, cfg.train.run_seed
    )
    vocab_base = vocab.subset(base_ids)
    anchors_base = Tensor(anchors.data[list(base_ids)])
    metrics, timings = train(
        state, train_ds, encoder, vocab_base, anchors_base, cfg.train, cfg.loss
    )
    base_acc, new_acc = split_accuracies(
        state, encoder, vocab, anchors, test_base, test_new, base_ids, new_ids
    )
    row = {
        "seed": cfg.task.task_seed,
        "base": base_acc,
        "new": new_acc,
        "h": harmonic_mean(base_acc, new_acc),
    }
    extras = {
        "metrics": metrics,
        "timings": timings,
        "vocab": vocab,
        "anchors": anchors,
        "encoder": encoder,
        "task": (train_ds, test_base, test_new),
    }
    return row, state, extras


def split_accuracies(state: TrainerState, encoder, vocab, anchors,
                     test_base, test_new, base_ids, new_ids):
    """Score the trained prompts on both splits (no gradients, no mutation)."""
    base_cls = build_classifier(
        state.shared, state.adapter, state.injection,
        Tensor(anchors.data[list(base_ids)]), encoder, vocab.subset(base_ids),
    )
    new_cls = build_classifier(
        state.shared, state.adapter, state.injection,
        Tensor(anchors.data[list(new_ids)]), encoder, vocab.subset(new_ids),
    )
    return accuracy(test_base, base_cls), accuracy(test_new, new_cls)


class EvalReport:
    """Per-seed rows plus aggregates for one mode/config."""

    def __init__(self, mode: str, seeds, rows, cfg: ExperimentConfig):
        self.mode = mode
        self.seeds = list(seeds)
        self.rows = rows
        self.config = cfg.to_dict()
        self.config_sha256 = config_hash(cfg)
        self.tool_version = TOOL_VERSION

    def _column(self, key):
        return np.array([r[key] for r in self.rows])

    @property
    def mean(self) -> dict:
        return {k: float(self._column(k).mean()) for k in ("base", "new", "h")}

    @property
    def std(self) -> dict:
        return {k: float(self._column(k).std()) for k in ("base", "new", "h")}

    def to_dict(self) -> dict:
        return {
            "format": "classprompt-report",
            "format_version": 1,
            "mode": self.mode,
            "seeds": self.seeds,
            "rows": self.rows,
            "mean": self.mean,
            "std": self.std,
            "config": self.config,
            "config_sha256": self.config_sha256,
            "tool_version": self.tool_version,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def run_base_to_new(cfg: ExperimentConfig, seeds, row_sink=None) -> EvalReport:
    """The full multi-seed protocol for cfg.train.mode.

    row_sink, when given, receives each finished row immediately, so
    partial progress survives a failing seed.
    """
    if not seeds:
        raise ContractError("seeds list must not be empty")
    cfg = cfg.validate()
    encoder = FrozenEncoder(cfg.encoder)
    rows = []
    for seed in seeds:
        row, _, _ = evaluate_seed(cfg, seed, encoder=encoder)
        rows.append(row)
        if row_sink is not None:
            row_sink(row)
    return EvalReport(cfg.train.mode, seeds, rows, cfg)


# -- ablation sweeps -----------------------------------------------------------

SWEEP_AXES = (
    "insert_layer",
    "prompt_length",
    "d_mid",
    "fusion_lambda",
    "template",
    "layer_sets",
    "mode",
)


def apply_axis_value(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "insert_layer":
        return dataclasses.replace(
            cfg, injection=dataclasses.replace(cfg.injection, layers=(int(value),))
        )
    if axis == "prompt_length":
        return dataclasses.replace(
            cfg, prompt=dataclasses.replace(cfg.prompt, length=int(value))
        ).resolve()
    if axis == "d_mid":
        return dataclasses.replace(
            cfg, prompt=dataclasses.replace(cfg.prompt, d_mid=int(value))
        )
    if axis == "fusion_lambda":
        return dataclasses.replace(
            cfg, injection=dataclasses.replace(cfg.injection, fusion_weight=float(value))
        )
    if axis == "template":
        return dataclasses.replace(
            cfg, prompt=dataclasses.replace(cfg.prompt, init_mode=str(value))
        )
    if axis == "layer_sets":
        layers = tuple(int(v) for v in value)
        return dataclasses.replace(
            cfg, injection=dataclasses.replace(cfg.injection, layers=layers)
        )
    if axis == "mode":
        return dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, mode=str(value))
        )
    raise ContractError(f"unknown sweep axis {axis!r}")


def format_axis_value(axis: str, value) -> str:
    if axis == "layer_sets":
        return "+".join(str(int(v)) for v in value)
    return str(value)


def validate_sweep(cfg: ExperimentConfig, axis: str, values) -> None:
    """Reject bad axis values before any training starts."""
    if axis not in SWEEP_AXES:
        raise ContractError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ContractError("sweep needs at least one value")
    if axis == "template":
        for v in values:
            if v not in INIT_MODES:
                raise ContractError(f"template value {v!r} not in {INIT_MODES}")
    if axis == "mode":
        for v in values:
            if v not in MODES:
                raise ContractError(f"mode value {v!r} not in {MODES}")
    for v in values:
        apply_axis_value(cfg, axis, v).validate()


def _sweep_point(cfg_dict_axis_value_seed):
    """Worker for parallel sweeps; rebuilt from plain data to stay picklable."""
    from .config import config_from_dict

    cfg_dict, axis, value, seed = cfg_dict_axis_value_seed
    cfg = apply_axis_value(config_from_dict(cfg_dict), axis, value)
    row, _, _ = evaluate_seed(cfg, seed)
    return row


class SweepReport:
    def __init__(self, axis: str, values, seeds, rows, cfg: ExperimentConfig):
        self.axis = axis
        self.values = list(values)
        self.seeds = list(seeds)
        self.rows = rows  # dicts: value, seed, base, new, h
        self.config = cfg.to_dict()
        self.config_sha256 = config_hash(cfg)

    def to_csv(self) -> str:
        lines = ["axis,value,seed,base,new,h"]
        for r in self.rows:
            lines.append(
                f"{self.axis},{r['value']},{r['seed']},"
                f"{r['base']!r},{r['new']!r},{r['h']!r}"
            )
        return "\n".join(lines) + "\n"

    def aggregate(self):
        """Per-value means and stds, in sweep order."""
        out = []
        for value in self.values:
            key = format_axis_value(self.axis, value)
            sel = [r for r in self.rows if r["value"] == key]
            cols = {k: np.array([r[k] for r in sel]) for k in ("base", "new", "h")}
            out.append({
                "value": key,
                "mean": {k: float(v.mean()) for k, v in cols.items()},
                "std": {k: float(v.std()) for k, v in cols.items()},
            })
        return out

    def to_markdown(self) -> str:
        lines = [
            f"| {self.axis} | Base | New | H |",
            "|---|---|---|---|",
        ]
        for agg in self.aggregate():
            m, s = agg["mean"], agg["std"]
            lines.append(
                f"| {agg['value']} "
                f"| {100 * m['base']:.2f} ± {100 * s['base']:.2f} "
                f"| {100 * m['new']:.2f} ± {100 * s['new']:.2f} "
                f"| {100 * m['h']:.2f} ± {100 * s['h']:.2f} |"
            )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "format": "classprompt-sweep",
            "format_version": 1,
            "axis": self.axis,
            "values": [format_axis_value(self.axis, v) for v in self.values],
            "seeds": self.seeds,
            "rows": self.rows,
            "aggregate": self.aggregate(),
            "config": self.config,
            "config_sha256": self.config_sha256,
            "tool_version": TOOL_VERSION,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def run_sweep(cfg: ExperimentConfig, axis: str, values, seeds,
              jobs: int = 1, row_sink=None) -> SweepReport:
    if not seeds:
        raise ContractError("seeds list must not be empty")
    cfg = cfg.validate()
    validate_sweep(cfg, axis, values)
    points = [(value, seed) for value in values for seed in seeds]
    rows = []
    if jobs <= 1:
        results = []
        for value, seed in points:
            point_cfg = apply_axis_value(cfg, axis, value)
            row, _, _ = evaluate_seed(point_cfg, seed)
            results.append(row)
            if row_sink is not None:
                row_sink(_sweep_row(axis, value, row))
    else:
        cfg_dict = cfg.to_dict()
        args = [(cfg_dict, axis, value, seed) for value, seed in points]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, args))
        if row_sink is not None:
            for (value, _), row in zip(points, results):
                row_sink(_sweep_row(axis, value, row))
    for (value, _), row in zip(points, results):
        rows.append(_sweep_row(axis, value, row))
    return SweepReport(axis, values, seeds, rows, cfg)


def _sweep_row(axis, value, row) -> dict:
    return {
        "value": format_axis_value(axis, value),
        "seed": row["seed"],
        "base": row["base"],
        "new": row["new"],
        "h": row["h"],
    }


def write_report(report, out_path) -> None:
    Path(out_path).write_text(report.to_json())


def write_sweep_files(report: SweepReport, out_dir) -> None:
    out = Path(out_dir)
    (out / "sweep.csv").write_text(report.to_csv())
    (out / "table.md").write_text(report.to_markdown())
    (out / "report.json").write_text(report.to_json())
