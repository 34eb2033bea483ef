"""Self-contained correctness checks: gradient verification and selftest.

The gradient check builds the entire training loss on a deliberately
tiny configuration and compares every analytic gradient coordinate
against central finite differences. The selftest runs a fixed list of
fast invariant checks and prints one PASS/FAIL line each; it is the
same battery the test suite runs, packaged for the command line.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .config import ExperimentConfig
from .encoder import EncoderConfig, FrozenEncoder, build_vocabulary, frozen_class_embeddings
from .evaluation import harmonic_mean
from .losses import LossConfig, consistency_loss, contrastive_loss, total_loss
from .prompts import InjectionConfig, PromptConfig, build_classifier, inject_prompts
from .tasks import TaskConfig, base_new_split, generate_task, load_dataset, save_dataset
from .training import init_trainer

GRADCHECK_TOLERANCE = 1e-4


def tiny_config() -> ExperimentConfig:
    """Small enough that exhaustive finite differences stay fast."""
    return ExperimentConfig(
        encoder=EncoderConfig(num_layers=2, token_dim=8, num_heads=2,
                              mlp_ratio=2, output_dim=8, vocab_size=64,
                              weight_seed=11),
        task=TaskConfig(num_classes=4, shots_per_class=4, test_per_class=4,
                        task_seed=3),
        prompt=PromptConfig(length=2, d_mid=2),
        injection=InjectionConfig(layers=(2,), fusion_weight=1.0),
        loss=LossConfig(),
        train=dataclasses.replace(
            ExperimentConfig().train, mode="tcp", run_seed=5),
    ).validate()


def full_pipeline_loss_closure(cfg: ExperimentConfig = None, batch_size: int = 8):
    """Returns (f, params) where f(params) is the complete training loss.

    f rebuilds the classifier and both loss terms from scratch on every
    call, reading the current values of the parameter tensors, which is
    exactly what finite differencing needs.
    """
    cfg = (cfg or tiny_config()).validate()
    encoder = FrozenEncoder(cfg.encoder)
    vocab = build_vocabulary(
        cfg.task.num_classes, cfg.task.class_token_len, cfg.prompt.length,
        cfg.encoder.vocab_size, cfg.task.task_seed,
    )
    anchors = frozen_class_embeddings(encoder, vocab)
    train_ds, _, _ = generate_task(cfg.task, encoder, vocab)
    base_ids, _ = base_new_split(cfg.task)
    vocab_base = vocab.subset(base_ids)
    anchors_base = Tensor(anchors.data[list(base_ids)])
    xb = Tensor(train_ds.features[:batch_size])
    yb = train_ds.labels[:batch_size]

    state = init_trainer(cfg.train.mode, cfg.prompt, cfg.injection, encoder,
                         cfg.train.run_seed)
    named = state.named_params()
    params = [p for _, p in named]
    omega = cfg.loss.consistency_weight

    def f(_params):
        learned = build_classifier(
            state.shared, state.adapter, state.injection,
            anchors_base, encoder, vocab_base,
        )
        ce = contrastive_loss(xb, yb, learned, cfg.loss.temperature)
        kg = consistency_loss(anchors_base, learned)
        return total_loss(ce, kg, omega)

    return f, params, [name for name, _ in named]


def run_gradcheck(cfg: ExperimentConfig = None, h: float = 1e-5):
    """Max relative gradient error of the full loss over every coordinate."""
    f, params, names = full_pipeline_loss_closure(cfg)
    worst = finite_diff_check(f, params, h=h)
    total = sum(p.data.size for p in params)
    return worst, total, names


# -- selftest battery -------------------------------------------------------------


def _check_matmul_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))
    got = (Tensor(a) @ Tensor(b)).data
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            s = 0.0
            for p in range(4):
                s += a[i, p] * b[p, j]
            want[i, j] = s
    assert np.array_equal(got, want), "matmul differs from triple-loop oracle"


def _check_softmax_rows():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(-1e3, 1e3, (8, 16)))
    s = ad.softmax(x).data
    assert np.all(s >= 0) and np.abs(s.sum(axis=1) - 1).max() < 1e-12


def _check_layer_norm_gradients():
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(-1, 1, (2, 6)), requires_grad=True)
    g = Tensor(rng.uniform(-1, 1, 6), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, 6), requires_grad=True)

    def f(_):
        return (ad.layer_norm(x, g, b) ** 2.0).sum()

    assert finite_diff_check(f, [x, g, b]) < 1e-6


def _check_encoder_determinism():
    cfg = tiny_config().encoder
    a, b = FrozenEncoder(cfg), FrozenEncoder(cfg)
    assert a.checksum() == b.checksum()


def _check_forward_composition():
    cfg = tiny_config()
    enc = FrozenEncoder(cfg.encoder)
    x = Tensor(np.linspace(-1, 1, 2 * cfg.encoder.seq_len * cfg.encoder.token_dim)
               .reshape(2, cfg.encoder.seq_len, cfg.encoder.token_dim))
    L = cfg.encoder.num_layers
    whole = enc.forward_range(x, 1, L).data
    for l in range(1, L + 1):
        first = enc.forward_range(x, 1, l)
        rest = enc.forward_range(first, l + 1, L)
        assert np.array_equal(rest.data, whole)


def _check_adapter_oracle():
    from .prompts import ClassPromptAdapter

    rng = np.random.default_rng(3)
    n_c, d_t, d_mid, m, d = 2, 3, 2, 2, 2
    w = rng.uniform(-1, 1, (n_c, d_t))
    adapter = ClassPromptAdapter.build(d_t, d_mid, m, d, seed=9)
    got = adapter.generate(Tensor(w)).data
    down, up = adapter.down_proj.data, adapter.up_proj.data
    want = np.zeros((n_c, m, d))
    for c in range(n_c):
        hid = np.maximum(w[c] @ down, 0.0)
        flat = hid @ up
        for i in range(m):
            for j in range(d):
                want[c, i, j] = flat[i * d + j]
    assert np.abs(got - want).max() < 1e-12


def _check_injection_identities():
    rng = np.random.default_rng(4)
    f_l = Tensor(rng.uniform(-1, 1, (3, 6, 4)))
    t = Tensor(rng.uniform(-1, 1, (3, 2, 4)))
    lam1 = inject_prompts(f_l, t, 1.0).data
    assert np.array_equal(lam1[:, :2], t.data) and np.array_equal(lam1[:, 2:], f_l.data[:, 2:])
    lam0 = inject_prompts(f_l, t, 0.0)
    assert lam0 is f_l


def _check_loss_reductions():
    one = Tensor(np.array([[1.0, 0.0]]))
    assert contrastive_loss(one, [0], one, 0.01).item() == 0.0
    x = Tensor(np.array([[1.0, 0.0]]))
    w = Tensor(np.array([[np.sqrt(0.5), np.sqrt(0.5)], [np.sqrt(0.5), -np.sqrt(0.5)]]))
    assert abs(contrastive_loss(x, [0], w, 0.5).item() - np.log(2.0)) < 1e-12
    ce = Tensor(np.array(0.5))
    kg = Tensor(np.array(0.25))
    assert total_loss(ce, kg, 0.0) is ce
    assert abs(total_loss(ce, kg, 8.0).item() - 2.5) == 0.0
    same = Tensor(np.eye(3)[:2])
    assert consistency_loss(same, same).item() == 0.0


def _check_harmonic_mean_pins():
    assert abs(harmonic_mean(82.38, 67.96) - 74.48) < 0.01
    assert abs(harmonic_mean(80.73, 73.6) - 77.00) < 0.01


def _check_dataset_roundtrip(tmp_dir):
    cfg = tiny_config()
    enc = FrozenEncoder(cfg.encoder)
    vocab = build_vocabulary(cfg.task.num_classes, cfg.task.class_token_len,
                             cfg.prompt.length, cfg.encoder.vocab_size,
                             cfg.task.task_seed)
    train_ds, _, _ = generate_task(cfg.task, enc, vocab)
    stem = tmp_dir / "roundtrip"
    save_dataset(train_ds, stem)
    loaded = load_dataset(stem)
    assert np.array_equal(loaded.features, train_ds.features)
    assert np.array_equal(loaded.labels, train_ds.labels)


def _check_full_gradcheck():
    worst, _, _ = run_gradcheck()
    assert worst < GRADCHECK_TOLERANCE, f"max relative error {worst:.3e}"


def run_selftest(print_fn=print) -> bool:
    """Run every check, print a PASS/FAIL table, return overall success."""
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        tmp_dir = Path(tmp)
        checks = [
            ("matmul triple-loop oracle", _check_matmul_oracle),
            ("softmax row sums", _check_softmax_rows),
            ("layer_norm gradients", _check_layer_norm_gradients),
            ("encoder determinism", _check_encoder_determinism),
            ("forward composition law", _check_forward_composition),
            ("class-prompt adapter oracle", _check_adapter_oracle),
            ("injection endpoint identities", _check_injection_identities),
            ("loss reductions", _check_loss_reductions),
            ("harmonic mean pins", _check_harmonic_mean_pins),
            ("dataset roundtrip", lambda: _check_dataset_roundtrip(tmp_dir)),
            ("full-pipeline gradient check", _check_full_gradcheck),
        ]
        all_ok = True
        for name, check in checks:
            try:
                check()
                print_fn(f"PASS  {name}")
            except Exception as err:  # deliberate: report, keep going
                all_ok = False
                print_fn(f"FAIL  {name}: {err}")
        return all_ok
