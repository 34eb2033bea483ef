import numpy as np
import pytest

from classprompt.autodiff import Tensor, finite_diff_check
from classprompt.errors import ConfigError, ContractError
from classprompt.losses import (
    LossConfig,
    consistency_loss,
    contrastive_loss,
    total_loss,
)
from classprompt.rng import rotation_matrix


def unit_rows(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return arr / np.sqrt((arr ** 2).sum(axis=1, keepdims=True))


def random_unit(shape, seed):
    return unit_rows(np.random.default_rng(seed).uniform(-1, 1, shape))


class TestContrastive:
    def test_single_class_is_exactly_zero(self):
        x = Tensor([[1.0, 0.0]])
        assert contrastive_loss(x, [0], x, 0.01).item() == 0.0

    def test_equidistant_two_classes_is_ln2(self):
        x = Tensor([[1.0, 0.0]])
        w = Tensor(unit_rows([[1.0, 1.0], [1.0, -1.0]]))
        got = contrastive_loss(x, [0], w, 0.07).item()
        assert abs(got - np.log(2.0)) < 1e-12

    def test_matches_high_precision_oracle(self):
        # DERIVED oracle: softmax cross-entropy in mpmath at 50 digits
        import mpmath

        mpmath.mp.dps = 50
        x = random_unit((6, 8), seed=1)
        w = random_unit((4, 8), seed=2)
        labels = [0, 1, 2, 3, 1, 0]
        tau = 0.01
        got = contrastive_loss(Tensor(x), labels, Tensor(w), tau).item()
        total = mpmath.mpf(0)
        for i, y in enumerate(labels):
            logits = [mpmath.mpf(float(x[i] @ w[j])) / tau for j in range(4)]
            mx = max(logits)
            exps = [mpmath.e ** (l - mx) for l in logits]
            p = exps[y] / sum(exps)
            total += -mpmath.log(p)
        want = float(total / len(labels))
        assert abs(got - want) < 1e-10

    def test_nonnegative_and_zero_iff_certain(self):
        x = random_unit((5, 6), seed=3)
        w = random_unit((3, 6), seed=4)
        val = contrastive_loss(Tensor(x), [0, 1, 2, 0, 1], Tensor(w), 0.05).item()
        assert val > 0.0

    def test_rotation_invariance(self):
        x = random_unit((6, 8), seed=5)
        w = random_unit((4, 8), seed=6)
        labels = [3, 2, 1, 0, 2, 3]
        base = contrastive_loss(Tensor(x), labels, Tensor(w), 0.02).item()
        for seed in (1, 2, 3):
            r = rotation_matrix(8, seed, 10.0)
            rotated = contrastive_loss(
                Tensor(x @ r.T), labels, Tensor(w @ r.T), 0.02
            ).item()
            assert abs(rotated - base) < 1e-9

    def test_rejects_non_unit_rows(self):
        bad = Tensor([[2.0, 0.0]])
        good = Tensor([[1.0, 0.0]])
        with pytest.raises(ContractError):
            contrastive_loss(bad, [0], good, 0.01)
        with pytest.raises(ContractError):
            contrastive_loss(good, [0], bad, 0.01)

    def test_rejects_bad_labels(self):
        x = Tensor([[1.0, 0.0]])
        with pytest.raises(ContractError):
            contrastive_loss(x, [1], x, 0.01)

    def test_gradients(self):
        from classprompt import autodiff as ad

        x = Tensor(random_unit((4, 6), seed=7))
        raw = Tensor(np.random.default_rng(8).uniform(-1, 1, (3, 6)),
                     requires_grad=True)

        def f(_):
            return contrastive_loss(x, [0, 1, 2, 1], ad.normalize_rows(raw), 0.1)

        assert finite_diff_check(f, [raw]) < 1e-6


class TestConsistency:
    def test_identical_is_zero(self):
        w = Tensor(random_unit((4, 8), seed=9))
        assert consistency_loss(w, w).item() == 0.0

    def test_orthonormal_pair_is_two(self):
        a = Tensor([[1.0, 0.0]])
        b = Tensor([[0.0, 1.0]])
        assert consistency_loss(a, b).item() == 2.0

    def test_matches_per_row_oracle(self):
        # DERIVED oracle: explicit per-row squared distances
        a = random_unit((5, 7), seed=10)
        b = random_unit((5, 7), seed=11)
        got = consistency_loss(Tensor(a), Tensor(b)).item()
        want = float(np.mean([((a[i] - b[i]) ** 2).sum() for i in range(5)]))
        assert abs(got - want) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            consistency_loss(Tensor(random_unit((2, 4), 1)),
                             Tensor(random_unit((3, 4), 2)))

    def test_range_bound_for_unit_rows(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            a = unit_rows(rng.uniform(-1, 1, (6, 5)))
            b = unit_rows(rng.uniform(-1, 1, (6, 5)))
            v = consistency_loss(Tensor(a), Tensor(b)).item()
            assert 0.0 <= v <= 4.0
        antipodal = consistency_loss(Tensor(a), Tensor(-a)).item()
        assert abs(antipodal - 4.0) < 1e-12


class TestTotal:
    def test_zero_weight_is_contrastive_bitwise(self):
        ce = Tensor(np.array(0.7315))
        kg = Tensor(np.array(0.413))
        assert total_loss(ce, kg, 0.0) is ce

    def test_paper_weight_arithmetic(self):
        ce = Tensor(np.array(0.5))
        kg = Tensor(np.array(0.25))
        assert total_loss(ce, kg, 8.0).item() == 2.5

    def test_zero_consistency_equals_ce(self):
        ce = Tensor(np.array(1.25))
        kg = Tensor(np.array(0.0))
        assert total_loss(ce, kg, 8.0).item() == ce.item()

    def test_negative_weight_rejected(self):
        ce = Tensor(np.array(1.0))
        with pytest.raises(ContractError):
            total_loss(ce, ce, -1.0)


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.temperature == 0.01
        assert cfg.consistency_weight == 8.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            LossConfig(temperature=0.0).validate()
        with pytest.raises(ConfigError):
            LossConfig(consistency_weight=-1.0).validate()
