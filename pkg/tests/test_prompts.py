import dataclasses

import numpy as np
import pytest

from classprompt.autodiff import Tensor
from classprompt.encoder import (
    EncoderConfig,
    FrozenEncoder,
    build_vocabulary,
    frozen_class_embeddings,
)
from classprompt.errors import ConfigError, ContractError
from classprompt.prompts import (
    ClassPromptAdapter,
    InjectionConfig,
    SharedPrompt,
    assemble_inputs,
    build_classifier,
    default_insert_layer,
    inject_prompts,
    trainable_parameters,
)

M, K_C, D = 2, 3, 8


@pytest.fixture(scope="module")
def enc():
    return FrozenEncoder(EncoderConfig(num_layers=3, token_dim=D, num_heads=2,
                                       mlp_ratio=2, output_dim=D, vocab_size=64,
                                       seq_len=M + K_C + 1, weight_seed=5))


@pytest.fixture(scope="module")
def vocab():
    return build_vocabulary(4, K_C, M, 64, task_seed=9)


@pytest.fixture(scope="module")
def anchors(enc, vocab):
    return frozen_class_embeddings(enc, vocab)


def make_shared(enc, seed=1):
    return SharedPrompt.build(M, D, "random", enc, seed)


def make_adapter(seed=2, d_mid=2, linear=False):
    return ClassPromptAdapter.build(D, d_mid, M, D, seed, linear=linear)


class TestAdapter:
    def test_zero_down_projection_annihilates(self, anchors):
        adapter = make_adapter()
        zero_down = ClassPromptAdapter(
            Tensor(np.zeros((D, 2)), requires_grad=True),
            adapter.up_proj, M, D,
        )
        out = zero_down.generate(anchors).data
        assert np.array_equal(out, np.zeros_like(out))

    def test_paper_scale_shapes(self):
        adapter = ClassPromptAdapter.build(512, 128, 4, 512, seed=0)
        w = Tensor(np.random.default_rng(0).uniform(-1, 1, (100, 512)))
        assert adapter.generate(w).data.shape == (100, 4, 512)

    def test_matches_loop_and_reshape_oracle(self):
        # DERIVED oracle: per-class loops, explicit flat index arithmetic
        rng = np.random.default_rng(4)
        n_c, d_t, d_mid, m, d = 2, 3, 2, 2, 2
        adapter = ClassPromptAdapter.build(d_t, d_mid, m, d, seed=11)
        w = rng.uniform(-1, 1, (n_c, d_t))
        got = adapter.generate(Tensor(w)).data
        down, up = adapter.down_proj.data, adapter.up_proj.data
        want = np.zeros((n_c, m, d))
        for c in range(n_c):
            hidden = np.maximum(w[c] @ down, 0.0)
            flat = hidden @ up
            for i in range(m):
                for j in range(d):
                    want[c, i, j] = flat[i * d + j]
        assert np.abs(got - want).max() < 1e-12

    def test_rows_depend_only_on_own_class(self, anchors):
        adapter = make_adapter()
        full = adapter.generate(anchors).data
        swapped = anchors.data.copy()
        swapped[[0, 1]] = swapped[[1, 0]]
        out = adapter.generate(Tensor(swapped)).data
        assert np.array_equal(out[0], full[1])
        assert np.array_equal(out[2:], full[2:])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            ClassPromptAdapter(
                Tensor(np.zeros((D, 2)), requires_grad=True),
                Tensor(np.zeros((2, M * D + 1)), requires_grad=True),
                M, D,
            )

    def test_linear_mode_skips_relu(self, anchors):
        linear = make_adapter(linear=True)
        got = linear.generate(anchors).data
        want = (anchors.data @ linear.down_proj.data @ linear.up_proj.data)
        assert np.abs(got - want.reshape(got.shape)).max() < 1e-12


class TestAssemble:
    def test_prompt_positions_shared_across_classes(self, enc, vocab):
        shared = make_shared(enc)
        out = assemble_inputs(shared, vocab, enc).data
        for c in range(1, 4):
            assert np.array_equal(out[0, :M], out[c, :M])
        assert np.array_equal(out[0, :M], shared.tokens.data)

    def test_class_positions_match_embeddings(self, enc, vocab):
        out = assemble_inputs(make_shared(enc), vocab, enc).data
        for c, ids in enumerate(vocab.class_token_ids):
            assert np.array_equal(out[c, M:M + K_C], enc.embed_tokens(ids).data)
            assert np.array_equal(out[c, -1], enc.embed_tokens([vocab.eot_id]).data[0])

    def test_shape(self, enc, vocab):
        out = assemble_inputs(make_shared(enc), vocab, enc)
        assert out.shape == (4, M + K_C + 1, D)

    def test_length_mismatch_rejected(self, enc):
        bad_vocab = build_vocabulary(4, K_C + 1, M, 64, task_seed=9)
        with pytest.raises(ContractError):
            assemble_inputs(make_shared(enc), bad_vocab, enc)


class TestInjection:
    def setup_method(self):
        rng = np.random.default_rng(6)
        self.f_l = Tensor(rng.uniform(-1, 1, (3, 6, 4)))
        self.t = Tensor(rng.uniform(-1, 1, (3, 2, 4)))

    def test_full_replacement(self):
        out = inject_prompts(self.f_l, self.t, 1.0).data
        assert np.array_equal(out[:, :2], self.t.data)
        assert np.array_equal(out[:, 2:], self.f_l.data[:, 2:])

    def test_zero_weight_returns_input_unchanged(self):
        assert inject_prompts(self.f_l, self.t, 0.0) is self.f_l

    def test_midpoint(self):
        ones = Tensor(np.ones((3, 2, 4)))
        zeros = Tensor(np.zeros((3, 6, 4)))
        out = inject_prompts(zeros, ones, 0.5).data
        assert np.array_equal(out[:, :2], np.full((3, 2, 4), 0.5))

    def test_weight_bounds(self):
        with pytest.raises(ContractError):
            inject_prompts(self.f_l, self.t, 1.5)

    def test_prompt_longer_than_sequence_rejected(self):
        t_long = Tensor(np.zeros((3, 7, 4)))
        with pytest.raises(ContractError):
            inject_prompts(self.f_l, t_long, 1.0)


class TestInjectionConfig:
    def test_default_insert_layer(self):
        assert default_insert_layer(6) == 4
        assert default_insert_layer(12) == 8
        assert default_insert_layer(2) == 2

    def test_layers_strictly_increasing(self):
        with pytest.raises(ConfigError):
            InjectionConfig(layers=(3, 2)).validate(6)
        with pytest.raises(ConfigError):
            InjectionConfig(layers=(2, 2)).validate(6)

    def test_layer_bounds(self):
        with pytest.raises(ConfigError):
            InjectionConfig(layers=(7,)).validate(6)
        InjectionConfig(layers=(1, 6)).validate(6)


class TestBuildClassifier:
    def test_no_adapter_ignores_injection(self, enc, vocab, anchors):
        shared = make_shared(enc)
        a = build_classifier(shared, None, InjectionConfig(layers=(1,)),
                             anchors, enc, vocab)
        b = build_classifier(shared, None, InjectionConfig(layers=(3,), fusion_weight=0.3),
                             anchors, enc, vocab)
        assert np.array_equal(a.data, b.data)

    def test_last_layer_injection_feeds_only_readout(self, enc, vocab, anchors):
        shared = make_shared(enc)
        adapter = make_adapter()
        inj = InjectionConfig(layers=(3,))
        got = build_classifier(shared, adapter, inj, anchors, enc, vocab)
        tokens = assemble_inputs(shared, vocab, enc)
        manual = enc.forward_range(tokens, 1, 3)
        manual = inject_prompts(manual, adapter.generate(anchors), 1.0)
        want = enc.readout(manual)
        assert np.array_equal(got.data, want.data)

    def test_class_permutation_equivariance(self, enc, vocab, anchors):
        # DERIVED oracle: permuting classes permutes classifier rows
        shared = make_shared(enc)
        adapter = make_adapter()
        inj = InjectionConfig(layers=(2,))
        full = build_classifier(shared, adapter, inj, anchors, enc, vocab).data
        perm = [1, 0, 3, 2]
        swapped = build_classifier(
            shared, adapter, inj, Tensor(anchors.data[perm]), enc,
            vocab.subset(perm),
        ).data
        assert np.array_equal(swapped, full[perm])

    def test_unseen_class_subset_works(self, enc, vocab, anchors):
        shared = make_shared(enc)
        adapter = make_adapter()
        inj = InjectionConfig(layers=(2,))
        sub = vocab.subset([2, 3])
        out = build_classifier(shared, adapter, inj,
                               Tensor(anchors.data[[2, 3]]), enc, sub)
        assert out.data.shape == (2, D)
        full = build_classifier(shared, adapter, inj, anchors, enc, vocab).data
        assert np.array_equal(out.data, full[[2, 3]])

    def test_fusion_endpoints_whole_pipeline(self, enc, vocab, anchors):
        shared = make_shared(enc)
        adapter = make_adapter()
        lam0 = build_classifier(shared, adapter,
                                InjectionConfig(layers=(2,), fusion_weight=0.0),
                                anchors, enc, vocab)
        plain = build_classifier(shared, None, InjectionConfig(layers=(2,)),
                                 anchors, enc, vocab)
        assert np.array_equal(lam0.data, plain.data)

    def test_gradients_reach_only_trainables(self, enc, vocab, anchors):
        shared = make_shared(enc)
        adapter = make_adapter()
        inj = InjectionConfig(layers=(2,))
        out = build_classifier(shared, adapter, inj, anchors, enc, vocab)
        (out * out).sum().backward()
        for name, p in trainable_parameters(shared, adapter):
            assert p.grad is not None and np.abs(p.grad).max() > 0, name
        assert anchors.grad is None
        for t in enc.weight_tensors():
            assert t.grad is None

    def test_zero_down_proj_removes_class_dependence_of_injection(self, enc, vocab, anchors):
        """Domain-shared-only semantics: injected tokens become class-blind."""
        shared = make_shared(enc)
        adapter = make_adapter()
        zero_adapter = ClassPromptAdapter(
            Tensor(np.zeros(adapter.down_proj.shape), requires_grad=True),
            adapter.up_proj, M, D,
        )
        inj = InjectionConfig(layers=(2,))
        base = build_classifier(shared, zero_adapter, inj, anchors, enc, vocab).data
        shuffled = build_classifier(
            shared, zero_adapter, inj,
            Tensor(anchors.data[[3, 2, 1, 0]]), enc, vocab,
        ).data
        assert np.array_equal(base, shuffled)

    def test_multi_layer_injection_reuses_one_adapter_output(self, enc, vocab, anchors):
        shared = make_shared(enc)
        adapter = make_adapter()
        inj = InjectionConfig(layers=(1, 2, 3))
        got = build_classifier(shared, adapter, inj, anchors, enc, vocab)
        t = adapter.generate(anchors)
        tokens = assemble_inputs(shared, vocab, enc)
        for l in (1, 2, 3):
            tokens = enc.forward_range(tokens, l, l)
            tokens = inject_prompts(tokens, t, 1.0)
        want = enc.readout(tokens)
        assert np.array_equal(got.data, want.data)
