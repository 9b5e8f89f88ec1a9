import numpy as np
import pytest

from aseg.core import functional as F
from aseg.core.gradcheck import check_gradient
from aseg.core.tensor import Parameter, ShapeError, Tensor, backward, no_grad
from aseg.diffusion import (ClassProjection, ClassPrompt, DiffusionConfig, PromptEncoder, encode_prompts,
                            forward_diffuse, noise_schedule, noise_std, one_hot, project_class)
from conftest import t64


@pytest.fixture(scope="module")
def F_I():
    return Tensor(np.random.default_rng(0).random((2, 32, 16, 16)) * 2.0)


@pytest.fixture
def encoder():
    return PromptEncoder(4, np.random.default_rng(0))


class TestClassPrompt:
    def test_one_hot(self):
        v = ClassPrompt(2, 4).one_hot
        assert v.tolist() == [0, 0, 1, 0]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ClassPrompt(4, 4)
        with pytest.raises(ValueError):
            one_hot([0, 5], 4)


class TestProjection:
    def test_zero_weights_zero_map(self, rng):
        proj = ClassProjection(4, 16, 16, rng)
        proj.proj.weight.data[:] = 0
        proj.proj.bias.data[:] = 0
        for c in range(4):
            assert np.all(project_class(proj, ClassPrompt(c, 4)).data == 0)

    def test_distinct_classes_and_shape(self, rng):
        proj = ClassProjection(4, 16, 16, rng)
        a, b = project_class(proj, ClassPrompt(0, 4)), project_class(proj, ClassPrompt(1, 4))
        assert a.shape == (1, 1, 16, 16)
        assert np.abs(a.data - b.data).max() > 0

    def test_class_count_mismatch(self, rng):
        with pytest.raises(ShapeError):
            project_class(ClassProjection(4, 4, 4, rng), ClassPrompt(0, 3))


class TestSchedule:
    @pytest.mark.parametrize("t,sigma", [(0, 1.0), (1, 0.5), (9, 0.1)])
    def test_values(self, t, sigma):
        assert noise_schedule(t) == sigma

    def test_exact_over_range(self):
        assert all(noise_schedule(t) == 1.0 / (t + 1) for t in range(10001))

    def test_negative(self):
        with pytest.raises(ValueError):
            noise_schedule(-1)

    def test_variance_mode(self):
        assert noise_std(3, "variance") == pytest.approx(0.5)
        assert noise_std(3, "std") == 0.25

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DiffusionConfig(T=0)
        with pytest.raises(ValueError):
            DiffusionConfig(variance_mode="both")


class TestForwardDiffuse:
    def test_vanishing_noise(self, F_I, rng):
        z = Tensor.zeros((2, 1, 16, 16))
        out = forward_diffuse(F_I, z, 10 ** 6, rng)
        assert np.abs(out.data - F_I.data).max() < 1e-2

    def test_stubbed_noise(self):
        out = forward_diffuse(Tensor.zeros((1, 3, 4, 4)), Tensor(np.full((1, 1, 4, 4), 0.5)), 0,
                              noise=np.zeros((1, 3, 4, 4)))
        assert np.all(out.data == 0.5)

    @pytest.mark.parametrize("t", [0, 1, 4, 9])
    def test_noise_std_monte_carlo(self, t):
        n = 10 ** 5
        base = Tensor.zeros((1, n, 1, 1))
        rng = np.random.default_rng(100 + t)
        eps = forward_diffuse(base, Tensor.zeros((1, 1, 1, 1)), t, rng).data.astype(np.float64)
        assert abs(eps.std() / noise_schedule(t) - 1.0) < 0.02

    def test_t1_std_half(self):
        rng = np.random.default_rng(1)
        eps = forward_diffuse(Tensor.zeros((1, 10 ** 5, 1, 1)), Tensor.zeros((1, 1, 1, 1)), 1, rng).data
        assert abs(eps.std() - 0.5) < 0.01

    def test_per_sample_steps(self):
        noise = np.ones((2, 1, 1, 1))
        out = forward_diffuse(Tensor.zeros((2, 1, 1, 1)), Tensor.zeros((2, 1, 1, 1)), np.array([0, 3]), noise=noise)
        assert out.data.ravel().tolist() == [1.0, 0.25]

    def test_shape_mismatch(self, F_I, rng):
        with pytest.raises(ShapeError):
            forward_diffuse(F_I, Tensor.zeros((2, 1, 8, 8)), 0, rng)


class TestEncoderStages:
    def test_encode_features_zero(self, encoder):
        with no_grad():
            for p in encoder.parameters():
                if p.name.endswith("bias"):
                    p.data[:] = 0
        feats = encoder.encode_features(Tensor.zeros((1, 32, 16, 16)))
        assert len(feats) == 3 and all(np.all(f.data == 0) for f in feats)
        assert [f.shape for f in feats] == [(1, 32, 8, 8), (1, 64, 4, 4), (1, 64, 4, 4)]

    def test_encode_features_gradient(self):
        enc = PromptEncoder(2, np.random.default_rng(5), H_e=8, W_e=8, C=8)
        for p in enc.parameters():
            p.data = p.data.astype(np.float64)
        r = np.random.default_rng(6)
        x = r.normal(size=(1, 8, 8, 8))
        w = [r.normal(size=s) for s in [(1, 32, 4, 4), (1, 64, 2, 2), (1, 64, 2, 2)]]

        def f(t):
            fs = enc.encode_features(t)
            return F.sum(fs[0] * t64(w[0])) + F.sum(fs[1] * t64(w[1])) + F.sum(fs[2] * t64(w[2]))

        assert check_gradient(f, x) < 1e-3

    def _parts(self, encoder, F_I, cls=(0, 1)):
        oh = one_hot(list(cls), 4)
        _, c_p = encoder.class_maps(oh)
        feats = encoder.encode_features(F_I)
        return feats, c_p

    def test_dense_gate_identity(self, encoder, F_I):
        feats, c_p = self._parts(encoder, F_I)
        ones = Tensor.ones(feats[2].shape)
        out = encoder.dense_branch(feats, F_I, c_p, gate=ones)
        ref = encoder.dense_dec(feats[2], feats, F_I)
        assert out.data.tobytes() == ref.data.tobytes()

    def test_dense_gate_zero(self, encoder, F_I):
        feats, _ = self._parts(encoder, F_I)
        gated = feats[2] * Tensor.zeros(feats[2].shape)
        assert np.all(gated.data == 0)

    def test_sparse_gate_range_and_identity(self, encoder, F_I):
        feats, c_p = self._parts(encoder, F_I)
        gate = encoder.sparse_gate(feats, c_p)
        assert gate.shape == (2, 64, 1, 1)
        assert np.all((gate.data > 0) & (gate.data < 1))
        a = encoder.sparse_branch(feats, F_I, c_p, gate=Tensor.ones(gate.shape))
        x = encoder.sparse_dec(feats[2], feats, F_I)
        pooled = F.reshape(F.adaptive_avg_pool(x), (2, 32))
        b = F.reshape(encoder.sparse_tokens(pooled), (2, 2, 32))
        assert a.data.tobytes() == b.data.tobytes()

    def test_channel_scaling_loop_oracle(self, encoder, F_I):
        feats, c_p = self._parts(encoder, F_I)
        gate = encoder.sparse_gate(feats, c_p)
        scaled = (feats[2] * F.expand(gate, feats[2].shape)).data
        ref = np.empty_like(scaled)
        for b in range(2):
            for ch in range(64):
                ref[b, ch] = feats[2].data[b, ch] * gate.data[b, ch, 0, 0]
        np.testing.assert_array_equal(scaled, ref)

    def test_class_changes_dense(self, encoder, F_I):
        a = encoder(F_I, [0, 0]).dense.data
        b = encoder(F_I, [2, 2]).dense.data
        assert np.abs(a - b).max() > 0


class TestEncodePrompts:
    def test_shapes(self, encoder, F_I):
        pr = encode_prompts(encoder, F_I, ClassPrompt(1, 4))
        assert pr.sparse.shape == (2, 2, 32) and pr.dense.shape == (2, 32, 16, 16)

    def test_infer_deterministic(self, encoder, F_I):
        a, b = encoder(F_I, [0, 3]), encoder(F_I, [0, 3])
        assert a.sparse.data.tobytes() == b.sparse.data.tobytes()
        assert a.dense.data.tobytes() == b.dense.data.tobytes()

    def test_train_reproducible_with_seed(self, encoder, F_I):
        a = encoder(F_I, [0, 1], mode="train", rng=np.random.default_rng(3))
        b = encoder(F_I, [0, 1], mode="train", rng=np.random.default_rng(3))
        c = encoder(F_I, [0, 1], mode="train", rng=np.random.default_rng(4))
        assert a.dense.data.tobytes() == b.dense.data.tobytes()
        assert a.dense.data.tobytes() != c.dense.data.tobytes()

    def test_bad_mode(self, encoder, F_I):
        with pytest.raises(ValueError):
            encoder(F_I, [0, 1], mode="eval")

    def test_wrong_embedding_shape(self, encoder):
        with pytest.raises(ShapeError):
            encoder(Tensor.zeros((1, 16, 16, 16)), [0])

    def test_no_dead_parameters(self, encoder, F_I):
        pr = encoder(F_I, [0, 2], mode="train", rng=np.random.default_rng(0))
        r = np.random.default_rng(1)
        loss = F.sum(pr.sparse * Tensor(r.normal(size=pr.sparse.shape))) + \
            F.sum(pr.dense * Tensor(r.normal(size=pr.dense.shape)))
        backward(loss)
        dead = [n for n, p in encoder.named_parameters() if p.grad is None or not np.any(p.grad)]
        assert dead == []

    @pytest.mark.parametrize("mode,sparse_zero", [("dense", True), ("sparse", False)])
    def test_single_branch_modes(self, F_I, mode, sparse_zero):
        enc = PromptEncoder(4, np.random.default_rng(0), branch_mode=mode)
        pr = enc(F_I, [0, 1])
        assert pr.sparse.shape == (2, 2, 32) and pr.dense.shape == (2, 32, 16, 16)
        if sparse_zero:
            assert np.all(pr.sparse.data == 0) and not pr.sparse_generated
        else:
            assert np.all(pr.dense.data == pr.dense.data[:, :, :1, :1]) and not pr.dense_generated

    def test_shared_parts_identical_across_modes(self):
        a = PromptEncoder(4, np.random.default_rng(0), branch_mode="both")
        b = PromptEncoder(4, np.random.default_rng(0), branch_mode="dense")
        sa, sb = a.state_dict(), b.state_dict()
        for k in sb:
            if k in sa:
                np.testing.assert_array_equal(sa[k], sb[k])

    def test_diffusion_disabled_uses_clean_embedding(self, F_I):
        enc = PromptEncoder(4, np.random.default_rng(0), config=DiffusionConfig(enabled=False))
        a = enc(F_I, [0, 1], mode="train", rng=np.random.default_rng(1))
        b = enc(F_I, [0, 1], mode="train", rng=np.random.default_rng(2))
        assert a.dense.data.tobytes() == b.dense.data.tobytes()
