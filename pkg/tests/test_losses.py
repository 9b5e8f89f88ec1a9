import math
import warnings

import numpy as np
import pytest

from aseg.core import functional as F
from aseg.core.gradcheck import check_gradient
from aseg.core.tensor import Parameter, ShapeError, Tensor, backward
from aseg.diffusion import PromptEmbeddings
from aseg.encoders import BoxPrompt, positional_encoding
from aseg.losses import (LAMBDA_FLOOR, ReferencePromptEmbeddings, UncertaintyWeights, box_cell_coverage, ce_loss,
                         dice_loss, make_teacher, mse_distill, shape_distance_loss, shape_distance_map,
                         uncertainty_aggregate)
from aseg.metrics import edt
from conftest import t64


def loop_dice(p, g):
    num = den_p = den_g = 0.0
    for a, b in zip(p.ravel(), g.ravel()):
        num += a * b
        den_p += a * a
        den_g += b * b
    return 1.0 - 2.0 * num / (den_p + den_g + 1e-6)


def loop_ce(p, g):
    acc = 0.0
    for a, b in zip(p.ravel(), g.ravel()):
        a = min(max(a, 1e-7), 1 - 1e-7)
        acc += b * math.log(a) + (1 - b) * math.log(1 - a)
    return -acc / p.size


def loop_mse(a, b):
    return sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size


def loop_sd(p, g):
    B, C = p.shape[:2]
    total = 0.0
    for b in range(B):
        for c in range(C):
            D = 1.0 - np.clip(edt(g[b, c]).grid / 10.0, 0, 1)
            num = sum(abs(d - q) for d, q in zip(D.ravel(), p[b, c].ravel()))
            total += num / max(p[b, c].sum() + 1e-6, 1.0)
    return total / (B * C)


def case(seed, shape=(2, 1, 8, 8)):
    r = np.random.default_rng(seed)
    p = r.uniform(0.01, 0.99, size=shape)
    g = (r.random(shape) < 0.4).astype(np.float64)
    g[..., 3, 3] = 1.0
    return p, g


class TestMSE:
    def test_zero_and_unit(self):
        s = Tensor(np.ones((2, 2, 4)))
        d = Tensor(np.ones((2, 4, 3, 3)))
        st = PromptEmbeddings(s, d)
        assert mse_distill(st, ReferencePromptEmbeddings(s.data, d.data)) == (0.0, 0.0) or \
            all(v.item() == 0 for v in mse_distill(st, ReferencePromptEmbeddings(s.data, d.data)))
        a, b = mse_distill(st, ReferencePromptEmbeddings(s.data - 1, d.data - 1))
        assert a.item() == 1.0 and b.item() == 1.0

    @pytest.mark.parametrize("seed", range(100))
    def test_loop_oracle(self, seed):
        r = np.random.default_rng(seed)
        s, d = r.normal(size=(2, 2, 4)), r.normal(size=(2, 3, 8, 8))
        rs, rd = r.normal(size=s.shape), r.normal(size=d.shape)
        a, b = mse_distill(PromptEmbeddings(t64(s), t64(d)), ReferencePromptEmbeddings(rs, rd))
        assert abs(a.item() - loop_mse(s, rs)) < 1e-6 and abs(b.item() - loop_mse(d, rd)) < 1e-6
        assert a.item() >= 0 and b.item() >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_distill(PromptEmbeddings(Tensor.zeros((1, 2, 4)), Tensor.zeros((1, 4, 2, 2))),
                        ReferencePromptEmbeddings(np.zeros((1, 2, 5)), np.zeros((1, 4, 2, 2))))


class TestDice:
    def test_perfect_and_disjoint(self):
        g = np.zeros((1, 1, 4, 4))
        g[0, 0, :2] = 1
        assert dice_loss(t64(g), g).item() < 1e-5
        assert abs(dice_loss(t64(1 - g), g).item() - 1.0) < 1e-5

    def test_half_example(self):
        g = np.zeros((1, 1, 4, 4))
        g[0, 0, :2] = 1
        p = np.full_like(g, 0.5)
        assert abs(dice_loss(t64(p), g).item() - loop_dice(p, g)) < 1e-12

    def test_degenerate_all_zero(self):
        z = np.zeros((1, 1, 3, 3))
        assert dice_loss(t64(z), z).item() == 1.0

    @pytest.mark.parametrize("seed", range(100))
    def test_loop_oracle_and_range(self, seed):
        p, g = case(seed)
        v = dice_loss(t64(p), g).item()
        assert abs(v - loop_dice(p, g)) < 1e-6 and 0.0 <= v <= 1.0 + 1e-6


class TestCE:
    def test_half_is_ln2(self):
        g = (np.arange(16).reshape(1, 1, 4, 4) % 2).astype(float)
        assert abs(ce_loss(t64(np.full(g.shape, 0.5)), g).item() - math.log(2)) < 1e-12

    def test_perfect_residual(self):
        g = (np.arange(16).reshape(1, 1, 4, 4) % 2).astype(float)
        assert 0.0 <= ce_loss(t64(g), g).item() < 1e-6

    @pytest.mark.parametrize("seed", range(100))
    def test_loop_oracle(self, seed):
        p, g = case(seed)
        v = ce_loss(t64(p), g).item()
        assert abs(v - loop_ce(p, g)) < 1e-6 and v >= 0


class TestShapeDistance:
    def test_map_values(self):
        m = np.zeros((30, 30), dtype=np.uint8)
        m[10:15, 10:15] = 1
        D = shape_distance_map(m)
        assert np.all(D[m > 0] == 1.0)
        assert D[10, 20] == pytest.approx(0.4) and D[0, 29] == 0.0

    def test_perfect_prediction_counts_band(self):
        g = np.zeros((1, 1, 24, 24))
        g[0, 0, 8:14, 8:14] = 1
        res = shape_distance_loss(t64(g), g)
        assert not res.degenerate
        assert res.value.item() == pytest.approx(loop_sd(g, g), rel=1e-6)
        D = shape_distance_map(g[0, 0])
        assert res.value.item() == pytest.approx(D[g[0, 0] == 0].sum() / 36.0, rel=1e-6)

    def test_zero_prediction_is_flagged_and_bounded(self):
        g = np.zeros((1, 1, 16, 16))
        g[0, 0, 4:8, 4:8] = 1
        res = shape_distance_loss(t64(np.zeros_like(g)), g)
        assert res.degenerate and np.isfinite(res.value.item())
        assert res.value.item() <= 16 * 16

    def test_full_gt(self):
        g = np.ones((1, 1, 6, 6))
        p = np.random.default_rng(0).uniform(0.2, 0.9, size=g.shape)
        ref = np.abs(1 - p).sum() / p.sum()
        assert shape_distance_loss(t64(p), g).value.item() == pytest.approx(ref, rel=1e-6)

    @pytest.mark.parametrize("seed", range(100))
    def test_loop_oracle(self, seed):
        p, g = case(seed)
        assert abs(shape_distance_loss(t64(p), g).value.item() - loop_sd(p, g)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            shape_distance_loss(t64(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 5)))


class TestAggregate:
    def test_spot_value(self):
        w = UncertaintyWeights(["A"])
        total, rep = uncertainty_aggregate([("A", t64(2.0))], w)
        assert abs(total.item() - (1 + math.log(2))) < 1e-6
        assert rep.reduction_error() < 1e-12

    def test_zero_members(self):
        w = UncertaintyWeights(["A", "B", "C"])
        total, _ = uncertainty_aggregate([(n, t64(0.0)) for n in "ABC"], w)
        assert abs(total.item() - 3 * math.log(2)) < 1e-9

    def test_lambda_gradient(self):
        w = UncertaintyWeights(["A"])
        L = t64(2.0, grad=True)
        total, _ = uncertainty_aggregate([("A", L)], w)
        backward(total)
        assert w["A"].grad == pytest.approx(-1.0, abs=1e-6)
        assert L.grad == pytest.approx(0.5)

    @pytest.mark.parametrize("seed", range(100))
    def test_lambda_gradient_fd(self, seed):
        r = np.random.default_rng(seed)
        Lv = r.uniform(0.1, 3.0)

        def f(lam):
            w = UncertaintyWeights(["A"])
            w.lambdas[0] = lam
            return uncertainty_aggregate([("A", t64(Lv))], w)[0]

        lam0 = r.uniform(0.3, 2.0) * r.choice([-1, 1])
        assert check_gradient(f, np.array(lam0)) < 1e-4
        analytic = -Lv / lam0 ** 3 + 2 * lam0 / (1 + lam0 ** 2)
        lt = Parameter(np.array(lam0), dtype=np.float64)
        backward(f(lt))
        assert lt.grad == pytest.approx(analytic, rel=1e-9)

    def test_monotone_in_members(self):
        w = UncertaintyWeights(["A", "B"])
        t1, _ = uncertainty_aggregate([("A", t64(1.0)), ("B", t64(2.0))], w)
        t2, _ = uncertainty_aggregate([("A", t64(0.9)), ("B", t64(2.0))], w)
        assert t2.item() < t1.item()

    def test_floor(self):
        w = UncertaintyWeights(["A"])
        w["A"].data = np.array(1e-5, dtype=np.float32)
        with pytest.warns(RuntimeWarning):
            total, rep = uncertainty_aggregate([("A", t64(1.0))], w)
        assert abs(float(w["A"].data)) == pytest.approx(LAMBDA_FLOOR)
        assert rep.warnings and np.isfinite(total.item())

    def test_unit_weight_fallback(self):
        total, rep = uncertainty_aggregate([("A", t64(1.5)), ("B", t64(0.5))], None, joint=False)
        assert total.item() == 2.0 and rep.members["A"]["weight"] == 1.0 and rep.lambdas == {}

    def test_report_json(self):
        import json

        w = UncertaintyWeights(["A", "B"])
        _, rep = uncertainty_aggregate([("A", t64(0.3)), ("B", t64(0.7))], w)
        d = json.loads(rep.to_json(step=4))
        assert d["step"] == 4 and set(d["members"]) == {"A", "B"}
        assert set(d["members"]["A"]) == {"raw", "weight", "reg"}

    def test_reduction_holds_in_float32(self):
        r = np.random.default_rng(0)
        w = UncertaintyWeights(list("ABCDE"))
        for p in w.lambdas:
            p.data = np.array(r.uniform(0.2, 2), dtype=np.float32)
        members = [(n, Tensor(np.array(r.uniform(0, 5)))) for n in "ABCDE"]
        _, rep = uncertainty_aggregate(members, w)
        assert rep.reduction_error() < 1e-6


@pytest.mark.parametrize("name", ["dice", "ce", "sd", "mse"])
def test_loss_gradients(name):
    worst = 0.0
    for seed in range(100):
        p, g = case(seed, shape=(1, 1, 5, 5))
        if name == "ce":
            p = np.clip(p, 0.1, 0.9)
        if name == "sd":
            # keep |D - p| away from its kink
            D = shape_distance_map(g[0, 0])[None, None]
            p = np.where(np.abs(p - D) < 0.01, D + 0.05, p)
        fn = {"dice": lambda t: dice_loss(t, g), "ce": lambda t: ce_loss(t, g),
              "sd": lambda t: shape_distance_loss(t, g).value,
              "mse": lambda t: mse_distill(PromptEmbeddings(t, t), ReferencePromptEmbeddings(g, g))[0]}[name]
        worst = max(worst, check_gradient(fn, p))
    assert worst < 1e-4


class TestTeacher:
    @pytest.fixture(scope="class")
    @staticmethod
    def teacher():
        return make_teacher(0, 4, positional_encoding(16, 16, 32))

    def test_deterministic(self, teacher):
        boxes = [BoxPrompt(4, 4, 20, 30)]
        a, b = teacher(boxes, [1]), teacher(boxes, [1])
        assert a.sparse.tobytes() == b.sparse.tobytes() and a.dense.tobytes() == b.dense.tobytes()
        assert a.sparse.shape == (1, 2, 32) and a.dense.shape == (1, 32, 16, 16)

    def test_distinct_boxes(self, teacher):
        a = teacher([BoxPrompt(4, 4, 20, 30)], [1])
        b = teacher([BoxPrompt(30, 10, 50, 40)], [1])
        assert np.abs(a.sparse - b.sparse).max() > 0 and np.abs(a.dense - b.dense).max() > 0

    def test_frozen(self, teacher):
        assert all(p.frozen for p in teacher.parameters())
        assert make_teacher(0, 4, positional_encoding(16, 16, 32)).fingerprint() == teacher.fingerprint()

    def test_coverage(self):
        cov = box_cell_coverage(BoxPrompt(2, 0, 8, 4), 16, 16, 4, 4)
        np.testing.assert_allclose(cov[0], [0.5, 1.0, 0.0, 0.0])
        assert cov[1:].sum() == 0
