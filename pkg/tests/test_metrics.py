import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aseg.metrics import boundary, dsc, edt, empty_sentinel, evaluate_batch, nsd


def brute_edt(mask):
    src = np.argwhere(mask)
    H, W = mask.shape
    yy, xx = np.mgrid[0:H, 0:W]
    d2 = (yy[..., None] - src[:, 0]) ** 2 + (xx[..., None] - src[:, 1]) ** 2
    return np.sqrt(d2.min(axis=-1))


def brute_boundary(m):
    H, W = m.shape
    out = np.zeros_like(m, dtype=bool)
    for y in range(H):
        for x in range(W):
            if not m[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < H and 0 <= xx < W) or not m[yy, xx]:
                    out[y, x] = True
    return out


def brute_nsd(G, S, tau):
    G, S = G.astype(bool), S.astype(bool)
    if not G.any() and not S.any():
        return 1.0
    if not G.any() or not S.any():
        return 0.0
    bg, bs = np.argwhere(brute_boundary(G)), np.argwhere(brute_boundary(S))

    def within(a, b):
        d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).min(axis=1)
        return int((d <= tau).sum())

    return (within(bg, bs) + within(bs, bg)) / (len(bg) + len(bs))


def brute_dsc(G, S):
    g, s = G.astype(bool), S.astype(bool)
    tot = g.sum() + s.sum()
    return 1.0 if tot == 0 else 2.0 * (g & s).sum() / tot


def random_pair(seed):
    r = np.random.default_rng(seed)
    H, W = (int(v) for v in r.integers(2, 33, size=2))
    dens = r.uniform(0.02, 0.7)
    G = (r.random((H, W)) < dens).astype(np.uint8)
    S = (r.random((H, W)) < dens).astype(np.uint8)
    if seed % 7 == 0:
        S = G.copy()
    return G, S


class TestEDT:
    def test_three_four_five(self):
        m = np.zeros((6, 6), dtype=np.uint8)
        m[0, 0] = 1
        assert edt(m).grid[3, 4] == 5.0

    def test_full_source_is_zero(self):
        assert np.all(edt(np.ones((5, 7))).grid == 0.0)

    def test_empty_source_sentinel(self):
        d = edt(np.zeros((3, 4)))
        assert d.empty and np.all(d.grid == empty_sentinel((3, 4)))

    @pytest.mark.parametrize("seed", range(200))
    def test_exact_vs_brute_force(self, seed):
        G, _ = random_pair(seed)
        if not G.any():
            G[0, 0] = 1
        np.testing.assert_array_equal(edt(G).grid, brute_edt(G))

    def test_lipschitz(self, rng):
        m = rng.random((20, 20)) < 0.05
        m[3, 3] = True
        d = edt(m).grid
        assert np.all(np.abs(np.diff(d, axis=0)) <= 1.0 + 1e-12)
        assert np.all(np.abs(np.diff(d, axis=1)) <= 1.0 + 1e-12)

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            edt(np.array([[0, 2]]))


class TestBoundary:
    def test_full_mask_is_outer_ring(self):
        b = boundary(np.ones((5, 6), dtype=np.uint8))
        assert b.sum() == 2 * 5 + 2 * 6 - 4 and not b[1:-1, 1:-1].any()

    def test_single_pixel(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[2, 1] = 1
        np.testing.assert_array_equal(boundary(m), m.astype(bool))

    def test_square_ring(self):
        m = np.zeros((5, 5), dtype=np.uint8)
        m[1:4, 1:4] = 1
        b = boundary(m)
        assert b.sum() == 8 and not b[2, 2]

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_loop(self, seed):
        G, _ = random_pair(seed)
        np.testing.assert_array_equal(boundary(G), brute_boundary(G))


class TestDSC:
    def test_examples(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        a[0, :4] = 1
        b = np.zeros((4, 4), dtype=np.uint8)
        b[0, 2:] = 1
        b[1, :2] = 1
        assert dsc(a, a) == 1.0
        assert dsc(a, np.roll(a, 2, axis=0)) == 0.0
        assert dsc(a, b) == 0.5

    def test_both_empty(self):
        z = np.zeros((3, 3))
        assert dsc(z, z) == 1.0

    @pytest.mark.parametrize("seed", range(200))
    def test_exact_vs_brute(self, seed):
        G, S = random_pair(seed)
        assert dsc(G, S) == brute_dsc(G, S)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dsc(np.zeros((2, 2)), np.zeros((2, 3)))


class TestNSD:
    def test_identity(self):
        m = np.zeros((10, 10), dtype=np.uint8)
        m[2:6, 3:8] = 1
        assert nsd(m, m) == 1.0

    def test_one_pixel_offset(self):
        m = np.zeros((12, 12), dtype=np.uint8)
        m[3:7, 3:7] = 1
        assert nsd(m, np.roll(m, 1, axis=1), tau=2.0) == 1.0

    def test_far_apart(self):
        a = np.zeros((30, 30), dtype=np.uint8)
        a[1:5, 1:5] = 1
        b = np.zeros_like(a)
        b[20:24, 20:24] = 1
        assert nsd(a, b) == 0.0

    def test_empty_conventions(self):
        z = np.zeros((4, 4), dtype=np.uint8)
        o = z.copy()
        o[1, 1] = 1
        assert nsd(z, z) == 1.0 and nsd(z, o) == 0.0 and nsd(o, z) == 0.0

    @pytest.mark.parametrize("seed", range(200))
    def test_vs_brute(self, seed):
        G, S = random_pair(seed)
        tau = [1.0, 2.0, 1.5, 3.0][seed % 4]
        assert abs(nsd(G, S, tau) - brute_nsd(G, S, tau)) <= 1e-9

    def test_dilation_never_increases(self):
        from aseg.phantoms import PhantomConfig, generate

        s = generate(PhantomConfig(num_classes=2, noise_std=0.0), 5)
        for sample in s:
            g = sample.masks[0]
            prev = 1.0
            for k in range(6):
                shifted = np.roll(g, k, axis=1)
                v = nsd(g, shifted)
                assert v <= prev + 1e-12
                prev = v


masks = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1))


@settings(max_examples=60, deadline=None)
@given(masks, st.data())
def test_symmetry_and_range(G, data):
    S = data.draw(arrays(np.uint8, G.shape, elements=st.integers(0, 1)))
    assert dsc(G, S) == dsc(S, G)
    assert nsd(G, S) == nsd(S, G)
    assert 0.0 <= dsc(G, S) <= 1.0 and 0.0 <= nsd(G, S) <= 1.0
    if G.any():
        assert nsd(G, G) == 1.0


class TestEvaluateBatch:
    def test_identity_pair(self):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[2:5, 2:5] = 1
        r = evaluate_batch([m], [m], [0])
        assert r.mean_dsc == 100.0 and r.mean_nsd == 100.0
        assert r.to_dict()["mean"] == {"DSC": 100.0, "NSD": 100.0}

    def test_per_class_means_by_hand(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        a[0, :] = 1
        b = np.zeros((4, 4), dtype=np.uint8)
        b[0, :2] = 1
        c = np.zeros((4, 4), dtype=np.uint8)
        c[3, :] = 1
        preds, gts, cls = [a, b, c], [a, a, a], [0, 0, 1]
        r = evaluate_batch(preds, gts, cls)
        d0 = (1.0 + 2 * 2 / 6) / 2
        assert r.per_class[0]["DSC"] == round(100 * d0, 3)
        assert r.per_class[1]["DSC"] == 0.0
        assert r.mean_dsc == round(100 * (1.0 + 2 * 2 / 6 + 0.0) / 3, 3)
        assert r.counts == {0: 2, 1: 1}

    def test_permutation_invariant(self, rng):
        items = [random_pair(s) for s in range(12)]
        cls = list(rng.integers(0, 3, size=12))
        r1 = evaluate_batch([s for _, s in items], [g for g, _ in items], cls)
        perm = rng.permutation(12)
        r2 = evaluate_batch([items[i][1] for i in perm], [items[i][0] for i in perm], [cls[i] for i in perm])
        assert r1.to_dict() == r2.to_dict()

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_batch([np.zeros((2, 2))], [], [0])
