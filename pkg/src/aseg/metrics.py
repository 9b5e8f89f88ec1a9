"""Distance transforms, mask boundaries, DSC and NSD.

The EDT is the separable lower-envelope-of-parabolas algorithm of
Felzenszwalb and Huttenlocher, run on squared distances so that results are
exact integers before the final square root.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

DEFAULT_TAU = 2.0
_BIG = 1e20


@njit(cache=True)
def _envelope_1d(f, out, v, z):
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * q - 2.0 * p)
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = (q - p) * (q - p) + f[p]


@njit(cache=True)
def _sq_edt_2d(src):
    H, W = src.shape
    g = np.empty((H, W))
    for y in range(H):
        for x in range(W):
            g[y, x] = 0.0 if src[y, x] else _BIG
    n = max(H, W)
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    for x in range(W):
        for y in range(H):
            f[y] = g[y, x]
        _envelope_1d(f[:H], out[:H], v, z)
        for y in range(H):
            g[y, x] = out[y]
    for y in range(H):
        for x in range(W):
            f[x] = g[y, x]
        _envelope_1d(f[:W], out[:W], v, z)
        for x in range(W):
            g[y, x] = out[x]
    return g


@dataclass
class DistanceMap:
    grid: np.ndarray
    empty: bool = False
    squared: np.ndarray = field(default=None, repr=False)


def _as_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        arr = arr.astype(bool)
    return arr


def empty_sentinel(shape) -> float:
    H, W = shape
    return float(np.hypot(H, W))


def edt(mask) -> DistanceMap:
    """Exact Euclidean distance from every pixel to the nearest nonzero pixel.

    An empty source set yields a map filled with the image diagonal and
    ``empty=True``.
    """
    m = _as_mask(mask)
    if not m.any():
        fill = empty_sentinel(m.shape)
        return DistanceMap(np.full(m.shape, fill), empty=True, squared=np.full(m.shape, fill * fill))
    sq = _sq_edt_2d(np.ascontiguousarray(m))
    return DistanceMap(np.sqrt(sq), empty=False, squared=sq)


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background; outside the image counts as background."""
    m = _as_mask(mask)
    padded = np.pad(m, 1, constant_values=False)
    inner = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~inner


def _check_pair(G, S) -> tuple[np.ndarray, np.ndarray]:
    g, s = _as_mask(G), _as_mask(S)
    if g.shape != s.shape:
        raise ValueError(f"mask shapes differ: {g.shape} vs {s.shape}")
    return g, s


def dsc(G, S) -> float:
    """2|G ∩ S| / (|G| + |S|); two empty masks score 1.0."""
    g, s = _check_pair(G, S)
    total = int(g.sum()) + int(s.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((g & s).sum()) / total


def nsd(G, S, tau: float = DEFAULT_TAU) -> float:
    """Normalized surface distance at tolerance ``tau`` (pixels).

    Both empty -> 1.0; exactly one empty -> 0.0.
    """
    g, s = _check_pair(G, S)
    g_any, s_any = g.any(), s.any()
    if not g_any and not s_any:
        return 1.0
    if not g_any or not s_any:
        return 0.0
    bg, bs = boundary(g), boundary(s)
    tau2 = float(tau) * float(tau)
    near_s = edt(bs).squared <= tau2
    near_g = edt(bg).squared <= tau2
    hits = int((bg & near_s).sum()) + int((bs & near_g).sum())
    return hits / (int(bg.sum()) + int(bs.sum()))


@dataclass
class MetricReport:
    per_class: dict[int, dict[str, float]]
    mean_dsc: float
    mean_nsd: float
    counts: dict[int, int]
    tau: float = DEFAULT_TAU

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "mean": {"DSC": self.mean_dsc, "NSD": self.mean_nsd},
            "per_class": {str(k): {"DSC": v["DSC"], "NSD": v["NSD"], "n": self.counts[k]} for k, v in sorted(self.per_class.items())},
        }


def _mean(xs) -> float:
    # fsum keeps the mean independent of sample order
    return math.fsum(xs) / len(xs)


def _pct(x: float) -> float:
    return round(100.0 * float(x), 3)


def evaluate_batch(preds, gts, classes, tau: float = DEFAULT_TAU) -> MetricReport:
    """Score aligned lists of predicted and reference masks grouped by class id.

    The overall mean is taken over all pairs; scores are percentages rounded
    to three decimals.
    """
    if not (len(preds) == len(gts) == len(classes)):
        raise ValueError(f"length mismatch: {len(preds)} preds, {len(gts)} gts, {len(classes)} classes")
    if not preds:
        raise ValueError("nothing to evaluate")
    d_by: dict[int, list[float]] = {}
    n_by: dict[int, list[float]] = {}
    for p, g, c in zip(preds, gts, classes):
        d_by.setdefault(int(c), []).append(dsc(g, p))
        n_by.setdefault(int(c), []).append(nsd(g, p, tau))
    per_class = {c: {"DSC": _pct(_mean(d_by[c])), "NSD": _pct(_mean(n_by[c]))} for c in sorted(d_by)}
    all_d = [x for c in d_by for x in d_by[c]]
    all_n = [x for c in n_by for x in n_by[c]]
    return MetricReport(
        per_class=per_class,
        mean_dsc=_pct(_mean(all_d)),
        mean_nsd=_pct(_mean(all_n)),
        counts={c: len(d_by[c]) for c in d_by},
        tau=tau,
    )
