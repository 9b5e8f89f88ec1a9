"""Loss members and their uncertainty-weighted aggregation.

Members: MSE distillation of both prompt embeddings against a frozen
teacher, Dice, binary cross-entropy and a shape-distance term built on the
exact EDT. The aggregate is

    L = sum_j  L_j / (2 lambda_j^2) + log(1 + lambda_j^2)

with one learnable scalar lambda_j per member.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import functional as F
from .core.module import Module
from .core.tensor import Parameter, ShapeError, Tensor, no_grad
from .diffusion import PromptEmbeddings
from .encoders import BoxPrompt, PositionalEncoding, box_corner_codes
from .metrics import edt

DICE_EPS = 1e-6
CE_CLAMP = 1e-7
SD_EPS = 1e-6
SD_DMAX = 10.0
LAMBDA_FLOOR = 1e-3
LOSS_NAMES = ("CE", "DC", "SD", "MSE")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, "prediction and target shapes differ", expected=a.shape, got=b.shape)


def mse(a: Tensor, b) -> Tensor:
    b = _t(b)
    _check("mse", a, b)
    return F.mean(F.square(a - b))


def mse_distill(student: PromptEmbeddings, teacher: "ReferencePromptEmbeddings") -> tuple[Tensor, Tensor]:
    """Mean squared error of the sparse and of the dense embeddings."""
    return mse(student.sparse, teacher.sparse), mse(student.dense, teacher.dense)


def dice_loss(pred: Tensor, gt) -> Tensor:
    """1 - 2 sum(p g) / (sum(p^2) + sum(g^2) + eps), summed over every element."""
    g = _t(gt)
    _check("dice_loss", pred, g)
    inter = F.sum(pred * g)
    denom = F.sum(F.square(pred)) + F.sum(F.square(g)) + DICE_EPS
    return 1.0 - (inter * 2.0) / denom


def ce_loss(pred: Tensor, gt) -> Tensor:
    g = _t(gt)
    _check("ce_loss", pred, g)
    p = F.clamp(pred, CE_CLAMP, 1.0 - CE_CLAMP)
    ll = g * F.log(p) + (1.0 - g) * F.log(1.0 - p)
    return -F.mean(ll)


def shape_distance_map(mask: np.ndarray, d_max: float = SD_DMAX) -> np.ndarray:
    """1 inside the mask, falling linearly to 0 at ``d_max`` pixels outside it."""
    dist = edt(mask).grid
    return (1.0 - np.clip(dist / d_max, 0.0, 1.0)).astype(np.float32)


@dataclass
class ShapeDistanceResult:
    value: Tensor
    degenerate: bool


def shape_distance_loss(pred: Tensor, gt=None, dmap: np.ndarray | None = None) -> ShapeDistanceResult:
    """Mean over samples and channels of sum|D - p| / (sum p + eps).

    ``pred`` is [B, C, H, W]. When the predicted mass of a slice falls below
    one pixel its denominator is held at 1, which bounds the term by H*W;
    such slices set ``degenerate``.
    """
    if dmap is None:
        g = np.asarray(gt.data if isinstance(gt, Tensor) else gt)
        if g.shape != pred.shape:
            raise ShapeError("shape_distance_loss", "prediction and target shapes differ", expected=pred.shape, got=g.shape)
        dmap = np.stack([np.stack([shape_distance_map(g[b, c]) for c in range(g.shape[1])]) for b in range(g.shape[0])])
    D = _t(dmap)
    _check("shape_distance_loss", pred, D)
    num = F.sum(F.abs(D - pred), axis=(2, 3))
    mass = F.sum(pred, axis=(2, 3)) + SD_EPS
    degenerate = bool(np.any(mass.data < 1.0))
    f = num / F.clamp(mass, lo=1.0)
    return ShapeDistanceResult(F.mean(f), degenerate)


# -- uncertainty weighting ----------------------------------------------------------


class UncertaintyWeights(Module):
    def __init__(self, names):
        self.names = list(names)
        self.lambdas = [Parameter(np.array(1.0), name=f"lambda.{n}") for n in self.names]

    def __getitem__(self, name: str) -> Parameter:
        return self.lambdas[self.names.index(name)]

    def named_parameters(self, prefix: str = ""):
        for n, p in zip(self.names, self.lambdas):
            yield f"{prefix}lambda.{n}", p

    def values(self) -> dict[str, float]:
        return {n: float(p.data) for n, p in zip(self.names, self.lambdas)}


@dataclass
class LossReport:
    members: dict[str, dict[str, float]]
    total: float
    lambdas: dict[str, float]
    warnings: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def reduction_error(self) -> float:
        rebuilt = sum(m["weight"] * m["raw"] + m["reg"] for m in self.members.values())
        return abs(rebuilt - self.total)

    def to_json(self, step: int) -> str:
        return json.dumps({"step": step, "members": self.members, "total": self.total, "lambdas": self.lambdas},
                          sort_keys=True)


def uncertainty_aggregate(members: list[tuple[str, Tensor]], weights: UncertaintyWeights | None,
                          joint: bool = True) -> tuple[Tensor, LossReport]:
    """Combine loss members; with ``joint=False`` this is the unit-weight sum."""
    if not members:
        raise ValueError("need at least one loss member")
    total = None
    report_members: dict[str, dict[str, float]] = {}
    notes: list[str] = []
    lambdas: dict[str, float] = {}
    for name, L in members:
        # aggregate in float64 so the report reproduces the total to rounding
        L = F.cast(L, np.float64)
        if joint:
            lam = weights[name]
            if abs(lam.item()) < LAMBDA_FLOOR:
                sign = 1.0 if lam.item() >= 0 else -1.0
                lam.data = np.array(sign * LAMBDA_FLOOR, dtype=lam.dtype)
                notes.append(f"lambda.{name} clamped to {sign * LAMBDA_FLOOR:g}")
                warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
            lam2 = F.square(F.cast(lam, np.float64))
            term = L * F.reciprocal(lam2 * 2.0) + F.log(lam2 + 1.0)
            lv = lam.item()
            w, reg = 1.0 / (2.0 * lv * lv), float(np.log1p(lv * lv))
            lambdas[name] = lv
        else:
            term = L
            w, reg = 1.0, 0.0
        total = term if total is None else total + term
        report_members[name] = {"raw": L.item(), "weight": w, "reg": reg}
    report = LossReport(report_members, total.item(), lambdas, warnings=notes)
    return total, report


# -- distillation teacher -----------------------------------------------------------


@dataclass
class ReferencePromptEmbeddings:
    sparse: np.ndarray  # [B, 2, C]
    dense: np.ndarray  # [B, C, H_e, W_e]


def box_cell_coverage(box: BoxPrompt, H: int, W: int, H_e: int, W_e: int) -> np.ndarray:
    """Fraction of every embedding cell covered by ``box``."""
    sy, sx = H / H_e, W / W_e
    y0 = np.arange(H_e) * sy
    x0 = np.arange(W_e) * sx
    cov_y = np.clip(np.minimum(y0 + sy, box.y_max) - np.maximum(y0, box.y_min), 0, None) / sy
    cov_x = np.clip(np.minimum(x0 + sx, box.x_max) - np.maximum(x0, box.x_min), 0, None) / sx
    return np.outer(cov_y, cov_x)


class TeacherPromptEncoder(Module):
    """Frozen stand-in for a pretrained box-prompt encoder.

    Sparse: positional code at both box corners + corner bias + class code.
    Dense: no-mask vector everywhere plus a class code scaled by box coverage.
    """

    def __init__(self, seed: int, num_classes: int, pe: PositionalEncoding, image_hw: tuple[int, int]):
        rng = np.random.default_rng([seed, 0x7EAC])
        C = pe.channels
        self.pe = pe
        self.num_classes = num_classes
        self.image_hw = image_hw
        self.corner_bias = Parameter(rng.normal(0.0, 0.5, size=(2, C)))
        self.class_sparse = Parameter(rng.normal(0.0, 0.5, size=(num_classes, C)))
        self.no_mask = Parameter(rng.normal(0.0, 0.5, size=(C,)))
        self.class_dense = Parameter(rng.normal(0.0, 1.0, size=(num_classes, C)))
        self._set_names()
        self.freeze()

    def __call__(self, boxes: list[BoxPrompt], class_ids) -> ReferencePromptEmbeddings:
        H, W = self.image_hw
        C, H_e, W_e = self.pe.tensor.shape
        ids = np.asarray(class_ids, dtype=np.int64)
        sparse = box_corner_codes(boxes, self.pe, H, W) + self.corner_bias.data[None] + self.class_sparse.data[ids][:, None, :]
        cover = np.stack([box_cell_coverage(b, H, W, H_e, W_e) for b in boxes])
        dense = self.no_mask.data[None, :, None, None] + self.class_dense.data[ids][:, :, None, None] * cover[:, None]
        return ReferencePromptEmbeddings(sparse.astype(np.float32), dense.astype(np.float32))


def make_teacher(seed: int, num_classes: int, pe: PositionalEncoding, image_hw=(64, 64)) -> TeacherPromptEncoder:
    with no_grad():
        return TeacherPromptEncoder(seed, num_classes, pe, tuple(image_hw))
