"""Frozen image encoder, 2-D sinusoidal positional encoding and box-prompt tokens."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import functional as F
from .core.module import Conv2d, Module
from .core.tensor import Parameter, ShapeError, Tensor, no_grad

EMBED_DIM = 32
DOWNSAMPLE = 4


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


class ImageEncoder(Module):
    """Three conv+ReLU stages (stride 2, 2, 1) mapping [B,3,H,W] to [B,32,H/4,W/4].

    Weights are drawn once from ``seed`` and frozen. Every stage emits each
    random orthogonal projection twice with opposite signs, so ReLU discards
    nothing: relu(u) - relu(-u) = u. For a grey image (three equal channels)
    the 16 pixels of every 4x4 cell stay linearly recoverable from the 32
    output channels.
    """

    def __init__(self, seed: int = 0, gain: float = 4.0):
        rng = np.random.default_rng([seed, 0xE1])
        self.gain = gain
        self.stage1 = Conv2d(3, 8, 2, rng, stride=2, padding=0)
        self.stage2 = Conv2d(8, 32, 2, rng, stride=2, padding=0)
        self.stage3 = Conv2d(32, 32, 1, rng, stride=1, padding=0)

        q1 = _orthogonal(rng, 4)
        w1 = np.zeros((8, 3, 2, 2))
        for j in range(4):
            w1[j] = np.broadcast_to(q1[j].reshape(2, 2) / 3.0, (3, 2, 2))
            w1[j + 4] = -w1[j]
        q2 = _orthogonal(rng, 16)
        w2 = np.zeros((32, 8, 2, 2))
        for m in range(16):
            row = q2[m].reshape(4, 2, 2)
            w2[m, :4] = row
            w2[m, 4:] = -row
            w2[m + 16] = -w2[m]
        q3 = _orthogonal(rng, 16) * gain
        w3 = np.zeros((32, 32, 1, 1))
        w3[:16, :16, 0, 0] = q3
        w3[:16, 16:, 0, 0] = -q3
        w3[16:] = -w3[:16]
        for stage, w in ((self.stage1, w1), (self.stage2, w2), (self.stage3, w3)):
            stage.weight.data = w.astype(np.float32)
        self._set_names()
        self.freeze()

    def __call__(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError("encode_image", "expects [B,3,H,W]", got=image.shape)
        H, W = image.shape[2:]
        if H % DOWNSAMPLE or W % DOWNSAMPLE:
            raise ShapeError("encode_image", "H and W must be divisible by 4", got=(H, W))
        x = F.relu(self.stage1(image))
        x = F.relu(self.stage2(x))
        return F.relu(self.stage3(x))

    def encode_numpy(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        """Embed a stack of images without recording gradients."""
        out = []
        with no_grad():
            for i in range(0, len(images), batch):
                out.append(self(Tensor(images[i:i + batch])).data)
        return np.concatenate(out, axis=0)


def encode_image(encoder: ImageEncoder, image: Tensor) -> Tensor:
    return encoder(image)


@dataclass(frozen=True)
class PositionalEncoding:
    """Fixed 2-D sine/cosine code over coordinates normalized to [0, 1).

    Channel layout: sin(w*y), cos(w*y), sin(w*x), cos(w*x), each over
    C/4 frequencies w_i = pi * 2**(i/2).
    """

    tensor: Tensor
    freqs: np.ndarray

    @property
    def channels(self) -> int:
        return self.tensor.shape[0]

    def at(self, y_norm: float, x_norm: float) -> np.ndarray:
        return _pe_values(self.freqs, np.array([y_norm]), np.array([x_norm]))[:, 0]


def _pe_values(freqs: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    ay = np.outer(freqs, ys)
    ax = np.outer(freqs, xs)
    return np.concatenate([np.sin(ay), np.cos(ay), np.sin(ax), np.cos(ax)], axis=0)


def positional_encoding(H_e: int, W_e: int, C_e: int = EMBED_DIM) -> PositionalEncoding:
    if C_e % 4:
        raise ValueError(f"channel count must be divisible by 4, got {C_e}")
    freqs = np.pi * 2.0 ** (np.arange(C_e // 4) / 2.0)
    yy, xx = np.mgrid[0:H_e, 0:W_e]
    vals = _pe_values(freqs, (yy / H_e).ravel(), (xx / W_e).ravel())
    return PositionalEncoding(Tensor(vals.reshape(C_e, H_e, W_e)), freqs)


@dataclass(frozen=True)
class BoxPrompt:
    """Pixel box with exclusive upper corner: covers x_min <= x < x_max."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def validate(self, H: int, W: int) -> "BoxPrompt":
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")
        if self.x_min < 0 or self.y_min < 0 or self.x_max > W or self.y_max > H:
            raise ValueError(f"box {self} outside a {H}x{W} image")
        return self

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "BoxPrompt":
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            raise ValueError("empty mask has no bounding box")
        return cls(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)

    @classmethod
    def image_boundary(cls, H: int, W: int) -> "BoxPrompt":
        return cls(0, 0, W, H)

    def dilate(self, offset: int, H: int, W: int) -> "BoxPrompt":
        return BoxPrompt(max(0, self.x_min - offset), max(0, self.y_min - offset),
                         min(W, self.x_max + offset), min(H, self.y_max + offset))

    def corners(self, H: int, W: int) -> np.ndarray:
        """Normalized (y, x) of the top-left and bottom-right corners."""
        return np.array([[self.y_min / H, self.x_min / W], [self.y_max / H, self.x_max / W]])


def box_corner_codes(boxes: list[BoxPrompt], pe: PositionalEncoding, H: int, W: int) -> np.ndarray:
    """Positional code at both corners of each box: [B, 2, C]."""
    out = np.empty((len(boxes), 2, pe.channels))
    for i, box in enumerate(boxes):
        box.validate(H, W)
        for j, (y, x) in enumerate(box.corners(H, W)):
            out[i, j] = pe.at(y, x)
    return out


class BoxEncoder(Module):
    """Two corner tokens: positional code at the corner plus a learned per-corner bias."""

    def __init__(self, rng: np.random.Generator, C_e: int = EMBED_DIM):
        self.corner_bias = Parameter(rng.normal(0.0, 0.1, size=(2, C_e)))
        self._set_names()

    def __call__(self, boxes: list[BoxPrompt], pe: PositionalEncoding, H: int, W: int) -> Tensor:
        codes = Tensor(box_corner_codes(boxes, pe, H, W))
        bias = F.expand(F.reshape(self.corner_bias, (1,) + self.corner_bias.shape), codes.shape)
        return codes + bias


def encode_box(encoder: BoxEncoder, box: BoxPrompt, pe: PositionalEncoding, H: int, W: int) -> Tensor:
    return encoder([box], pe, H, W)
