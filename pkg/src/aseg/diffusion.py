"""Class-conditioned forward diffusion and the two-branch prompt generator.

The class index is projected to a one-channel map and added, together with
Gaussian noise of std 1/(t+1), to the image embedding. A small U-Net encoder
then feeds two decoders: the dense branch gates the deepest features
element-wise, the sparse branch rescales them per channel and is pooled down
to two tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import functional as F
from .core.module import Conv2d, ConvTranspose2d, Linear, Module
from .core.tensor import Parameter, ShapeError, Tensor
from .encoders import EMBED_DIM

NUM_SPARSE_TOKENS = 2
BRANCH_MODES = ("both", "dense", "sparse")


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 10
    variance_mode: str = "std"  # "std": noise std = 1/(t+1); "variance": noise variance = 1/(t+1)
    enabled: bool = True
    injection_level: int = 3
    infer_seed: int = 7919

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.variance_mode not in ("std", "variance"):
            raise ValueError(f"variance_mode must be 'std' or 'variance', got {self.variance_mode!r}")
        if self.injection_level != 3:
            raise ValueError("only injection at the deepest level (3) is implemented")


@dataclass(frozen=True)
class ClassPrompt:
    class_id: int
    num_classes: int

    def __post_init__(self):
        if not 0 <= self.class_id < self.num_classes:
            raise ValueError(f"class {self.class_id} outside [0, {self.num_classes})")

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(self.num_classes, dtype=np.float32)
        v[self.class_id] = 1.0
        return v


def one_hot(class_ids, num_classes: int) -> Tensor:
    ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
        raise ValueError(f"class ids {ids.tolist()} outside [0, {num_classes})")
    out = np.zeros((ids.size, num_classes), dtype=np.float32)
    out[np.arange(ids.size), ids] = 1.0
    return Tensor(out)


@dataclass
class PromptEmbeddings:
    sparse: Tensor  # [B, 2, C]
    dense: Tensor  # [B, C, H_e, W_e]
    sparse_generated: bool = True
    dense_generated: bool = True


def noise_schedule(t: int) -> float:
    if t < 0:
        raise ValueError(f"time step must be >= 0, got {t}")
    return 1.0 / (t + 1)


def noise_std(t, variance_mode: str = "std") -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 0):
        raise ValueError("time step must be >= 0")
    sigma = 1.0 / (t + 1.0)
    return np.sqrt(sigma) if variance_mode == "variance" else sigma


class ClassProjection(Module):
    """Linear map from a one-hot class vector to an H x W single-channel map."""

    def __init__(self, num_classes: int, H: int, W: int, rng: np.random.Generator):
        self.num_classes, self.H, self.W = num_classes, H, W
        self.proj = Linear(num_classes, H * W, rng)

    def __call__(self, onehot: Tensor) -> Tensor:
        if onehot.ndim != 2 or onehot.shape[1] != self.num_classes:
            raise ShapeError("project_class", "one-hot width", expected=self.num_classes, got=onehot.shape)
        return F.reshape(self.proj(onehot), (onehot.shape[0], 1, self.H, self.W))


def project_class(projection: ClassProjection, prompt: ClassPrompt) -> Tensor:
    if prompt.num_classes != projection.num_classes:
        raise ShapeError("project_class", "class count", expected=projection.num_classes, got=prompt.num_classes)
    return projection(Tensor(prompt.one_hot[None]))


def forward_diffuse(F_I: Tensor, c_expand: Tensor, t, rng: np.random.Generator | None = None,
                    noise: np.ndarray | None = None, variance_mode: str = "std") -> Tensor:
    """F_t = F_I + eps_t + c_expand, with eps i.i.d. per element.

    ``t`` is an int or one step per sample. Pass ``noise`` (unit-variance
    draws shaped like F_I) to bypass ``rng``.
    """
    B, C, H, W = F_I.shape
    if c_expand.shape != (B, 1, H, W):
        raise ShapeError("forward_diffuse", "class map shape", expected=(B, 1, H, W), got=c_expand.shape)
    sigma = np.broadcast_to(noise_std(t, variance_mode), (B,)).astype(np.float64)
    if noise is None:
        noise = rng.standard_normal(F_I.shape)
    eps = Tensor(np.asarray(noise) * sigma[:, None, None, None], dtype=F_I.dtype)
    return F_I + eps + F.expand(c_expand, F_I.shape)


class DecoderBranch(Module):
    """Upward path: gated deepest features plus skips at 4x4, 8x8 and 16x16 cells."""

    def __init__(self, rng: np.random.Generator, C: int = EMBED_DIM, c1: int = 32, c2: int = 64):
        self.fuse3 = Conv2d(2 * c2, c2, 3, rng)
        self.up2 = ConvTranspose2d(c2, c1, 2, rng)
        self.fuse2 = Conv2d(2 * c1, c1, 3, rng)
        self.up1 = ConvTranspose2d(c1, C, 2, rng)
        self.fuse1 = Conv2d(2 * C, C, 3, rng)
        self.out = Conv2d(C, C, 1, rng)

    def __call__(self, gated: Tensor, feats: list[Tensor], f0: Tensor) -> Tensor:
        f1, f2, _ = feats
        x = F.relu(self.fuse3(F.concat_channels(gated, f2)))
        x = F.relu(self.up2(x))
        x = F.relu(self.fuse2(F.concat_channels(x, f1)))
        x = F.relu(self.up1(x))
        x = F.relu(self.fuse1(F.concat_channels(x, f0)))
        return self.out(x)


class PromptEncoder(Module):
    """Diffusion-based class prompt encoder producing sparse tokens and a dense map."""

    def __init__(self, num_classes: int, rng: np.random.Generator, H_e: int = 16, W_e: int = 16,
                 C: int = EMBED_DIM, config: DiffusionConfig | None = None, branch_mode: str = "both"):
        if branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}, got {branch_mode!r}")
        if H_e % 4 or W_e % 4:
            raise ValueError("embedding extents must be divisible by 4")
        self.config = config or DiffusionConfig()
        self.branch_mode = branch_mode
        self.num_classes, self.C, self.H_e, self.W_e = num_classes, C, H_e, W_e
        c1, c2 = 32, 64
        # one child stream per component keeps shared parts identical across branch modes
        r_cls, r_enc, r_dense, r_sparse, r_nomask = rng.spawn(5)
        self.class_proj = ClassProjection(num_classes, H_e, W_e, r_cls)
        self.class_proj_deep = ClassProjection(num_classes, H_e // 4, W_e // 4, r_cls)
        self.enc1 = Conv2d(C, c1, 3, r_enc, stride=2)
        self.enc2 = Conv2d(c1, c2, 3, r_enc, stride=2)
        self.enc3 = Conv2d(c2, c2, 3, r_enc, stride=1)
        # a disabled branch is not built; its output is replaced as in box-free SAM:
        # zero sparse tokens, or a learned no-mask vector broadcast as the dense map
        if branch_mode in ("both", "dense"):
            self.dense_att = Conv2d(c2 + 1, c2, 3, r_dense)
            self.dense_dec = DecoderBranch(r_dense, C, c1, c2)
        else:
            self.no_mask_embed = Parameter(r_nomask.normal(0.0, 0.02, size=(C,)))
        if branch_mode in ("both", "sparse"):
            self.sparse_att = Conv2d(c2 + 1, c2, 1, r_sparse)
            self.sparse_dec = DecoderBranch(r_sparse, C, c1, c2)
            self.sparse_tokens = Linear(C, NUM_SPARSE_TOKENS * C, r_sparse)
        self._set_names()

    # -- stages -------------------------------------------------------------

    def encode_features(self, F_t: Tensor) -> list[Tensor]:
        f1 = F.relu(self.enc1(F_t))
        f2 = F.relu(self.enc2(f1))
        f3 = F.relu(self.enc3(f2))
        return [f1, f2, f3]

    def class_maps(self, onehot: Tensor) -> tuple[Tensor, Tensor]:
        """(c_expand at embedding resolution, c_p at the deepest level)."""
        return self.class_proj(onehot), self.class_proj_deep(onehot)

    def dense_gate(self, feats: list[Tensor], c_p: Tensor) -> Tensor:
        return F.relu(self.dense_att(F.concat_channels(feats[2], c_p)))

    def dense_branch(self, feats: list[Tensor], f0: Tensor, c_p: Tensor, gate: Tensor | None = None) -> Tensor:
        if gate is None:
            gate = self.dense_gate(feats, c_p)
        return self.dense_dec(feats[2] * gate, feats, f0)

    def sparse_gate(self, feats: list[Tensor], c_p: Tensor) -> Tensor:
        pooled = F.adaptive_avg_pool(F.concat_channels(feats[2], c_p))
        return F.sigmoid(self.sparse_att(pooled))

    def sparse_branch(self, feats: list[Tensor], f0: Tensor, c_p: Tensor, gate: Tensor | None = None) -> Tensor:
        if gate is None:
            gate = self.sparse_gate(feats, c_p)
        scaled = feats[2] * F.expand(gate, feats[2].shape)
        x = self.sparse_dec(scaled, feats, f0)
        B = x.shape[0]
        pooled = F.reshape(F.adaptive_avg_pool(x), (B, self.C))
        return F.reshape(self.sparse_tokens(pooled), (B, NUM_SPARSE_TOKENS, self.C))

    # -- composition ----------------------------------------------------------

    def diffuse(self, F_I: Tensor, c_expand: Tensor, mode: str, rng: np.random.Generator | None) -> Tensor:
        cfg = self.config
        if not cfg.enabled:
            return F_I
        B = F_I.shape[0]
        if mode == "train":
            t = rng.integers(0, cfg.T, size=B)
            noise = rng.standard_normal(F_I.shape)
        elif mode == "infer":
            t = np.full(B, cfg.T - 1)
            fixed = np.random.default_rng(cfg.infer_seed).standard_normal(F_I.shape[1:])
            noise = np.broadcast_to(fixed, F_I.shape)
        else:
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        return forward_diffuse(F_I, c_expand, t, noise=noise, variance_mode=cfg.variance_mode)

    def __call__(self, F_I: Tensor, class_ids, mode: str = "infer", rng: np.random.Generator | None = None) -> PromptEmbeddings:
        B = F_I.shape[0]
        if F_I.shape[1:] != (self.C, self.H_e, self.W_e):
            raise ShapeError("encode_prompts", "image embedding shape", expected=(self.C, self.H_e, self.W_e), got=F_I.shape[1:])
        onehot = one_hot(class_ids, self.num_classes)
        if onehot.shape[0] != B:
            raise ShapeError("encode_prompts", "one class per sample", expected=B, got=onehot.shape[0])
        c_expand, c_p = self.class_maps(onehot)
        f0 = self.diffuse(F_I, c_expand, mode, rng)
        feats = self.encode_features(f0)
        if self.branch_mode in ("both", "dense"):
            dense = self.dense_branch(feats, f0, c_p)
        else:
            nm = F.reshape(self.no_mask_embed, (1, self.C, 1, 1))
            dense = F.expand(nm, (B, self.C, self.H_e, self.W_e))
        if self.branch_mode in ("both", "sparse"):
            sparse = self.sparse_branch(feats, f0, c_p)
        else:
            sparse = Tensor(np.zeros((B, NUM_SPARSE_TOKENS, self.C)))
        return PromptEmbeddings(sparse, dense,
                                sparse_generated=self.branch_mode != "dense",
                                dense_generated=self.branch_mode != "sparse")


def encode_prompts(encoder: PromptEncoder, F_I: Tensor, prompt: ClassPrompt | list, mode: str = "infer",
                   rng: np.random.Generator | None = None) -> PromptEmbeddings:
    if isinstance(prompt, ClassPrompt):
        ids = [prompt.class_id] * F_I.shape[0]
    else:
        ids = list(prompt)
    return encoder(F_I, ids, mode=mode, rng=rng)
