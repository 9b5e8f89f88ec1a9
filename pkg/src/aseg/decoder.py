"""Lightweight mask decoder: image embedding + positional code + prompts -> logits."""
from __future__ import annotations

import numpy as np

from .core import functional as F
from .core.module import Conv2d, ConvTranspose2d, Linear, Module
from .core.tensor import ShapeError, Tensor
from .diffusion import NUM_SPARSE_TOKENS, PromptEmbeddings
from .encoders import EMBED_DIM

# the logit layer starts small with a negative bias: sigmoid(-2) ~ 0.12 is near
# the foreground share of a typical organ crop, which speeds up early training
OUT_WEIGHT_SCALE = 0.1
OUT_BIAS_INIT = -2.0


class MaskDecoder(Module):
    """Additive dense fusion, one token-to-image cross-attention, 4x upsampling.

    The two sparse tokens attend over the fused map; their updated values are
    projected to one channel vector that is added at every position before
    two stride-2 transposed convolutions produce a single logit channel.
    """

    def __init__(self, rng: np.random.Generator, C: int = EMBED_DIM, hidden: int = 32):
        self.C = C
        self.fuse = Conv2d(C, C, 1, rng)
        self.q = Linear(C, C, rng)
        self.k = Linear(C, C, rng)
        self.v = Linear(C, C, rng)
        self.token_out = Linear(NUM_SPARSE_TOKENS * C, C, rng)
        self.up1 = ConvTranspose2d(C, hidden, 2, rng)
        self.up2 = ConvTranspose2d(hidden, 1, 2, rng)
        self.up2.weight.data *= OUT_WEIGHT_SCALE
        self.up2.bias.data[:] = OUT_BIAS_INIT
        self._set_names()

    def __call__(self, F_I: Tensor, P_p: Tensor, prompts: PromptEmbeddings) -> Tensor:
        B, C, H, W = F_I.shape
        if P_p.shape != (C, H, W) or prompts.dense.shape != F_I.shape:
            raise ShapeError("decode_mask", "embedding shapes disagree", expected=F_I.shape,
                             got=(P_p.shape, prompts.dense.shape))
        tokens = prompts.sparse
        if tokens.shape != (B, NUM_SPARSE_TOKENS, C):
            raise ShapeError("decode_mask", "sparse token shape", expected=(B, NUM_SPARSE_TOKENS, C), got=tokens.shape)
        pe = F.expand(F.reshape(P_p, (1, C, H, W)), F_I.shape)
        fused = self.fuse(F_I + pe + prompts.dense)

        HW = H * W
        seq = F.reshape(F.transpose(F.reshape(fused, (B, C, HW)), (0, 2, 1)), (B * HW, C))
        keys = F.reshape(self.k(seq), (B, HW, C))
        vals = F.reshape(self.v(seq), (B, HW, C))
        q = F.reshape(self.q(F.reshape(tokens, (B * NUM_SPARSE_TOKENS, C))), (B, NUM_SPARSE_TOKENS, C))
        att = F.softmax(F.matmul(q, F.transpose(keys, (0, 2, 1))) * (1.0 / np.sqrt(C)), axis=-1)
        tokens = tokens + F.matmul(att, vals)
        update = self.token_out(F.reshape(tokens, (B, NUM_SPARSE_TOKENS * C)))

        x = F.relu(fused + F.expand(F.reshape(update, (B, C, 1, 1)), fused.shape))
        x = F.relu(self.up1(x))
        return self.up2(x)


def decode_mask(decoder: MaskDecoder, F_I: Tensor, P_p: Tensor, prompts: PromptEmbeddings) -> Tensor:
    return decoder(F_I, P_p, prompts)


def binarize(logits, threshold: float = 0.5) -> np.ndarray:
    """sigmoid(logit) > threshold, compared in logit space so that saturation cannot flip ties."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if threshold <= 0.0:
        return np.ones(z.shape, dtype=np.uint8)
    if threshold >= 1.0:
        return np.zeros(z.shape, dtype=np.uint8)
    cut = np.log(threshold) - np.log1p(-threshold)
    return (z.astype(np.float64) > cut).astype(np.uint8)
