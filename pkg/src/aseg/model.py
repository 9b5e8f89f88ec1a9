"""The full segmenter: frozen image encoder, prompt generator, mask decoder, loss weights."""
from __future__ import annotations

import numpy as np

from .core import functional as F
from .core.module import Module
from .core.tensor import Parameter, Tensor, no_grad
from .decoder import MaskDecoder, binarize
from .diffusion import NUM_SPARSE_TOKENS, DiffusionConfig, PromptEmbeddings, PromptEncoder
from .encoders import DOWNSAMPLE, EMBED_DIM, BoxEncoder, BoxPrompt, ImageEncoder, positional_encoding
from .losses import UncertaintyWeights

PROMPT_MODES = ("class", "box")


def member_names(loss_toggles, branch_mode: str = "both", prompt_mode: str = "class") -> list[str]:
    """Loss members in a fixed order; MSE expands to one member per generated embedding."""
    names = [n for n in ("CE", "DC", "SD") if n in loss_toggles]
    if "MSE" in loss_toggles and prompt_mode == "class":
        if branch_mode in ("both", "sparse"):
            names.append("MSE_S")
        if branch_mode in ("both", "dense"):
            names.append("MSE_D")
    return names


class Segmenter(Module):
    """Class-prompted (or, for the offset study, box-prompted) mask predictor.

    ``encoder`` is frozen; everything else, including the loss weights, is
    trainable.
    """

    def __init__(self, num_classes: int, H: int = 64, W: int = 64, seed: int = 0, *, branch_mode: str = "both",
                 diffusion: DiffusionConfig | None = None, prompt_mode: str = "class", loss_names=("CE", "DC", "SD"),
                 encoder_gain: float = 4.0, encoder_seed: int = 0):
        if prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}, got {prompt_mode!r}")
        self.num_classes, self.H, self.W = num_classes, H, W
        self.H_e, self.W_e = H // DOWNSAMPLE, W // DOWNSAMPLE
        self.prompt_mode = prompt_mode
        rng = np.random.default_rng([seed, 0x5E6])
        r_prompt, r_dec, r_box = rng.spawn(3)
        with no_grad():
            self.encoder = ImageEncoder(encoder_seed, gain=encoder_gain)
        self.pe = positional_encoding(self.H_e, self.W_e, EMBED_DIM)
        if prompt_mode == "class":
            self.prompt = PromptEncoder(num_classes, r_prompt, self.H_e, self.W_e, EMBED_DIM, diffusion, branch_mode)
        else:
            self.box = BoxEncoder(r_box, EMBED_DIM)
            self.no_mask_embed = Parameter(r_box.normal(0.0, 0.02, size=(EMBED_DIM,)))
        self.decoder = MaskDecoder(r_dec, EMBED_DIM)
        self.weights = UncertaintyWeights(loss_names)
        self._set_names()

    def embed(self, images: np.ndarray) -> np.ndarray:
        return self.encoder.encode_numpy(np.asarray(images, dtype=np.float32))

    def prompts(self, F_I: Tensor, class_ids=None, boxes: list[BoxPrompt] | None = None, mode: str = "infer",
                rng: np.random.Generator | None = None) -> PromptEmbeddings:
        if self.prompt_mode == "class":
            return self.prompt(F_I, class_ids, mode=mode, rng=rng)
        B = F_I.shape[0]
        if boxes is None or len(boxes) != B:
            raise ValueError("box prompting needs one box per sample")
        sparse = self.box(boxes, self.pe, self.H, self.W)
        dense = F.expand(F.reshape(self.no_mask_embed, (1, EMBED_DIM, 1, 1)), F_I.shape)
        return PromptEmbeddings(sparse, dense)

    def forward(self, F_I: Tensor, class_ids=None, boxes=None, mode: str = "infer", rng=None) -> tuple[Tensor, PromptEmbeddings]:
        pr = self.prompts(F_I, class_ids, boxes, mode, rng)
        return self.decoder(F_I, self.pe.tensor, pr), pr

    def predict(self, F_I: np.ndarray, class_ids=None, boxes=None, batch: int = 64, threshold: float = 0.5) -> np.ndarray:
        """Binary masks [N, H, W] in infer mode, without recording gradients."""
        out = []
        with no_grad():
            for i in range(0, len(F_I), batch):
                sl = slice(i, i + batch)
                logits, _ = self.forward(Tensor(F_I[sl]),
                                         None if class_ids is None else list(class_ids[sl]),
                                         None if boxes is None else list(boxes[sl]))
                out.append(binarize(logits)[:, 0])
        return np.concatenate(out, axis=0)

    def trainable_state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters() if not p.frozen}


__all__ = ["NUM_SPARSE_TOKENS", "PROMPT_MODES", "Segmenter", "member_names"]
