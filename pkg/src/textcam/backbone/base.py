from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..errors import InvalidArgument

POOLING_MODES = ("avg_token", "cls_token")


@dataclass(frozen=True)
class FeatureMap:
    """Patch-token features at the feature tap, laid out h x w x channels.

    ``values`` is a leaf tensor with ``requires_grad`` set so that class
    scores can be differentiated with respect to it.
    """

    values: torch.Tensor

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def Z(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class AttentionWeights:
    values: np.ndarray  # hw x hw, row-stochastic, class token removed
    source_block: int


@dataclass(frozen=True)
class ClassScores:
    logits: torch.Tensor
    probabilities: torch.Tensor
    class_ids: list
    logit_scale: float

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0]


@dataclass(frozen=True)
class ForwardResult:
    features: FeatureMap
    attention: AttentionWeights
    pooled: torch.Tensor  # unit norm, graph-connected to features.values
    cls_token: torch.Tensor = field(repr=False)
    input_size: tuple  # (H, W) after resizing to a multiple of the patch size


def nearest_multiple(n: int, p: int) -> int:
    return max(1, int(round(n / p))) * p


def to_uint8_rgb(image) -> np.ndarray:
    if isinstance(image, Image.Image):
        image = np.asarray(image.convert("RGB"))
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgument(f"expected an HxWx3 image, got shape {image.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.round(image), 0, 255).astype(np.uint8)
    return image


def interpolate_pos_embed(grid_pos: torch.Tensor, base_hw: tuple, new_hw: tuple) -> torch.Tensor:
    """Bilinearly resample a (bh*bw) x D positional table to (nh*nw) x D."""
    if tuple(base_hw) == tuple(new_hw):
        return grid_pos
    bh, bw = base_hw
    d = grid_pos.shape[-1]
    grid = grid_pos.reshape(1, bh, bw, d).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=tuple(new_hw), mode="bilinear", align_corners=False)
    return grid.permute(0, 2, 3, 1).reshape(-1, d)


class Backbone:
    """Shared forward/gradient machinery for ViT-style vision-language models.

    Subclasses supply the model-specific pieces: ``preprocess``, ``embed``,
    ``run_block``, ``pool`` and ``encode_texts``. Everything that the CAM
    pipeline relies on (feature tap, attention extraction, logits, gradients
    of post-softmax scores) lives here so the mock and the real model share
    one code path.
    """

    num_blocks: int
    dtype = torch.float32

    def __init__(self, patch_size: int, pooling_mode: str = "avg_token",
                 logit_scale: float = 100.0, feature_tap: int | None = None,
                 attention_block: int = -1):
        if pooling_mode not in POOLING_MODES:
            raise InvalidArgument(f"unknown pooling mode {pooling_mode!r}")
        if logit_scale <= 0:
            raise InvalidArgument("logit_scale must be positive")
        self.patch_size = int(patch_size)
        self.pooling_mode = pooling_mode
        self.logit_scale = float(logit_scale)
        if feature_tap is None:
            feature_tap = self.num_blocks - 1
        if not 0 <= feature_tap < self.num_blocks:
            raise InvalidArgument(f"feature_tap {feature_tap} out of range for {self.num_blocks} blocks")
        self.feature_tap = feature_tap
        if attention_block < 0:
            attention_block += self.num_blocks
        if not 0 <= attention_block < self.num_blocks:
            raise InvalidArgument(f"attention_block out of range for {self.num_blocks} blocks")
        self.attention_block = attention_block

    # -- model-specific hooks -------------------------------------------------
    def preprocess(self, image: np.ndarray) -> torch.Tensor:
        raise NotImplementedError

    def embed(self, pixels: torch.Tensor, grid_hw: tuple) -> torch.Tensor:
        raise NotImplementedError

    def run_block(self, index: int, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def pool(self, tokens: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_texts(self, sentences: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    # -- shared pipeline ------------------------------------------------------
    def input_size(self, h: int, w: int) -> tuple[int, int]:
        if h < self.patch_size or w < self.patch_size:
            raise InvalidArgument(
                f"image {h}x{w} is smaller than one {self.patch_size}px patch")
        return nearest_multiple(h, self.patch_size), nearest_multiple(w, self.patch_size)

    def forward(self, image) -> ForwardResult:
        image = to_uint8_rgb(image)
        h, w = image.shape[:2]
        H, W = self.input_size(h, w)
        if (H, W) != (h, w):
            image = np.asarray(Image.fromarray(image).resize((W, H), Image.BILINEAR))
        gh, gw = H // self.patch_size, W // self.patch_size

        with torch.enable_grad():
            pixels = self.preprocess(image)
            tokens = self.embed(pixels, (gh, gw))
            attn = None
            for b in range(self.feature_tap):
                tokens, a = self.run_block(b, tokens)
                if b == self.attention_block:
                    attn = a
            cls_token = tokens[:1].detach()
            values = tokens[1:].detach().reshape(gh, gw, -1).clone().requires_grad_(True)
            features = FeatureMap(values)
            pooled, tail_attn = self._tail(values, cls_token)
            if attn is None:
                attn = tail_attn

        return ForwardResult(
            features=features,
            attention=AttentionWeights(self._patch_attention(attn), self.attention_block),
            pooled=pooled,
            cls_token=cls_token,
            input_size=(H, W),
        )

    def _tail(self, values: torch.Tensor, cls_token: torch.Tensor):
        tokens = torch.cat([cls_token, values.reshape(-1, values.shape[-1])], dim=0)
        attn = None
        for b in range(self.feature_tap, self.num_blocks):
            tokens, a = self.run_block(b, tokens)
            if b == self.attention_block:
                attn = a
        pooled = self.pool(tokens)
        return pooled / pooled.norm(), attn

    def pooled_from_features(self, fwd: ForwardResult, values: torch.Tensor) -> torch.Tensor:
        """Re-run the blocks after the feature tap on (possibly perturbed) features."""
        with torch.enable_grad():
            return self._tail(values, fwd.cls_token)[0]

    @staticmethod
    def _patch_attention(attn: torch.Tensor) -> np.ndarray:
        a = attn.detach().to(torch.float64).mean(dim=0)[1:, 1:]
        a = a / a.sum(dim=1, keepdim=True)
        return a.cpu().numpy()

    def class_logits(self, pooled: torch.Tensor, text_embeddings, class_ids=None) -> ClassScores:
        text = torch.as_tensor(np.asarray(text_embeddings), dtype=pooled.dtype)
        if text.ndim != 2 or text.shape[1] != pooled.shape[-1]:
            raise InvalidArgument(
                f"text embeddings {tuple(text.shape)} do not match pooled dim {pooled.shape[-1]}")
        text = text / text.norm(dim=1, keepdim=True)
        logits = self.logit_scale * (text @ (pooled / pooled.norm()))
        probs = torch.softmax(logits, dim=0)
        if class_ids is None:
            class_ids = list(range(text.shape[0]))
        return ClassScores(logits, probs, list(class_ids), self.logit_scale)

    def grad_wrt_features(self, c: int, scores: ClassScores, features: FeatureMap) -> torch.Tensor:
        """d s^c / d A for the post-softmax probability of class index ``c``."""
        if not 0 <= c < scores.num_classes:
            raise InvalidArgument(f"class index {c} out of range [0, {scores.num_classes})")
        s = scores.probabilities[c]
        if not s.requires_grad:
            return torch.zeros_like(features.values)
        (g,) = torch.autograd.grad(s, features.values, retain_graph=True, allow_unused=True)
        return torch.zeros_like(features.values) if g is None else g

    def logit_grad_wrt_features(self, c: int, scores: ClassScores, features: FeatureMap) -> torch.Tensor:
        """d Y^c / d A, i.e. vanilla GradCAM without the softmax."""
        if not 0 <= c < scores.num_classes:
            raise InvalidArgument(f"class index {c} out of range [0, {scores.num_classes})")
        (g,) = torch.autograd.grad(scores.logits[c], features.values, retain_graph=True)
        return g
