"""Adapter for pretrained CLIP ViT checkpoints loaded through ``transformers``."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import InvalidArgument
from .base import Backbone, interpolate_pos_embed

CLIP_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
CLIP_STD = np.array([0.26862954, 0.26130258, 0.27577711])


class ClipBackbone(Backbone):
    """Wraps a ``transformers.CLIPModel``.

    The encoder layers are evaluated by hand so that the per-head attention
    weights of any block are available and the patch tokens entering the
    feature-tap block can be made a gradient leaf.
    """

    def __init__(self, model, tokenizer=None, logit_scale: float | None = None,
                 dtype=torch.float32, device: str = "cpu", **kwargs):
        self.model = model.to(device=device, dtype=dtype).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.dtype = dtype
        self.device = device
        vision = self.model.vision_model
        self.layers = list(vision.encoder.layers)
        self.num_blocks = len(self.layers)
        cfg = self.model.config.vision_config
        self.base_grid = cfg.image_size // cfg.patch_size
        if logit_scale is None:
            logit_scale = float(self.model.logit_scale.exp())
        super().__init__(patch_size=cfg.patch_size, logit_scale=logit_scale, **kwargs)

    @classmethod
    def from_pretrained(cls, name_or_path: str, **kwargs):
        from transformers import CLIPModel, CLIPTokenizer

        model = CLIPModel.from_pretrained(name_or_path)
        tokenizer = CLIPTokenizer.from_pretrained(name_or_path)
        return cls(model, tokenizer, **kwargs)

    def preprocess(self, image: np.ndarray) -> torch.Tensor:
        x = (image.astype(np.float64) / 255.0 - CLIP_MEAN) / CLIP_STD
        return torch.tensor(x, dtype=self.dtype, device=self.device).permute(2, 0, 1)

    def embed(self, pixels: torch.Tensor, grid_hw: tuple) -> torch.Tensor:
        vision = self.model.vision_model
        emb = vision.embeddings
        patches = emb.patch_embedding(pixels.unsqueeze(0))  # 1 x D x gh x gw
        patches = patches.flatten(2).transpose(1, 2)[0]
        pos = emb.position_embedding.weight
        grid_pos = interpolate_pos_embed(pos[1:], (self.base_grid, self.base_grid), grid_hw)
        cls = (emb.class_embedding + pos[0]).unsqueeze(0)
        tokens = torch.cat([cls, patches + grid_pos], dim=0)
        return vision.pre_layrnorm(tokens)

    def run_block(self, index: int, tokens: torch.Tensor):
        layer = self.layers[index]
        attn_mod = layer.self_attn
        n, d = tokens.shape
        nh = attn_mod.num_heads
        hd = d // nh
        x = layer.layer_norm1(tokens)
        q = attn_mod.q_proj(x).reshape(n, nh, hd).transpose(0, 1)
        k = attn_mod.k_proj(x).reshape(n, nh, hd).transpose(0, 1)
        v = attn_mod.v_proj(x).reshape(n, nh, hd).transpose(0, 1)
        attn = torch.softmax((q * attn_mod.scale) @ k.transpose(1, 2), dim=-1)
        y = (attn @ v).transpose(0, 1).reshape(n, d)
        tokens = tokens + attn_mod.out_proj(y)
        tokens = tokens + layer.mlp(layer.layer_norm2(tokens))
        return tokens, attn

    def pool(self, tokens: torch.Tensor) -> torch.Tensor:
        vision = self.model.vision_model
        if self.pooling_mode == "avg_token":
            t = tokens[1:].mean(dim=0)
        else:
            t = tokens[0]
        return self.model.visual_projection(vision.post_layernorm(t))

    @torch.no_grad()
    def encode_texts(self, sentences: Sequence[str]) -> np.ndarray:
        if len(sentences) == 0:
            raise InvalidArgument("encode_texts needs at least one sentence")
        if self.tokenizer is None:
            raise InvalidArgument("this backbone was built without a tokenizer")
        batch = self.tokenizer(list(sentences), padding=True, return_tensors="pt")
        batch = {k: v.to(self.device) for k, v in batch.items()}
        out = self.model.get_text_features(**batch)
        if not torch.is_tensor(out):
            out = out.pooler_output
        out = F.normalize(out.to(torch.float64), dim=-1)
        return out.cpu().numpy()
