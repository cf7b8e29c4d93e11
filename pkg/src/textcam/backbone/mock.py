"""Deterministic stand-in for a contrastive vision-language model.

The vision side is a two-block pre-LN transformer with fixed random weights
drawn from ``numpy.random.default_rng(seed)``; it runs in float64 so that
gradients can be probed with finite differences. The text side is a
hash-to-vector encoder:

    key  = sha256(f"{seed}:{sentence}".encode("utf-8")).digest()[:8]
    rng  = numpy.random.default_rng(int.from_bytes(key, "little"))
    vec  = rng.standard_normal(channels)
    emb  = vec / ||vec||

so text embeddings are reproducible without any model weights.
"""
from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import InvalidArgument
from .base import Backbone, interpolate_pos_embed

_MEAN = np.array([0.485, 0.456, 0.406])
_STD = np.array([0.229, 0.224, 0.225])


def hash_text_embedding(sentence: str, seed: int, channels: int) -> np.ndarray:
    key = hashlib.sha256(f"{seed}:{sentence}".encode("utf-8")).digest()[:8]
    rng = np.random.default_rng(int.from_bytes(key, "little"))
    vec = rng.standard_normal(channels)
    return vec / np.linalg.norm(vec)


class MockBackbone(Backbone):
    dtype = torch.float64
    num_blocks = 2

    def __init__(self, seed: int = 0, channels: int = 16, heads: int = 2,
                 patch_size: int = 16, base_grid: int = 14, **kwargs):
        if channels % heads:
            raise InvalidArgument("channels must be divisible by heads")
        self.seed = int(seed)
        self.channels = channels
        self.heads = heads
        self.base_grid = base_grid
        super().__init__(patch_size=patch_size, **kwargs)

        rng = np.random.default_rng(self.seed)
        d, p = channels, patch_size

        def w(*shape, fan_in):
            return torch.tensor(rng.standard_normal(shape) / math.sqrt(fan_in), dtype=self.dtype)

        self.patch_proj = w(3 * p * p, d, fan_in=3 * p * p)
        self.cls_embed = w(d, fan_in=1) * 0.1
        self.pos_embed = w(1 + base_grid * base_grid, d, fan_in=1) * 0.1
        self.blocks = []
        for _ in range(self.num_blocks):
            self.blocks.append(dict(
                ln1_g=torch.ones(d, dtype=self.dtype), ln1_b=torch.zeros(d, dtype=self.dtype),
                qkv=w(d, 3 * d, fan_in=d), out=w(d, d, fan_in=d),
                ln2_g=torch.ones(d, dtype=self.dtype), ln2_b=torch.zeros(d, dtype=self.dtype),
                fc1=w(d, 2 * d, fan_in=d), fc2=w(2 * d, d, fan_in=2 * d),
            ))

    def preprocess(self, image: np.ndarray) -> torch.Tensor:
        x = (image.astype(np.float64) / 255.0 - _MEAN) / _STD
        return torch.tensor(x, dtype=self.dtype).permute(2, 0, 1)

    def embed(self, pixels: torch.Tensor, grid_hw: tuple) -> torch.Tensor:
        p = self.patch_size
        gh, gw = grid_hw
        patches = pixels.reshape(3, gh, p, gw, p).permute(1, 3, 0, 2, 4).reshape(gh * gw, -1)
        tokens = patches @ self.patch_proj
        grid_pos = interpolate_pos_embed(self.pos_embed[1:], (self.base_grid, self.base_grid), grid_hw)
        tokens = tokens + grid_pos
        cls = (self.cls_embed + self.pos_embed[0]).unsqueeze(0)
        return torch.cat([cls, tokens], dim=0)

    def run_block(self, index: int, tokens: torch.Tensor):
        blk = self.blocks[index]
        d, nh = self.channels, self.heads
        hd = d // nh
        n = tokens.shape[0]
        x = F.layer_norm(tokens, (d,), blk["ln1_g"], blk["ln1_b"])
        q, k, v = (x @ blk["qkv"]).split(d, dim=1)
        q = q.reshape(n, nh, hd).transpose(0, 1)
        k = k.reshape(n, nh, hd).transpose(0, 1)
        v = v.reshape(n, nh, hd).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(hd), dim=-1)
        y = (attn @ v).transpose(0, 1).reshape(n, d) @ blk["out"]
        tokens = tokens + y
        x = F.layer_norm(tokens, (d,), blk["ln2_g"], blk["ln2_b"])
        tokens = tokens + F.gelu(x @ blk["fc1"], approximate="tanh") @ blk["fc2"]
        return tokens, attn

    def pool(self, tokens: torch.Tensor) -> torch.Tensor:
        if self.pooling_mode == "avg_token":
            return tokens[1:].mean(dim=0)
        return tokens[0]

    def encode_texts(self, sentences: Sequence[str]) -> np.ndarray:
        if len(sentences) == 0:
            raise InvalidArgument("encode_texts needs at least one sentence")
        return np.stack([hash_text_embedding(s, self.seed, self.channels) for s in sentences])
