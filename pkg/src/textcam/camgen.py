"""Softmax-GradCAM over the image's target classes plus a background set."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone, ForwardResult
from .errors import InvalidArgument
from .textbank import ClassVocabulary, background_sentences, build_sentences, fuse_class_cams, fuse_class_embeddings


@dataclass(frozen=True)
class CamStack:
    class_ids: list
    maps: np.ndarray  # K x h x w, float64
    normalized: bool = False
    resolution: str = "grid"  # "grid" | "image"

    def __post_init__(self):
        if self.maps.ndim != 3 or self.maps.shape[0] != len(self.class_ids):
            raise InvalidArgument(f"maps {self.maps.shape} do not match {len(self.class_ids)} class ids")

    @property
    def shape(self) -> tuple:
        return self.maps.shape[1:]


def text_passes(backbone: Backbone, vocab: ClassVocabulary, target_ids: Sequence[int],
                fusion: str = "sentence", use_background: bool = True) -> list:
    """Class-text matrices for each forward-pass-independent scoring round.

    Returns a list of ``(embeddings, valid)``: ``embeddings`` has one row per
    target followed by one per background name; ``valid[i]`` says whether
    target ``i`` gets a CAM from this round. Sentence and feature fusion
    yield one round; CAM fusion yields one round per synonym index.
    """
    per_class = build_sentences(vocab, fusion, target_ids)
    bg = background_sentences(vocab) if use_background else []
    flat = [s for _, sents in per_class for s in sents] + bg
    emb = backbone.encode_texts(flat)
    rows, i = [], 0
    for _, sents in per_class:
        rows.append(emb[i:i + len(sents)])
        i += len(sents)
    bg_emb = emb[i:]

    if fusion == "sentence":
        mat = np.concatenate([np.stack([r[0] for r in rows]), bg_emb])
        return [(mat, [True] * len(rows))]
    if fusion == "feature":
        fused = np.stack([fuse_class_embeddings(r) for r in rows])
        return [(np.concatenate([fused, bg_emb]), [True] * len(rows))]
    n_rounds = max(len(r) for r in rows)
    rounds = []
    for j in range(n_rounds):
        mat = np.stack([r[min(j, len(r) - 1)] for r in rows])
        rounds.append((np.concatenate([mat, bg_emb]), [j < len(r) for r in rows]))
    return rounds


def gradcam_from_forward(backbone: Backbone, fwd: ForwardResult, text_embeddings: np.ndarray,
                         n_targets: int, use_softmax: bool = True) -> np.ndarray:
    """CAMs for the first ``n_targets`` rows of ``text_embeddings``.

    Channel weights are the spatial mean of d s^c / d A (post-softmax score)
    or of d Y^c / d A when ``use_softmax`` is False.
    """
    scores = backbone.class_logits(fwd.pooled, text_embeddings)
    feats = fwd.features
    A = feats.values.detach()
    out = np.empty((n_targets, feats.grid_h, feats.grid_w))
    for c in range(n_targets):
        if use_softmax:
            g = backbone.grad_wrt_features(c, scores, feats)
        else:
            g = backbone.logit_grad_wrt_features(c, scores, feats)
        weights = g.sum(dim=(0, 1)) / feats.Z
        cam = torch.relu((A * weights).sum(dim=-1))
        out[c] = cam.to(torch.float64).cpu().numpy()
    return out


def generate_cams(image, target_ids: Sequence[int], vocab: ClassVocabulary, backbone: Backbone,
                  fusion: str = "sentence", use_softmax: bool = True,
                  use_background: bool = True) -> tuple[CamStack, ForwardResult]:
    """Run one forward pass and return the raw CAM stack with the forward result
    (whose attention feeds the affinity refinement)."""
    target_ids = list(target_ids)
    if not target_ids:
        raise InvalidArgument("at least one target class is required")
    for cid in target_ids:
        if not 0 <= cid < vocab.num_classes:
            raise InvalidArgument(f"class id {cid} has no text in the vocabulary")
    rounds = text_passes(backbone, vocab, target_ids, fusion, use_background)
    fwd = backbone.forward(image)
    k = len(target_ids)
    if len(rounds) == 1:
        maps = gradcam_from_forward(backbone, fwd, rounds[0][0], k, use_softmax)
    else:
        per_class = [[] for _ in range(k)]
        for emb, valid in rounds:
            m = gradcam_from_forward(backbone, fwd, emb, k, use_softmax)
            for i in range(k):
                if valid[i]:
                    per_class[i].append(m[i])
        maps = np.stack([fuse_class_cams(ms) for ms in per_class])
    return CamStack(target_ids, maps), fwd


def softmax_gradcam(image, target_ids: Sequence[int], vocab: ClassVocabulary, backbone: Backbone,
                    fusion: str = "sentence", use_softmax: bool = True,
                    use_background: bool = True) -> CamStack:
    return generate_cams(image, target_ids, vocab, backbone, fusion, use_softmax, use_background)[0]


def normalize(cams: CamStack) -> CamStack:
    """Divide each class map by its maximum; all-zero maps stay zero."""
    maps = np.asarray(cams.maps, dtype=np.float64)
    peak = maps.reshape(maps.shape[0], -1).max(axis=1)
    safe = np.where(peak > 0, peak, 1.0)
    return replace(cams, maps=maps / safe[:, None, None], normalized=True)


def upsample_to_image(cams: CamStack, image_h: int, image_w: int) -> CamStack:
    if cams.resolution != "grid":
        raise InvalidArgument("CAMs are already at image resolution")
    h, w = cams.shape
    if image_h < h or image_w < w:
        raise InvalidArgument(f"target {image_h}x{image_w} is smaller than grid {h}x{w}")
    t = torch.as_tensor(cams.maps, dtype=torch.float64).unsqueeze(0)
    up = F.interpolate(t, size=(image_h, image_w), mode="bilinear", align_corners=True)[0]
    return replace(cams, maps=np.maximum(up.numpy(), 0.0), resolution="image")
