"""From refined CAMs to pseudo masks: background channel, dense CRF,
confidence map and ignore stamping."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camgen import CamStack
from .crf import CRFParams, dense_crf as _dense_crf
from .errors import InvalidArgument

IGNORE = 255
BACKGROUND = -1
DEFAULT_MU = 0.95


@dataclass(frozen=True)
class ProbabilityStack:
    values: np.ndarray  # (K+1) x h x w, channel 0 is background
    channel_ids: list  # [BACKGROUND, id_1, ..., id_K]

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != len(self.channel_ids):
            raise InvalidArgument("values and channel_ids disagree")

    @property
    def class_ids(self) -> list:
        return self.channel_ids[1:]


@dataclass(frozen=True)
class PseudoMask:
    labels: np.ndarray  # uint8 h x w: 0 background, id+1 foreground, 255 ignore
    confidence: np.ndarray  # float32 h x w in [0.5, 1]


def to_probabilities(cams: CamStack) -> ProbabilityStack:
    """Background score 1 - max_c cam_c, then per-pixel renormalization."""
    if not cams.normalized:
        raise InvalidArgument("CAMs must be normalized")
    maps = np.clip(np.asarray(cams.maps, dtype=np.float64), 0.0, 1.0)
    bg = 1.0 - maps.max(axis=0)
    stack = np.concatenate([bg[None], maps], axis=0)
    stack /= stack.sum(axis=0, keepdims=True)
    return ProbabilityStack(stack, [BACKGROUND] + list(cams.class_ids))


def dense_crf(image, probs: ProbabilityStack, params: CRFParams = CRFParams()) -> ProbabilityStack:
    return ProbabilityStack(_dense_crf(image, probs.values, params), list(probs.channel_ids))


def confidence_map(probs: ProbabilityStack) -> np.ndarray:
    """max(1 - p, p) where p is the strongest foreground probability."""
    fg = probs.values[1:]
    p = fg.max(axis=0) if fg.shape[0] else np.zeros(probs.values.shape[1:])
    return np.maximum(1.0 - p, p)


def finalize(probs: ProbabilityStack, mu: float = DEFAULT_MU) -> PseudoMask:
    if not 0.5 <= mu <= 1.0:
        raise InvalidArgument("mu must lie in [0.5, 1]")
    label_of_channel = np.array([0] + [cid + 1 for cid in probs.class_ids], dtype=np.int64)
    if label_of_channel.max() >= IGNORE:
        raise InvalidArgument("class ids must be below 254 to fit an 8-bit mask")
    labels = label_of_channel[probs.values.argmax(axis=0)].astype(np.uint8)
    # gate on the stored float32 map so "labeled => conf >= mu" holds on disk too
    conf = confidence_map(probs).astype(np.float32)
    labels[conf < mu] = IGNORE
    return PseudoMask(labels, conf)


def voc_palette() -> list:
    """Standard VOC colour map for 256 indices."""
    palette = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette.extend((r, g, b))
    return palette


def save_mask(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    img = Image.frombytes("P", (labels.shape[1], labels.shape[0]), labels.tobytes())
    img.putpalette(voc_palette())
    img.save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise InvalidArgument(f"{path}: expected an indexed or grayscale mask, got mode {img.mode}")
    return np.asarray(img, dtype=np.uint8)


def save_confidence(path, conf: np.ndarray) -> None:
    """32-bit float single-channel TIFF, written under a ``.conf`` name."""
    Image.fromarray(np.ascontiguousarray(conf, dtype=np.float32)).save(path, format="TIFF")


def load_confidence(path) -> np.ndarray:
    return np.asarray(Image.open(Path(path)), dtype=np.float32)
