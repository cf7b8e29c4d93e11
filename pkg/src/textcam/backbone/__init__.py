from .base import (
    POOLING_MODES,
    AttentionWeights,
    Backbone,
    ClassScores,
    FeatureMap,
    ForwardResult,
)
from .mock import MockBackbone, hash_text_embedding

__all__ = [
    "POOLING_MODES", "AttentionWeights", "Backbone", "ClassScores", "FeatureMap",
    "ForwardResult", "MockBackbone", "hash_text_embedding", "load_backbone",
]


def load_backbone(weights: str, pooling_mode: str = "avg_token", logit_scale: float | None = 100.0,
                  attention_block: int = -1, **kwargs) -> Backbone:
    """Build a backbone from a ``backbone.weights`` value.

    ``mock:<seed>`` selects the offline mock; anything else is handed to
    ``transformers`` as a local directory or a hub identifier.
    """
    if weights.startswith("mock:"):
        seed = int(weights.split(":", 1)[1] or 0)
        return MockBackbone(seed=seed, pooling_mode=pooling_mode,
                            logit_scale=100.0 if logit_scale is None else logit_scale,
                            attention_block=attention_block, **kwargs)
    from .clip_hf import ClipBackbone

    return ClipBackbone.from_pretrained(weights, pooling_mode=pooling_mode, logit_scale=logit_scale,
                                        attention_block=attention_block, **kwargs)
