"""Per-image stages and the sharded driver used by the command line."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import camio
from .backbone import Backbone, load_backbone
from .caa import build_affinity, refine
from .camgen import CamStack, generate_cams, normalize, upsample_to_image
from .config import DatasetManifest, ManifestEntry, PipelineConfig
from .maskgen import dense_crf, finalize, save_confidence, save_mask, to_probabilities

log = logging.getLogger(__name__)

STAGES = ("camgen", "refine", "maskgen")
LAYOUT = {"camgen": "cams", "refine": "cams_refined", "masks": "masks", "conf": "conf", "reports": "reports"}

_BACKBONES: dict = {}


def get_backbone(config: PipelineConfig) -> Backbone:
    key = (config["backbone.weights"], config["backbone.pooling_mode"], config["backbone.logit_scale"],
           config["backbone.attention_block"], config["backbone.device"])
    if key not in _BACKBONES:
        kwargs = {}
        if not key[0].startswith("mock:"):
            kwargs["device"] = key[4]
        _BACKBONES[key] = load_backbone(key[0], pooling_mode=key[1], logit_scale=key[2],
                                        attention_block=key[3], **kwargs)
    return _BACKBONES[key]


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


@dataclass
class ImageCams:
    cams: CamStack  # normalized, grid resolution
    attention: np.ndarray
    image_size: tuple


def compute_cams(image: np.ndarray, class_ids, config: PipelineConfig, backbone=None, vocab=None) -> ImageCams:
    backbone = backbone or get_backbone(config)
    vocab = vocab or config.vocabulary()
    cams, fwd = generate_cams(image, class_ids, vocab, backbone, fusion=config["text.fusion"],
                              use_softmax=config["camgen.softmax"])
    return ImageCams(normalize(cams), fwd.attention.values, image.shape[:2])


def refine_cams(cams: CamStack, attention: np.ndarray, config: PipelineConfig, lam=None) -> CamStack:
    A = build_affinity(np.asarray(attention, dtype=np.float64), config["caa.sinkhorn_tol"],
                       config["caa.sinkhorn_max_iters"])
    return refine(cams, A, config["caa.lambda"] if lam is None else lam, config["caa.t"],
                  class_aware=config["caa.class_aware"])


def seed_labels(cams: CamStack, image_h: int, image_w: int) -> np.ndarray:
    """Label map straight from grid CAMs (no CRF, nothing ignored)."""
    up = upsample_to_image(cams, image_h, image_w)
    return finalize(to_probabilities(up), mu=0.5).labels


def make_pseudo_mask(image: np.ndarray, cams: CamStack, config: PipelineConfig):
    up = upsample_to_image(cams, image.shape[0], image.shape[1])
    probs = to_probabilities(up)
    if config["crf.enabled"]:
        probs = dense_crf(image, probs, config.crf_params())
    return finalize(probs, config["mask.mu"])


# -- per-image stage bodies -----------------------------------------------------

def _stack_from_file(path) -> tuple:
    ids, maps, attn = camio.read(path)
    return CamStack(list(ids), maps.astype(np.float64), normalized=True), attn


def stage_outputs(stage: str, out: Path, entry: ManifestEntry) -> list:
    if stage == "camgen":
        return [out / "cams" / f"{entry.image_id}.cams"]
    if stage == "refine":
        return [out / "cams_refined" / f"{entry.image_id}.cams"]
    return [out / "masks" / f"{entry.image_id}.png", out / "conf" / f"{entry.image_id}.conf"]


def run_one(stage: str, entry: ManifestEntry, config: PipelineConfig, out: Path) -> None:
    if stage == "camgen":
        image = read_image(entry.image_path)
        r = compute_cams(image, entry.class_ids, config)
        camio.write(stage_outputs(stage, out, entry)[0], r.cams.class_ids, r.cams.maps, r.attention)
    elif stage == "refine":
        cams, attn = _stack_from_file(out / "cams" / f"{entry.image_id}.cams")
        if attn is None:
            raise ValueError("CAM file carries no attention matrix")
        refined = refine_cams(cams, attn, config)
        camio.write(stage_outputs(stage, out, entry)[0], refined.class_ids, refined.maps)
    elif stage == "maskgen":
        cams, _ = _stack_from_file(out / "cams_refined" / f"{entry.image_id}.cams")
        image = read_image(entry.image_path)
        pm = make_pseudo_mask(image, cams, config)
        mask_path, conf_path = stage_outputs(stage, out, entry)
        save_mask(mask_path, pm.labels)
        save_confidence(conf_path, pm.confidence)
    else:
        raise ValueError(f"unknown stage {stage!r}")


@dataclass
class StageSummary:
    stage: str
    written: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    failed: list = field(default_factory=list)  # (image_id, message)

    def merge(self, other: "StageSummary") -> None:
        self.written += other.written
        self.skipped += other.skipped
        self.failed += other.failed


def _run_shard(stage: str, config_values: dict, out: str, entries: list, force: bool) -> StageSummary:
    config = PipelineConfig(config_values)
    out = Path(out)
    summary = StageSummary(stage)
    for entry in entries:
        targets = stage_outputs(stage, out, entry)
        if not force and all(p.exists() for p in targets):
            summary.skipped.append(entry.image_id)
            continue
        try:
            run_one(stage, entry, config, out)
        except Exception as exc:  # one bad image must not stop the batch
            log.warning("%s: %s failed: %s", stage, entry.image_id, exc)
            summary.failed.append((entry.image_id, str(exc)))
        else:
            summary.written.append(entry.image_id)
    return summary


def run_stage(stage: str, manifest: DatasetManifest, config: PipelineConfig, out, jobs: int = 1,
              force: bool = False) -> StageSummary:
    """Process every manifest image for one stage, sharding over ``jobs`` worker
    processes. Results do not depend on ``jobs``."""
    out = Path(out)
    for sub in ("cams", "cams_refined", "masks", "conf", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = list(manifest.entries)
    jobs = max(1, min(jobs, len(entries)))
    total = StageSummary(stage)
    if jobs == 1:
        total.merge(_run_shard(stage, config.values, str(out), entries, force))
    else:
        shards = [entries[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_shard, stage, config.values, str(out), s, force) for s in shards]
            for f in futures:
                total.merge(f.result())
    log.info("%s: %d written, %d skipped, %d failed", stage, len(total.written),
             len(total.skipped), len(total.failed))
    return total


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - t0
