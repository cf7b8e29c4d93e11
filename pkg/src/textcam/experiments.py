"""Dataset-level experiments: prompt sharpness, lambda sweeps, timing,
visualization and directory evaluation."""
from __future__ import annotations

import time
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from . import camio
from .camgen import CamStack, text_passes, upsample_to_image
from .config import DatasetManifest, PipelineConfig
from .errors import InvalidArgument
from .evalkit import IoUReport, confusion_matrix, miou, report_from_counts
from .maskgen import IGNORE, load_mask, voc_palette
from .pipeline import (
    compute_cams,
    get_backbone,
    make_pseudo_mask,
    read_image,
    refine_cams,
    seed_labels,
)
from .textbank import rank_prompts, sharpness


def prompt_sharpness(prompts, manifest: DatasetManifest, config: PipelineConfig) -> list:
    """Rank prompt templates by sharpness of the target-class probabilities.

    Probabilities are a softmax over the vocabulary's foreground classes only.
    """
    backbone = get_backbone(config)
    vocab = config.vocabulary()
    fusion = "feature" if config["text.fusion"] == "cam" else config["text.fusion"]
    all_ids = list(range(vocab.num_classes))
    pooled = []
    for e in manifest.entries:
        fwd = backbone.forward(read_image(e.image_path))
        pooled.append((fwd.pooled.detach(), e.class_ids))

    def scorer(prompt):
        emb = text_passes(backbone, vocab.with_template(prompt), all_ids, fusion, use_background=False)[0][0]
        per_image = []
        for p, ids in pooled:
            probs = backbone.class_logits(p, emb).probabilities.detach().cpu().numpy()
            per_image.append(probs[list(ids)])
        return sharpness(prompt, per_image)

    return rank_prompts(prompts, scorer)


def _gt_pairs(manifest: DatasetManifest):
    missing = [e.image_id for e in manifest.entries if e.gt_path is None or not e.gt_path.is_file()]
    if missing:
        raise InvalidArgument(f"ground truth missing for {len(missing)} image(s), e.g. {missing[0]}")
    return [(e, load_mask(e.gt_path)) for e in manifest.entries]


def _cams_for(entry, config, out: Path | None):
    path = out / "cams" / f"{entry.image_id}.cams" if out is not None else None
    if path is not None and path.is_file():
        ids, maps, attn = camio.read(path)
        return CamStack(list(ids), maps.astype(np.float64), normalized=True), attn
    r = compute_cams(read_image(entry.image_path), entry.class_ids, config)
    return r.cams, r.attention


def seed_miou(manifest: DatasetManifest, config: PipelineConfig) -> IoUReport:
    """mIoU of initial CAMs (no refinement, no CRF) against ground truth."""
    n = config.vocabulary().num_classes + 1
    preds, gts = [], []
    for entry, gt in _gt_pairs(manifest):
        r = compute_cams(read_image(entry.image_path), entry.class_ids, config)
        preds.append(seed_labels(r.cams, *gt.shape))
        gts.append(gt)
    return miou(preds, gts, n)


def sweep_lambda(manifest: DatasetManifest, config: PipelineConfig, lambdas, out=None) -> dict:
    """mIoU of refined CAMs for each threshold; key ``None`` is the unrefined seed."""
    n = config.vocabulary().num_classes + 1
    counts = {None: np.zeros((n, n + 1), np.int64)}
    counts.update({float(l): np.zeros((n, n + 1), np.int64) for l in lambdas})
    out = Path(out) if out is not None else None
    for entry, gt in _gt_pairs(manifest):
        cams, attn = _cams_for(entry, config, out)
        counts[None] += confusion_matrix(seed_labels(cams, *gt.shape), gt, n)
        for lam in lambdas:
            refined = refine_cams(cams, attn, config, lam=float(lam))
            counts[float(lam)] += confusion_matrix(seed_labels(refined, *gt.shape), gt, n)
    return {k: report_from_counts(v) for k, v in counts.items()}


def format_sweep(reports: dict) -> str:
    lines = [f"{'lambda':>8}  {'mIoU':>8}"]
    for k, r in reports.items():
        label = "initial" if k is None else f"{k:.2f}"
        lines.append(f"{label:>8}  {100 * r.miou:8.2f}")
    return "\n".join(lines) + "\n"


def format_sharpness(reports, mious=None) -> str:
    lines = [f"{'rank':>4}  {'sharpness':>12}" + (f"  {'mIoU':>7}" if mious else "") + "  prompt"]
    for i, r in enumerate(reports, 1):
        extra = f"  {100 * mious[r.prompt]:7.2f}" if mious else ""
        lines.append(f"{i:>4}  {r.sharpness:12.6f}{extra}  {r.prompt}")
    return "\n".join(lines) + "\n"


def timing(manifest: DatasetManifest, config: PipelineConfig) -> dict:
    """Wall-clock seconds per stage, summed over the manifest."""
    backbone = get_backbone(config)
    vocab = config.vocabulary()
    totals = {"cam": 0.0, "caa": 0.0, "mask": 0.0}
    for e in manifest.entries:
        image = read_image(e.image_path)
        t0 = time.perf_counter()
        r = compute_cams(image, e.class_ids, config, backbone, vocab)
        t1 = time.perf_counter()
        refined = refine_cams(r.cams, r.attention, config)
        t2 = time.perf_counter()
        make_pseudo_mask(image, refined, config)
        t3 = time.perf_counter()
        totals["cam"] += t1 - t0
        totals["caa"] += t2 - t1
        totals["mask"] += t3 - t2
    totals["total"] = sum(totals.values())
    totals["images"] = len(manifest)
    return totals


def format_timing(t: dict) -> str:
    n = max(1, t["images"])
    lines = [f"images: {t['images']}", f"{'stage':<8} {'total_s':>10} {'per_image_s':>12}"]
    for k in ("cam", "caa", "mask", "total"):
        lines.append(f"{k:<8} {t[k]:10.3f} {t[k] / n:12.4f}")
    return "\n".join(lines) + "\n"


def _overlay(image: np.ndarray, rgb: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    return (image.astype(np.float64) * (1 - alpha) + rgb.astype(np.float64) * alpha).astype(np.uint8)


def visualize(manifest: DatasetManifest, config: PipelineConfig, out, masks_dir=None, cams_dir=None) -> list:
    """Write mask overlays and per-class CAM heatmaps under ``<out>/vis``."""
    out = Path(out)
    masks_dir = Path(masks_dir) if masks_dir else out / "masks"
    cams_dir = Path(cams_dir) if cams_dir else out / "cams_refined"
    vis = out / "vis"
    vis.mkdir(parents=True, exist_ok=True)
    vocab = config.vocabulary()
    palette = np.array(voc_palette(), dtype=np.uint8).reshape(256, 3)
    jet = colormaps["jet"]
    written = []
    for e in manifest.entries:
        image = read_image(e.image_path)
        mpath = masks_dir / f"{e.image_id}.png"
        if mpath.is_file():
            labels = load_mask(mpath)
            colour = palette[labels]
            blend = _overlay(image, colour)
            blend[labels == IGNORE] = 255
            p = vis / f"{e.image_id}_mask.png"
            Image.fromarray(blend).save(p)
            written.append(p)
        cpath = cams_dir / f"{e.image_id}.cams"
        if cpath.is_file():
            ids, maps, _ = camio.read(cpath)
            stack = upsample_to_image(CamStack(list(ids), maps.astype(np.float64), True), *image.shape[:2])
            for cid, m in zip(stack.class_ids, stack.maps):
                heat = (jet(np.clip(m, 0, 1))[..., :3] * 255).astype(np.uint8)
                name = vocab.foreground[cid].canonical_name.replace(" ", "_")
                p = vis / f"{e.image_id}_cam_{name}.png"
                Image.fromarray(_overlay(image, heat)).save(p)
                written.append(p)
    return written


def eval_dirs(pred_dir, gt_dir, num_classes: int) -> tuple:
    """Pair ``*.png`` masks by file stem; returns (report, unmatched prediction ids)."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts, missing = [], [], []
    for p in sorted(pred_dir.glob("*.png")):
        g = gt_dir / p.name
        if not g.is_file():
            missing.append(p.stem)
            continue
        preds.append(load_mask(p))
        gts.append(load_mask(g))
    if not preds:
        raise InvalidArgument(f"no prediction/ground-truth pairs between {pred_dir} and {gt_dir}")
    return miou(preds, gts, num_classes), missing
