"""mIoU, confidence histograms and the confidence-gated loss."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import InvalidArgument

IGNORE = 255
DEFAULT_CONF_BINS = (0.5, 0.8, 0.95, 1.0)


@dataclass(frozen=True)
class IoUReport:
    per_class: dict
    miou: float
    confusion: np.ndarray  # rows = ground truth, cols = prediction


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """Counts of (gt row, predicted column) for one image.

    Returns ``num_classes x (num_classes + 1)``: the extra last column counts
    valid gt pixels predicted as 255, which hurt recall of the gt class only.
    gt == 255 pixels are dropped.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidArgument(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    gt = gt.ravel().astype(np.int64)
    pred = pred.ravel().astype(np.int64)
    keep = gt != IGNORE
    gt, pred = gt[keep], pred[keep]
    if ((gt < 0) | (gt >= num_classes)).any():
        raise InvalidArgument(f"ground-truth labels must lie in [0, {num_classes}) or be {IGNORE}")
    if (((pred < 0) | (pred >= num_classes)) & (pred != IGNORE)).any():
        raise InvalidArgument(f"predicted labels must lie in [0, {num_classes}) or be {IGNORE}")
    pred = np.where(pred == IGNORE, num_classes, pred)
    n = num_classes + 1
    return np.bincount(gt * n + pred, minlength=num_classes * n).reshape(num_classes, n)


def report_from_counts(counts: np.ndarray) -> IoUReport:
    conf = counts[:, :-1]
    tp = np.diag(conf)
    fp = conf.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = {int(c): float(tp[c] / union[c]) for c in np.flatnonzero(union > 0)}
    miou = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return IoUReport(per_class, miou, conf.copy())


def miou(pred_masks: Iterable, gt_masks: Iterable, num_classes: int) -> IoUReport:
    counts = np.zeros((num_classes, num_classes + 1), dtype=np.int64)
    for p, g in zip(pred_masks, gt_masks, strict=True):
        counts += confusion_matrix(p, g, num_classes)
    return report_from_counts(counts)


def format_report(report: IoUReport, class_names=None) -> str:
    lines = [f"{'id':>4}  {'class':<20} {'IoU':>8}"]
    for cid, v in sorted(report.per_class.items()):
        name = class_names[cid] if class_names is not None and cid < len(class_names) else ""
        lines.append(f"{cid:>4}  {name:<20} {100 * v:8.2f}")
    lines.append(f"{'':>4}  {'mIoU':<20} {100 * report.miou:8.2f}")
    return "\n".join(lines) + "\n"


def format_kv(report: IoUReport) -> str:
    lines = [f"{cid}={v:.10f}" for cid, v in sorted(report.per_class.items())]
    lines.append(f"miou={report.miou:.10f}")
    return "\n".join(lines) + "\n"


def write_report(report: IoUReport, out_dir, stem: str = "miou", class_names=None) -> tuple:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt, kv = out_dir / f"{stem}.txt", out_dir / f"{stem}.kv"
    txt.write_text(format_report(report, class_names))
    kv.write_text(format_kv(report))
    return txt, kv


def confidence_histogram(conf_maps: Iterable, bin_edges=DEFAULT_CONF_BINS) -> list:
    """Fraction of pixels per bin; bins are [a, b) except the last, which is closed."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    vals = [np.asarray(m, dtype=np.float64).ravel() for m in conf_maps]
    vals = np.concatenate(vals) if vals else np.empty(0)
    if vals.size == 0:
        raise InvalidArgument("no confidence values")
    if (vals < 0).any() or (vals > 1).any() or np.isnan(vals).any():
        raise InvalidArgument("confidence values must lie in [0, 1]")
    if (vals < edges[0]).any() or (vals > edges[-1]).any():
        raise InvalidArgument(f"confidence values fall outside the bins [{edges[0]}, {edges[-1]}]")
    counts, _ = np.histogram(vals, bins=edges)
    freq = counts / vals.size
    return [((float(a), float(b)), float(f)) for a, b, f in zip(edges[:-1], edges[1:], freq)]


def cgl(loss_map, conf, mu: float):
    """Zero the loss where confidence is below ``mu``.

    Returns the masked map and its mean over the kept pixels (0 if none)."""
    L = np.asarray(loss_map, dtype=np.float64)
    C = np.asarray(conf, dtype=np.float64)
    if L.shape != C.shape:
        raise InvalidArgument(f"loss {L.shape} and confidence {C.shape} differ in shape")
    keep = C >= mu
    masked = np.where(keep, L, 0.0)
    return masked, float(masked.sum() / max(1, int(keep.sum())))


def pixel_cross_entropy(logits, labels, ignore_index: int = IGNORE):
    """Per-pixel CE for C x h x w logits; returns (loss map, mean over non-ignored)."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    z = z - z.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    valid = y != ignore_index
    idx = np.where(valid, y, 0)
    loss = -np.take_along_axis(logp, idx[None], axis=0)[0]
    loss = np.where(valid, loss, 0.0)
    return loss, float(loss.sum() / max(1, int(valid.sum())))
