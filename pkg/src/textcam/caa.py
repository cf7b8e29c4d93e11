"""Class-aware attention-based affinity refinement of CAMs."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .backbone import AttentionWeights
from .camgen import CamStack, normalize
from .errors import DegenerateInput, InvalidArgument

SINKHORN_TOL = 1e-4
SINKHORN_MAX_ITERS = 100
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SinkhornResult:
    matrix: np.ndarray
    iterations: int
    residual: float
    residuals: list = field(default_factory=list)  # residual before iteration 1, after each iteration


def stochastic_residual(m: np.ndarray) -> float:
    return float(max(np.abs(m.sum(axis=1) - 1).max(), np.abs(m.sum(axis=0) - 1).max()))


def sinkhorn(W, tol: float = SINKHORN_TOL, max_iters: int = SINKHORN_MAX_ITERS) -> SinkhornResult:
    """Alternate row and column normalization until both sums are within
    ``tol`` of one, or ``max_iters`` full (row + column) sweeps have run."""
    D = np.array(W, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise InvalidArgument(f"expected a square matrix, got {D.shape}")
    if (D < 0).any():
        raise InvalidArgument("matrix has negative entries")
    if (D.sum(axis=1) == 0).any() or (D.sum(axis=0) == 0).any():
        raise DegenerateInput("matrix has an all-zero row or column")
    res = stochastic_residual(D)
    history = [res]
    it = 0
    while res > tol and it < max_iters:
        D /= D.sum(axis=1, keepdims=True)
        D /= D.sum(axis=0, keepdims=True)
        it += 1
        res = stochastic_residual(D)
        history.append(res)
    return SinkhornResult(D, it, res, history)


@dataclass(frozen=True)
class AffinityMatrix:
    values: np.ndarray
    sinkhorn_iters_used: int
    residual: float

    @property
    def size(self) -> int:
        return self.values.shape[0]


def build_affinity(attn, tol: float = SINKHORN_TOL, max_iters: int = SINKHORN_MAX_ITERS) -> AffinityMatrix:
    W = attn.values if isinstance(attn, AttentionWeights) else attn
    res = sinkhorn(W, tol, max_iters)
    D = res.matrix
    A = (D + D.T) / 2
    return AffinityMatrix(A, res.iterations, stochastic_residual(A))


@dataclass(frozen=True)
class BoxMask:
    class_id: int
    mask: np.ndarray  # flat bool, length h*w, row-major
    boxes: list  # (row0, col0, row1, col1), inclusive


def box_mask(cam, lam: float, class_id: int = -1) -> BoxMask:
    """Union of the minimal bounding boxes of the 4-connected regions of
    ``cam >= lam``. If nothing passes the threshold the whole grid is kept."""
    cam = np.asarray(cam)
    h, w = cam.shape
    labels, n = ndimage.label(cam >= lam, structure=FOUR_CONNECTED)
    grid = np.zeros((h, w), dtype=bool)
    boxes = []
    for sl in ndimage.find_objects(labels):
        r, c = sl
        boxes.append((r.start, c.start, r.stop - 1, c.stop - 1))
        grid[sl] = True
    if n == 0:
        boxes = [(0, 0, h - 1, w - 1)]
        grid[:] = True
    return BoxMask(class_id, grid.ravel(), boxes)


def propagate(v: np.ndarray, A: np.ndarray, t: int) -> np.ndarray:
    """A^t v by repeated matrix-vector products; A^t is never formed."""
    v = np.asarray(v, dtype=np.float64)
    for _ in range(t):
        v = A @ v
    return v


def refine(cams: CamStack, A: AffinityMatrix, lam: float = 0.4, t: int = 2,
           class_aware: bool = True) -> CamStack:
    """Propagate each class map through the affinity ``t`` times and keep only
    the part inside that class's boxes. ``class_aware=False`` skips the box
    mask (plain attention propagation)."""
    if cams.resolution != "grid":
        raise InvalidArgument("refine works on grid-resolution CAMs")
    if not 0 <= lam <= 1:
        raise InvalidArgument("lambda must lie in [0, 1]")
    if t < 0:
        raise InvalidArgument("t must be non-negative")
    h, w = cams.shape
    if A.size != h * w:
        raise InvalidArgument(f"affinity is {A.size}x{A.size} but CAM grid has {h * w} cells")
    if not cams.normalized:
        cams = normalize(cams)
    out = np.empty_like(cams.maps, dtype=np.float64)
    for i, cid in enumerate(cams.class_ids):
        v = propagate(cams.maps[i].ravel(), A.values, t)
        if class_aware:
            v = v * box_mask(cams.maps[i], lam, cid).mask
        out[i] = v.reshape(h, w)
    return normalize(replace(cams, maps=np.maximum(out, 0.0), normalized=False))
