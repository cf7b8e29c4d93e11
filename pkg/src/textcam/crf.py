"""Fully connected CRF with Gaussian smoothness and bilateral appearance
kernels, solved by mean-field iteration (Potts compatibility)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .permutohedral import PermutohedralLattice

PROB_FLOOR = 1e-8


@dataclass(frozen=True)
class CRFParams:
    iterations: int = 10
    smooth_weight: float = 3.0
    smooth_sxy: float = 3.0
    appearance_weight: float = 4.0
    appearance_sxy: float = 121.0
    appearance_srgb: float = 5.0


def kernel_features(image: np.ndarray, params: CRFParams):
    """(weight, N x d feature array) for each active kernel."""
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xy = np.stack([xx, yy], axis=-1).reshape(-1, 2)
    out = []
    if params.smooth_weight:
        out.append((params.smooth_weight, xy / params.smooth_sxy))
    if params.appearance_weight:
        rgb = image.reshape(-1, 3).astype(np.float64) / params.appearance_srgb
        out.append((params.appearance_weight, np.concatenate([xy / params.appearance_sxy, rgb], axis=1)))
    return out


def softmax_channels(energy: np.ndarray) -> np.ndarray:
    e = energy - energy.max(axis=0, keepdims=True)
    np.exp(e, out=e)
    return e / e.sum(axis=0, keepdims=True)


def mean_field(unary: np.ndarray, kernels, iterations: int) -> np.ndarray:
    """Mean-field updates on a flattened problem.

    unary: L x N energies. ``kernels`` is a list of ``(weight, filter_fn)``
    where ``filter_fn`` maps an N x L array to the normalized Gaussian-weighted
    average over all pixels. Under Potts compatibility the update is
    Q_i(l) ~ exp(-U_i(l) + sum_m w_m * avg_m(Q)(i, l)).
    """
    Q = softmax_channels(-unary)
    for _ in range(iterations):
        energy = -unary.copy()
        for weight, filt in kernels:
            energy += weight * filt(Q.T).T
        Q = softmax_channels(energy)
    return Q


def dense_crf(image, probs: np.ndarray, params: CRFParams = CRFParams()) -> np.ndarray:
    """probs: L x H x W simplex stack -> refined L x H x W simplex stack."""
    image = np.asarray(image)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise InvalidArgument("probs must be L x H x W")
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[:2] != probs.shape[1:]:
        raise InvalidArgument(f"image {image.shape} does not match probabilities {probs.shape}")
    L, H, W = probs.shape
    unary = -np.log(np.clip(probs, PROB_FLOOR, None)).reshape(L, -1)
    kernels = []
    for weight, feats in kernel_features(image, params):
        lat = PermutohedralLattice(feats)
        norm = lat.filter(np.ones(H * W))[:, None]
        kernels.append((weight, lambda q, lat=lat, norm=norm: lat.filter(q) / norm))
    Q = mean_field(unary, kernels, params.iterations)
    return Q.reshape(L, H, W)
