from collections import deque

import numpy as np
import pytest

from textcam.backbone import AttentionWeights, MockBackbone
from textcam.caa import AffinityMatrix, box_mask, build_affinity, propagate, refine, sinkhorn
from textcam.camgen import CamStack, normalize
from textcam.errors import DegenerateInput, InvalidArgument

from .conftest import random_image


def sinkhorn_oracle(W, iters=10_000):
    D = np.array(W, dtype=np.float64)
    for _ in range(iters):
        D = D / D.sum(axis=1, keepdims=True)
        D = D / D.sum(axis=0, keepdims=True)
    return D


def flood_boxes(binary):
    """4-connected regions by breadth-first search; returns inclusive boxes."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    boxes = []
    for r in range(h):
        for c in range(w):
            if not binary[r, c] or seen[r, c]:
                continue
            q = deque([(r, c)])
            seen[r, c] = True
            rs, cs = [], []
            while q:
                y, x = q.popleft()
                rs.append(y)
                cs.append(x)
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and binary[yy, xx] and not seen[yy, xx]:
                        seen[yy, xx] = True
                        q.append((yy, xx))
            boxes.append((min(rs), min(cs), max(rs), max(cs)))
    return boxes


def refine_oracle(maps, A, lam, t):
    """Dense matrix power, brute-force boxes, then per-class max scaling."""
    out = []
    At = np.linalg.matrix_power(A, t)
    for m in maps:
        v = At @ m.ravel()
        binary = m >= lam
        B = np.zeros(m.shape)
        boxes = flood_boxes(binary) or [(0, 0, m.shape[0] - 1, m.shape[1] - 1)]
        for r0, c0, r1, c1 in boxes:
            B[r0:r1 + 1, c0:c1 + 1] = 1
        r = np.maximum(B.ravel() * v, 0).reshape(m.shape)
        out.append(r / r.max() if r.max() > 0 else r)
    return np.stack(out)


def random_positive(rng, n):
    return rng.random((n, n)) + 1e-3


def random_attention(rng, n):
    x = np.exp(rng.normal(0, 2, (n, n)))
    return x / x.sum(axis=1, keepdims=True)


class TestSinkhorn:
    def test_identity(self):
        r = sinkhorn(np.eye(5))
        assert r.iterations == 0
        np.testing.assert_array_equal(r.matrix, np.eye(5))

    def test_all_ones(self):
        np.testing.assert_array_equal(sinkhorn(np.ones((2, 2))).matrix, np.full((2, 2), 0.5))

    def test_matches_long_run_oracle_8x8(self, rng):
        W = random_positive(rng, 8)
        r = sinkhorn(W, tol=1e-10, max_iters=1000)
        assert r.residual <= 1e-6
        np.testing.assert_allclose(r.matrix, sinkhorn_oracle(W), atol=1e-6, rtol=0)

    def test_residual_non_increasing(self, rng):
        for n in (3, 10, 40):
            hist = sinkhorn(random_attention(rng, n), tol=1e-12, max_iters=200).residuals
            assert all(b <= a for a, b in zip(hist, hist[1:]))

    def test_degenerate(self):
        W = np.ones((3, 3))
        W[1] = 0
        with pytest.raises(DegenerateInput):
            sinkhorn(W)
        with pytest.raises(DegenerateInput):
            sinkhorn(W.T)
        with pytest.raises(InvalidArgument):
            sinkhorn(np.ones((2, 3)))

    def test_budget_reported(self, rng):
        r = sinkhorn(random_attention(rng, 30), tol=0.0, max_iters=7)
        assert r.iterations == 7 and r.residual > 0 and len(r.residuals) == 8


class TestAffinity:
    def test_symmetric_ds_is_fixed_point(self):
        S = np.array([[0.5, 0.3, 0.2], [0.3, 0.4, 0.3], [0.2, 0.3, 0.5]])
        A = build_affinity(S)
        np.testing.assert_array_equal(A.values, S)
        assert A.sinkhorn_iters_used == 0

    @pytest.mark.parametrize("n", [4, 16, 49])
    def test_invariants(self, n, rng):
        tol = 1e-4
        A = build_affinity(random_attention(rng, n), tol=tol)
        assert np.array_equal(A.values, A.values.T)
        assert (A.values >= 0).all()
        assert np.abs(A.values.sum(axis=1) - 1).max() <= 2 * tol
        assert np.abs(A.values.sum(axis=0) - 1).max() <= 2 * tol

    def test_from_backbone_attention(self, rng):
        attn = MockBackbone(seed=0).forward(random_image(rng)).attention
        assert isinstance(attn, AttentionWeights)
        A = build_affinity(attn)
        assert A.size == 16 and np.array_equal(A.values, A.values.T)


class TestBoxMask:
    def test_single_pixel(self):
        cam = np.zeros((4, 4))
        cam[2, 1] = 0.9
        b = box_mask(cam, 0.4)
        assert b.boxes == [(2, 1, 2, 1)] and b.mask.sum() == 1 and b.mask[2 * 4 + 1]

    def test_diagonal_pixels_are_two_regions(self):
        cam = np.zeros((4, 4))
        cam[1, 1] = cam[2, 2] = 1
        b = box_mask(cam, 0.5)
        assert sorted(b.boxes) == [(1, 1, 1, 1), (2, 2, 2, 2)] and b.mask.sum() == 2

    def test_l_shape_fills_rectangle(self):
        cam = np.zeros((5, 5))
        cam[1:4, 1] = 1
        cam[3, 1:4] = 1
        b = box_mask(cam, 0.5)
        assert b.boxes == [(1, 1, 3, 3)]
        expected = np.zeros((5, 5), bool)
        expected[1:4, 1:4] = True
        np.testing.assert_array_equal(b.mask, expected.ravel())

    def test_threshold_inclusive_and_fallback(self):
        cam = np.full((3, 3), 0.4)
        assert box_mask(cam, 0.4).mask.all()
        b = box_mask(np.full((3, 3), 0.1), 0.4)
        assert b.mask.all() and b.boxes == [(0, 0, 2, 2)]

    def test_against_flood_fill(self, rng):
        for _ in range(30):
            cam = rng.random((7, 9))
            b = box_mask(cam, 0.6)
            assert sorted(b.boxes) == sorted(flood_boxes(cam >= 0.6))


class TestRefine:
    def fixture(self, rng, t_dim=4):
        maps = rng.random((2, t_dim, t_dim)) ** 3
        cams = normalize(CamStack([3, 5], maps))
        return cams, build_affinity(random_attention(rng, t_dim * t_dim), tol=1e-10, max_iters=1000)

    @pytest.mark.parametrize("t", [0, 1, 2, 3])
    def test_dense_oracle(self, t, rng):
        for _ in range(5):
            cams, A = self.fixture(rng)
            out = refine(cams, A, lam=0.4, t=t)
            np.testing.assert_allclose(out.maps, refine_oracle(cams.maps, A.values, 0.4, t), atol=1e-6, rtol=0)

    def test_identity(self, rng):
        cams, _ = self.fixture(rng)
        I = AffinityMatrix(np.eye(16), 0, 0.0)
        for t in (0, 1, 3):
            out = refine(cams, I, lam=0.0, t=t)
            np.testing.assert_allclose(out.maps, cams.maps, atol=1e-15)

    def test_t0_all_ones_mask_identity(self, rng):
        cams, A = self.fixture(rng)
        np.testing.assert_array_equal(refine(cams, A, lam=0.0, t=0).maps, cams.maps)

    def test_mass_conservation(self, rng):
        cams, A = self.fixture(rng)
        for t in range(5):
            for m in cams.maps:
                v = propagate(m.ravel(), A.values, t)
                assert abs(v.sum() - m.sum()) < 1e-5

    def test_outside_boxes_zero(self, rng):
        cams, A = self.fixture(rng, 6)
        out = refine(cams, A, lam=0.7, t=2)
        for m_in, m_out in zip(cams.maps, out.maps):
            outside = ~box_mask(m_in, 0.7).mask.reshape(m_in.shape)
            assert (m_out[outside] == 0).all()
            assert m_out.max() == 1.0

    def test_plain_propagation(self, rng):
        cams, A = self.fixture(rng)
        out = refine(cams, A, lam=0.9, t=2, class_aware=False)
        assert (out.maps > 0).all()

    def test_errors(self, rng):
        cams, A = self.fixture(rng)
        with pytest.raises(InvalidArgument):
            refine(cams, AffinityMatrix(np.eye(9), 0, 0.0))
        with pytest.raises(InvalidArgument):
            refine(cams, A, lam=1.5)
