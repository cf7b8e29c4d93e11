import hashlib

import numpy as np
import pytest
import torch

from textcam.backbone import MockBackbone, load_backbone
from textcam.errors import InvalidArgument

from .conftest import random_image


def softmax_chain_gradient(backbone, fwd, text, c):
    """d s^c / d A assembled from per-class logit gradients and the explicit
    softmax Jacobian: ds^c/dY^c' = s^c (delta_cc' - s^c')."""
    scores = backbone.class_logits(fwd.pooled, text)
    s = scores.probabilities.detach()
    out = torch.zeros_like(fwd.features.values)
    for cp in range(len(s)):
        (gy,) = torch.autograd.grad(scores.logits[cp], fwd.features.values, retain_graph=True)
        jac = s[c] * (1 - s[c]) if cp == c else -s[c] * s[cp]
        out += jac * gy
    return out


def finite_difference_gradient(backbone, fwd, text, c, step=1e-3):
    A = fwd.features.values.detach()
    grad = torch.zeros_like(A)
    flat = grad.view(-1)
    for i in range(A.numel()):
        plus, minus = A.clone(), A.clone()
        plus.view(-1)[i] += step
        minus.view(-1)[i] -= step
        sp = backbone.class_logits(backbone.pooled_from_features(fwd, plus), text).probabilities[c]
        sm = backbone.class_logits(backbone.pooled_from_features(fwd, minus), text).probabilities[c]
        flat[i] = (sp - sm) / (2 * step)
    return grad


class TestEncodeTexts:
    def test_unit_rows(self, mock):
        e = mock.encode_texts(["a clean origami of dog."])
        assert e.shape == (1, mock.channels)
        np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6)

    def test_identical_sentences(self, mock):
        e = mock.encode_texts(["a cat", "a cat"])
        np.testing.assert_array_equal(e[0], e[1])

    def test_hash_rule(self):
        m = MockBackbone(seed=7)
        e = m.encode_texts(["a", "b"])
        for row, s in zip(e, ["a", "b"]):
            key = hashlib.sha256(f"7:{s}".encode()).digest()[:8]
            v = np.random.default_rng(int.from_bytes(key, "little")).standard_normal(m.channels)
            np.testing.assert_array_equal(row, v / np.linalg.norm(v))
        assert not np.allclose(e[0], e[1])
        np.testing.assert_array_equal(e, MockBackbone(seed=7).encode_texts(["a", "b"]))

    def test_empty(self, mock):
        with pytest.raises(InvalidArgument):
            mock.encode_texts([])


class TestForward:
    def test_grid_224(self, mock, rng):
        f = mock.forward(random_image(rng, 224, 224))
        assert (f.features.grid_h, f.features.grid_w) == (14, 14)
        assert f.features.Z == 196
        assert f.attention.values.shape == (196, 196)

    def test_resize_to_nearest_multiple(self, mock, rng):
        f = mock.forward(random_image(rng, 225, 223))
        assert f.input_size == (224, 224)
        assert (f.features.grid_h, f.features.grid_w) == (14, 14)

    def test_non_square_interpolates_positions(self, mock, rng):
        f = mock.forward(random_image(rng, 48, 80))
        assert (f.features.grid_h, f.features.grid_w) == (3, 5)
        assert torch.isfinite(f.features.values).all()

    def test_too_small(self, mock, rng):
        with pytest.raises(InvalidArgument):
            mock.forward(random_image(rng, 15, 64))

    def test_deterministic(self, rng):
        img = random_image(rng)
        a = MockBackbone(seed=3).forward(img)
        b = MockBackbone(seed=3).forward(img)
        assert torch.equal(a.features.values, b.features.values)
        np.testing.assert_array_equal(a.attention.values, b.attention.values)
        assert torch.equal(a.pooled, b.pooled)

    def test_attention_rows(self, mock, rng):
        A = mock.forward(random_image(rng, 64, 96)).attention.values
        assert (A >= 0).all()
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-4)

    def test_avg_token_pooling_is_patch_mean(self, mock, rng):
        f = mock.forward(random_image(rng))
        tokens = torch.cat([f.cls_token, f.features.values.detach().reshape(-1, mock.channels)])
        final, _ = mock.run_block(mock.num_blocks - 1, tokens)
        mean = final[1:].mean(dim=0)
        torch.testing.assert_close(f.pooled.detach(), mean / mean.norm(), atol=1e-6, rtol=0)

    def test_cls_token_pooling(self, rng):
        img = random_image(rng)
        avg = MockBackbone(seed=0).forward(img).pooled
        cls = MockBackbone(seed=0, pooling_mode="cls_token").forward(img).pooled
        assert not torch.allclose(avg, cls)
        torch.testing.assert_close(cls.norm(), torch.tensor(1.0, dtype=cls.dtype))

    def test_bad_config(self):
        with pytest.raises(InvalidArgument):
            MockBackbone(pooling_mode="max")
        with pytest.raises(InvalidArgument):
            MockBackbone(feature_tap=5)

    def test_loader(self):
        b = load_backbone("mock:5", pooling_mode="cls_token", logit_scale=50.0)
        assert isinstance(b, MockBackbone) and b.seed == 5 and b.logit_scale == 50.0


class TestClassLogits:
    def test_identical_and_orthogonal(self, mock):
        pooled = torch.zeros(mock.channels, dtype=torch.float64)
        pooled[0] = 1
        text = np.zeros((2, mock.channels))
        text[0, 0] = 1
        text[1, 1] = 1
        s = mock.class_logits(pooled, text)
        np.testing.assert_allclose(s.logits.numpy(), [100.0, 0.0])
        np.testing.assert_allclose(s.probabilities.numpy(), [1.0, np.exp(-100.0)], rtol=1e-12)
        assert float(f"{s.probabilities[1].item():.1e}") == 3.7e-44

    def test_singleton(self, mock, rng):
        f = mock.forward(random_image(rng))
        s = mock.class_logits(f.pooled, mock.encode_texts(["x"]))
        assert s.probabilities.item() == 1.0

    def test_equal_logits(self, mock, rng):
        f = mock.forward(random_image(rng))
        t = mock.encode_texts(["x"])
        s = mock.class_logits(f.pooled, np.concatenate([t, t]))
        np.testing.assert_allclose(s.probabilities.detach().numpy(), [0.5, 0.5])

    def test_probabilities_sum_to_one(self, mock, rng):
        f = mock.forward(random_image(rng))
        s = mock.class_logits(f.pooled, mock.encode_texts(list("abcdef")))
        assert abs(s.probabilities.sum().item() - 1) < 1e-6
        assert (s.probabilities > 0).all()

    def test_dimension_mismatch(self, mock, rng):
        f = mock.forward(random_image(rng))
        with pytest.raises(InvalidArgument):
            mock.class_logits(f.pooled, np.ones((2, mock.channels + 1)))


class TestGradient:
    def test_constant_score_gives_zero(self, mock, rng):
        f = mock.forward(random_image(rng))
        s = mock.class_logits(f.pooled, mock.encode_texts(["only"]))
        g = mock.grad_wrt_features(0, s, f.features)
        assert torch.count_nonzero(g) == 0

    def test_out_of_range(self, mock, rng):
        f = mock.forward(random_image(rng))
        s = mock.class_logits(f.pooled, mock.encode_texts(["a", "b"]))
        with pytest.raises(InvalidArgument):
            mock.grad_wrt_features(2, s, f.features)

    def test_gradients_sum_to_zero(self, rng):
        m = MockBackbone(seed=2, logit_scale=10.0)
        f = m.forward(random_image(rng))
        s = m.class_logits(f.pooled, m.encode_texts(list("abcd")))
        total = sum(m.grad_wrt_features(c, s, f.features) for c in range(4))
        scale = max(m.grad_wrt_features(c, s, f.features).abs().max().item() for c in range(4))
        assert total.abs().max().item() <= 1e-12 * max(scale, 1.0)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_finite_differences(self, seed, rng):
        m = MockBackbone(seed=seed, logit_scale=20.0)
        f = m.forward(random_image(rng, 32, 48))
        text = m.encode_texts(["p", "q", "r"])
        s = m.class_logits(f.pooled, text)
        for c in range(3):
            g = m.grad_wrt_features(c, s, f.features)
            fd = finite_difference_gradient(m, f, text, c)
            assert (g - fd).norm() / g.norm() < 1e-3

    def test_matches_softmax_chain(self, rng):
        m = MockBackbone(seed=4, logit_scale=30.0)
        f = m.forward(random_image(rng))
        text = m.encode_texts(["p", "q", "r"])
        s = m.class_logits(f.pooled, text)
        for c in range(3):
            torch.testing.assert_close(m.grad_wrt_features(c, s, f.features),
                                       softmax_chain_gradient(m, f, text, c), atol=1e-6, rtol=0)
