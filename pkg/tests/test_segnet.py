"""Tests for the similarity feature, segmentation heads, and focal loss."""

import math

import numpy as np
import pytest
import torch

from repairad.backbone import BackboneSpec
from repairad.errors import ParameterError
from repairad.repair_net import GroupedFeatures
from repairad.segnet import (
    ResNetStyleHead,
    SegmentationHead,
    build_seg_head,
    focal_loss,
    load_seg_checkpoint,
    save_seg_checkpoint,
    similarity_feature,
)

from oracles import central_difference_gradients


def tiny_spec(embed_dim: int = 8, input_size: int = 16) -> BackboneSpec:
    return BackboneSpec(
        patch_size=8,
        embed_dim=embed_dim,
        depth=8,
        num_heads=2,
        tap_layers=(0, 1, 2, 3, 4, 5, 6, 7),
        input_size=input_size,
        resize_size=input_size,
    )


def random_grouped(rng, tokens=4, channels=8, grid=(2, 2), dtype=torch.float32):
    return GroupedFeatures(
        low=torch.as_tensor(rng.standard_normal((1, tokens, channels)), dtype=dtype),
        high=torch.as_tensor(rng.standard_normal((1, tokens, channels)), dtype=dtype),
        grid=grid,
    )


class TestSimilarityFeature:
    def test_identical_features_channel_sum_one(self):
        rng = np.random.default_rng(0)
        g = random_grouped(rng)
        feat = similarity_feature(g, g)
        assert feat.values.shape == (1, 16, 2, 2)
        sums = feat.values.reshape(1, 2, 8, 2, 2).sum(dim=2)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_negated_features_channel_sum_minus_one(self):
        rng = np.random.default_rng(1)
        g = random_grouped(rng)
        neg = GroupedFeatures(low=-g.low, high=-g.high, grid=g.grid)
        feat = similarity_feature(g, neg)
        sums = feat.values.reshape(1, 2, 8, 2, 2).sum(dim=2)
        assert torch.allclose(sums, -torch.ones_like(sums), atol=1e-6)

    def test_channel_sums_bounded_by_cosine_range(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            feat = similarity_feature(random_grouped(rng), random_grouped(rng))
            sums = feat.values.reshape(1, 2, 8, 2, 2).sum(dim=2)
            assert float(sums.min()) >= -1.0 - 1e-9
            assert float(sums.max()) <= 1.0 + 1e-9

    def test_matches_scalar_normalize_multiply_concat_oracle(self):
        rng = np.random.default_rng(3)
        g_e = random_grouped(rng, tokens=16, grid=(4, 4), dtype=torch.float64)
        g_d = random_grouped(rng, tokens=16, grid=(4, 4), dtype=torch.float64)
        feat = similarity_feature(g_e, g_d).values.numpy()
        for t in range(16):
            y, x = divmod(t, 4)
            for name, fe, fd, offset in (
                ("low", g_e.low, g_d.low, 0),
                ("high", g_e.high, g_d.high, 8),
            ):
                ue = fe[0, t].numpy()
                ud = fd[0, t].numpy()
                ue = ue / max(np.linalg.norm(ue), 1e-8)
                ud = ud / max(np.linalg.norm(ud), 1e-8)
                for c in range(8):
                    assert feat[0, offset + c, y, x] == pytest.approx(ue[c] * ud[c], rel=1e-9)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ParameterError):
            similarity_feature(random_grouped(rng), random_grouped(rng, tokens=9, grid=(3, 3)))


class TestSegForward:
    def test_output_size_times16_then_resize(self):
        # grid 3x3 -> x16 = 48 -> resized down to the 24-px input
        head = SegmentationHead(tiny_spec(input_size=24, embed_dim=8), init_seed=0)
        rng = np.random.default_rng(0)
        feat = similarity_feature(random_grouped(rng, tokens=9, grid=(3, 3)), random_grouped(rng, tokens=9, grid=(3, 3)))
        out = head(feat)
        assert out.shape == (1, 24, 24)

    def test_toy_geometry(self):
        head = SegmentationHead(tiny_spec(input_size=16), init_seed=0)
        rng = np.random.default_rng(0)
        feat = similarity_feature(random_grouped(rng), random_grouped(rng))
        out = head(feat)
        assert out.shape == (1, 16, 16)
        assert float(out.min()) > 0.0 and float(out.max()) < 1.0

    def test_deterministic(self):
        head = SegmentationHead(tiny_spec(), init_seed=0)
        rng = np.random.default_rng(1)
        feat = similarity_feature(random_grouped(rng), random_grouped(rng))
        assert torch.equal(head(feat), head(feat))

    def test_resnet_variant_runs(self):
        head = build_seg_head(tiny_spec(), variant="resnet-head", init_seed=0)
        assert isinstance(head, ResNetStyleHead)
        rng = np.random.default_rng(2)
        feat = similarity_feature(random_grouped(rng), random_grouped(rng))
        assert head(feat).shape == (1, 16, 16)

    def test_unknown_variant(self):
        with pytest.raises(ParameterError):
            build_seg_head(tiny_spec(), variant="unet")

    def test_checkpoint_round_trip(self, tmp_path):
        head = SegmentationHead(tiny_spec(), init_seed=3)
        path = tmp_path / "stage2.ckpt"
        save_seg_checkpoint(head, "conv-upsample", path, iteration=5)
        loaded, variant, iteration = load_seg_checkpoint(path)
        assert variant == "conv-upsample" and iteration == 5
        rng = np.random.default_rng(0)
        feat = similarity_feature(random_grouped(rng), random_grouped(rng))
        assert torch.equal(head(feat), loaded(feat))


class TestFocalLoss:
    def test_closed_form_hand_value(self):
        pred = torch.full((4, 4), 0.5, dtype=torch.float64)
        target = np.ones((4, 4))
        loss = float(focal_loss(pred, target, alpha_t=0.25, gamma=2.0))
        assert loss == pytest.approx(0.25 * 0.25 * math.log(2.0), rel=1e-12)

    def test_perfect_prediction_zero_loss(self):
        target = np.zeros((8, 8))
        target[2:4, 2:4] = 1
        pred = torch.as_tensor(target, dtype=torch.float64).clamp(1e-9, 1 - 1e-9)
        assert float(focal_loss(pred, target)) == pytest.approx(0.0, abs=1e-6)

    def test_gamma_zero_alpha_one_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pred = torch.as_tensor(rng.uniform(0.01, 0.99, size=(6, 6)))
            target = (rng.random((6, 6)) < 0.5).astype(np.float64)
            focal = float(focal_loss(pred, target, alpha_t=1.0, gamma=0.0))
            t = torch.as_tensor(target)
            bce = float(-(t * torch.log(pred) + (1 - t) * torch.log(1 - pred)).mean())
            assert abs(focal - bce) < 1e-12

    def test_nonnegative_and_decreasing_in_pt(self):
        target = np.ones((1, 8))
        values = np.linspace(0.05, 0.95, 8)
        pred = torch.as_tensor(values[None])
        per_pixel = -0.25 * (1 - pred) ** 2 * torch.log(pred)
        assert (per_pixel >= 0).all()
        diffs = per_pixel[0, 1:] - per_pixel[0, :-1]
        assert (diffs < 0).all()
        assert float(focal_loss(pred, target)) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            focal_loss(torch.full((4, 4), 0.5), np.ones((4, 5)))

    def test_hyperparameter_validation(self):
        pred = torch.full((2, 2), 0.5)
        with pytest.raises(ParameterError):
            focal_loss(pred, np.ones((2, 2)), gamma=-1.0)
        with pytest.raises(ParameterError):
            focal_loss(pred, np.ones((2, 2)), alpha_t=0.0)


class TestSegGradients:
    def test_focal_gradients_match_central_differences(self):
        max_rel = 0.0
        for seed in range(3):
            max_rel = max(max_rel, seg_gradient_check(seed))
        assert max_rel < 1e-4


def seg_gradient_check(seed: int, coords_per_tensor: int = 2) -> float:
    rng = np.random.default_rng(seed)
    head = SegmentationHead(tiny_spec(), init_seed=seed).double()
    feat = similarity_feature(
        random_grouped(rng, dtype=torch.float64), random_grouped(rng, dtype=torch.float64)
    )
    target = (rng.random((1, 16, 16)) < 0.3).astype(np.float64)

    def loss_fn():
        return focal_loss(head(feat), target)

    loss = loss_fn()
    params = [p for p in head.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params)
    coords, analytic = [], []
    for p, g in zip(params, grads):
        flat = g.reshape(-1)
        k = min(coords_per_tensor, flat.numel())
        for idx in torch.topk(flat.abs(), k).indices.tolist():
            # structurally-zero gradients (e.g. conv bias before a norm) carry
            # no meaningful relative error
            if abs(float(flat[idx])) < 1e-6:
                continue
            coords.append((p, idx))
            analytic.append(float(flat[idx]))
    with torch.no_grad():
        numeric = central_difference_gradients(loss_fn, params, coords)
    return max(
        abs(a - n) / max(abs(a), abs(n), 1e-10) for a, n in zip(analytic, numeric)
    )
