"""Tests for feature masking, the bottleneck/decoder, and the cosine objectives."""

import numpy as np
import pytest
import torch

from repairad.backbone import BackboneSpec, FeatureStack
from repairad.errors import ParameterError
from repairad.repair_net import (
    FeatureMask,
    GroupedFeatures,
    RepairNet,
    discrepancy,
    discrepancy_map,
    group,
    load_repair_checkpoint,
    make_feature_mask,
    nrar_loss,
    save_repair_checkpoint,
)

from oracles import central_difference_gradients, cosine_scalar


def tiny_spec(embed_dim: int = 8) -> BackboneSpec:
    return BackboneSpec(
        patch_size=8,
        embed_dim=embed_dim,
        depth=8,
        num_heads=2,
        tap_layers=(0, 1, 2, 3, 4, 5, 6, 7),
        input_size=16,
        resize_size=16,
    )


def random_stack(rng, tokens=4, channels=8, batch=1, grid=(2, 2), source="encoder", dtype=torch.float64):
    maps = tuple(
        torch.as_tensor(rng.standard_normal((batch, tokens, channels)), dtype=dtype)
        for _ in range(8)
    )
    return FeatureStack(maps=maps, grid=grid, source=source)


class TestFeatureMask:
    def test_ratio_zero_keeps_everything(self):
        mask = make_feature_mask((28, 28), 0.0, np.random.default_rng(0))
        assert mask.values.all()

    def test_ratio_one_drops_everything(self):
        mask = make_feature_mask((28, 28), 1.0, np.random.default_rng(0))
        assert not mask.values.any()

    def test_binomial_statistics(self):
        ratio = 0.4
        dropped = 0
        n = 0
        for seed in range(200):
            mask = make_feature_mask((28, 28), ratio, np.random.default_rng(seed))
            dropped += int((mask.values == 0).sum())
            n += mask.values.size
        sigma = np.sqrt(n * ratio * (1 - ratio))
        assert abs(dropped - n * ratio) < 3 * sigma

    def test_invalid_ratio(self):
        with pytest.raises(ParameterError):
            make_feature_mask((4, 4), 1.5, np.random.default_rng(0))


class TestForward:
    def test_eval_mode_deterministic(self):
        rng = np.random.default_rng(0)
        net = RepairNet(tiny_spec(), init_seed=0).double()
        stack = random_stack(rng)
        mask = make_feature_mask((2, 2), 0.0, rng)
        a = net(stack, mask, mode="eval")
        b = net(stack, mask, mode="eval")
        for ma, mb in zip(a.maps, b.maps):
            assert torch.equal(ma, mb)

    def test_all_zero_mask_erases_input_content(self):
        rng = np.random.default_rng(0)
        net = RepairNet(tiny_spec(), init_seed=0).double()
        mask = FeatureMask(values=np.zeros((2, 2), dtype=np.uint8), ratio=1.0)
        out1 = net(random_stack(np.random.default_rng(1)), mask, mode="eval")
        out2 = net(random_stack(np.random.default_rng(2)), mask, mode="eval")
        for m1, m2 in zip(out1.maps, out2.maps):
            assert torch.equal(m1, m2)

    def test_mask_shape_validation(self):
        net = RepairNet(tiny_spec(), init_seed=0).double()
        bad = FeatureMask(values=np.ones((3, 3), dtype=np.uint8), ratio=0.0)
        with pytest.raises(ParameterError):
            net(random_stack(np.random.default_rng(0)), bad, mode="eval")

    def test_unknown_mode(self):
        net = RepairNet(tiny_spec(), init_seed=0)
        with pytest.raises(ParameterError):
            net(random_stack(np.random.default_rng(0)), None, mode="predict")

    def test_dropout_zeroes_expected_fraction(self):
        drop = 0.4
        net = RepairNet(tiny_spec(embed_dim=16), drop_rate=drop, init_seed=0)
        net.seed_dropout(123)
        tokens = torch.randn(1, 4, 16)
        zeroed = 0
        total = 0
        for _ in range(500):
            _, hidden = net.bottleneck(tokens, training=True, return_hidden=True)
            zeroed += int((hidden == 0).sum())
            total += hidden.numel()
        sigma = np.sqrt(total * drop * (1 - drop))
        assert abs(zeroed - total * drop) < 3 * sigma

    def test_dropout_inactive_in_eval(self):
        net = RepairNet(tiny_spec(), drop_rate=0.9, init_seed=0)
        tokens = torch.randn(1, 4, 8)
        _, hidden = net.bottleneck(tokens, training=False, return_hidden=True)
        assert int((hidden == 0).sum()) == 0


class TestGrouping:
    def test_identical_maps(self):
        rng = np.random.default_rng(0)
        base = torch.as_tensor(rng.standard_normal((1, 4, 8)))
        stack = FeatureStack(maps=tuple(base.clone() for _ in range(8)), grid=(2, 2), source="encoder")
        grouped = group(stack)
        assert torch.equal(grouped.low, base)
        assert torch.equal(grouped.high, base)

    def test_constant_maps_arithmetic_mean(self):
        maps = tuple(torch.full((1, 4, 8), float(i)) for i in range(8))
        grouped = group(FeatureStack(maps=maps, grid=(2, 2), source="encoder"))
        assert torch.allclose(grouped.low, torch.full((1, 4, 8), 1.5))
        assert torch.allclose(grouped.high, torch.full((1, 4, 8), 5.5))

    def test_matches_scalar_averaging_oracle(self):
        rng = np.random.default_rng(3)
        stack = random_stack(rng)
        grouped = group(stack)
        arrays = [m.numpy() for m in stack.maps]
        for b in range(1):
            for t in range(4):
                for c in range(8):
                    low = sum(arrays[i][b, t, c] for i in range(4)) / 4.0
                    high = sum(arrays[i][b, t, c] for i in range(4, 8)) / 4.0
                    assert grouped.low[b, t, c].item() == pytest.approx(low, rel=1e-12)
                    assert grouped.high[b, t, c].item() == pytest.approx(high, rel=1e-12)


class TestDiscrepancy:
    def _grouped(self, rng, scale=1.0):
        low = torch.as_tensor(rng.standard_normal((1, 4, 8))) * scale
        high = torch.as_tensor(rng.standard_normal((1, 4, 8))) * scale
        return GroupedFeatures(low=low, high=high, grid=(2, 2))

    def test_identical_is_zero(self):
        g = self._grouped(np.random.default_rng(0))
        assert float(discrepancy(g, g)) == pytest.approx(0.0, abs=1e-12)

    def test_negated_is_four(self):
        g = self._grouped(np.random.default_rng(1))
        neg = GroupedFeatures(low=-g.low, high=-g.high, grid=g.grid)
        assert float(discrepancy(g, neg)) == pytest.approx(4.0, abs=1e-12)

    def test_orthogonal_is_two(self):
        e1 = torch.zeros(1, 4, 8)
        e2 = torch.zeros(1, 4, 8)
        e1[0, 0, 0] = 1.0
        e2[0, 0, 1] = 1.0
        a = GroupedFeatures(low=e1, high=e1.clone(), grid=(2, 2))
        b = GroupedFeatures(low=e2, high=e2.clone(), grid=(2, 2))
        assert float(discrepancy(a, b)) == pytest.approx(2.0, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        a = self._grouped(rng)
        b = self._grouped(rng)
        scaled = GroupedFeatures(low=3.7 * a.low, high=3.7 * a.high, grid=a.grid)
        assert float(discrepancy(scaled, b)) == pytest.approx(float(discrepancy(a, b)), rel=1e-10)

    def test_range(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            value = float(discrepancy(self._grouped(rng), self._grouped(rng)))
            assert 0.0 <= value <= 4.0

    def test_zero_vector_guarded(self):
        zero = GroupedFeatures(low=torch.zeros(1, 4, 8), high=torch.zeros(1, 4, 8), grid=(2, 2))
        g = self._grouped(np.random.default_rng(5))
        assert np.isfinite(float(discrepancy(zero, g)))

    def test_shape_mismatch(self):
        a = self._grouped(np.random.default_rng(6))
        b = GroupedFeatures(low=torch.zeros(1, 9, 8), high=torch.zeros(1, 9, 8), grid=(3, 3))
        with pytest.raises(ParameterError):
            discrepancy(a, b)


class TestDiscrepancyMap:
    def test_identical_zero_map(self):
        rng = np.random.default_rng(0)
        low = torch.as_tensor(rng.standard_normal((1, 4, 8)))
        high = torch.as_tensor(rng.standard_normal((1, 4, 8)))
        g = GroupedFeatures(low=low, high=high, grid=(2, 2))
        out = discrepancy_map(g, g)
        assert out.shape == (1, 2, 2)
        assert torch.allclose(out, torch.zeros_like(out), atol=1e-12)

    def test_single_negated_token(self):
        rng = np.random.default_rng(1)
        low = torch.as_tensor(rng.standard_normal((1, 4, 8)))
        high = torch.as_tensor(rng.standard_normal((1, 4, 8)))
        g_e = GroupedFeatures(low=low, high=high, grid=(2, 2))
        low_d, high_d = low.clone(), high.clone()
        low_d[0, 2] = -low[0, 2]
        high_d[0, 2] = -high[0, 2]
        out = discrepancy_map(g_e, GroupedFeatures(low=low_d, high=high_d, grid=(2, 2)))[0]
        flat = out.reshape(-1)
        assert flat[2].item() == pytest.approx(4.0, abs=1e-12)
        for t in (0, 1, 3):
            assert flat[t].item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_per_token_cosine_oracle(self):
        rng = np.random.default_rng(2)
        low_e = rng.standard_normal((1, 64, 8))
        high_e = rng.standard_normal((1, 64, 8))
        low_d = rng.standard_normal((1, 64, 8))
        high_d = rng.standard_normal((1, 64, 8))
        g_e = GroupedFeatures(torch.as_tensor(low_e), torch.as_tensor(high_e), (8, 8))
        g_d = GroupedFeatures(torch.as_tensor(low_d), torch.as_tensor(high_d), (8, 8))
        out = discrepancy_map(g_e, g_d)[0].numpy().ravel()
        for t in range(64):
            expected = (1 - cosine_scalar(low_e[0, t], low_d[0, t])) + (
                1 - cosine_scalar(high_e[0, t], high_d[0, t])
            )
            assert out[t] == pytest.approx(expected, rel=1e-9)

    def test_zero_set_matches_scalar_discrepancy(self):
        rng = np.random.default_rng(3)
        low = torch.as_tensor(rng.standard_normal((1, 4, 8)))
        high = torch.as_tensor(rng.standard_normal((1, 4, 8)))
        g = GroupedFeatures(low=low, high=high, grid=(2, 2))
        prop = GroupedFeatures(low=2.0 * low, high=0.5 * high, grid=(2, 2))
        assert float(discrepancy(g, prop)) == pytest.approx(0.0, abs=1e-10)
        assert float(discrepancy_map(g, prop).abs().max()) == pytest.approx(0.0, abs=1e-10)


class TestNrarLoss:
    def test_zero_when_all_equal(self):
        rng = np.random.default_rng(0)
        g = GroupedFeatures(
            low=torch.as_tensor(rng.standard_normal((1, 4, 8))),
            high=torch.as_tensor(rng.standard_normal((1, 4, 8))),
            grid=(2, 2),
        )
        assert float(nrar_loss(g, g, g)) == pytest.approx(0.0, abs=1e-12)

    def test_additivity_exact(self):
        rng = np.random.default_rng(1)
        mk = lambda: GroupedFeatures(
            low=torch.as_tensor(rng.standard_normal((1, 4, 8))),
            high=torch.as_tensor(rng.standard_normal((1, 4, 8))),
            grid=(2, 2),
        )
        g_en, g_dn, g_da = mk(), mk(), mk()
        total = float(nrar_loss(g_en, g_dn, g_da))
        parts = float(discrepancy(g_en, g_dn)) + float(discrepancy(g_en, g_da))
        assert total == parts


class TestGradients:
    def test_loss_gradients_match_central_differences(self):
        max_rel = 0.0
        for seed in range(3):
            rel = nrar_gradient_check(seed)
            max_rel = max(max_rel, rel)
        assert max_rel < 1e-4

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        net = RepairNet(tiny_spec(), init_seed=0, drop_rate=0.3, mask_ratio=0.2)
        path = tmp_path / "stage1.ckpt"
        save_repair_checkpoint(net, path, iteration=17)
        loaded, iteration = load_repair_checkpoint(path)
        assert iteration == 17
        assert loaded.drop_rate == pytest.approx(0.3)
        assert loaded.mask_ratio == pytest.approx(0.2)
        stack = random_stack(rng, dtype=torch.float32)
        mask = make_feature_mask((2, 2), 0.5, np.random.default_rng(3))
        a = net(stack, mask, mode="eval")
        b = loaded(stack, mask, mode="eval")
        for ma, mb in zip(a.maps, b.maps):
            assert torch.equal(ma, mb)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "weights.npz"
        np.savez(open(path, "wb"), foo=np.zeros(3))
        with pytest.raises(ParameterError):
            load_repair_checkpoint(path)


def nrar_gradient_check(seed: int, coords_per_tensor: int = 2) -> float:
    """Max relative error between autograd and central differences on the cosine loss."""
    rng = np.random.default_rng(seed)
    net = RepairNet(tiny_spec(), init_seed=seed).double()
    stack_n = random_stack(rng)
    stack_a = random_stack(rng)
    mask = make_feature_mask((2, 2), 0.5, np.random.default_rng(seed + 1))

    def loss_fn():
        decoded_n = net(stack_n, mask, mode="eval")
        decoded_a = net(stack_a, mask, mode="eval")
        return nrar_loss(group(stack_n), group(decoded_n), group(decoded_a))

    loss = loss_fn()
    params = [p for p in net.parameters() if p.requires_grad]
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
    rel_errors = [
        abs(a - n) / max(abs(a), abs(n), 1e-10) for a, n in zip(analytic, numeric)
    ]
    return max(rel_errors)
