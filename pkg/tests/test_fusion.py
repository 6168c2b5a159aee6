"""Fusion operators and alignment losses: closed-form oracles, symmetry
and invariance properties, and residual traces through the attention
modules."""

import math

import numpy as np
import pytest

from mghft import autodiff as ad
from mghft.autodiff import Tensor
from mghft.fusion import (
    AlignmentLossConfig,
    ClassifierHead,
    CrossAttentionFusion,
    TextGuidedFusionAttention,
    alignment_loss,
    contrastive_loss,
    global_fusion,
    mlce_loss,
    soft_fusion,
)


def np_softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class TestSoftFusion:
    def test_zero_text_is_exact_identity(self):
        v = np.random.default_rng(0).standard_normal((5, 8))
        out = soft_fusion(Tensor(v), Tensor(np.zeros((3, 8))))
        assert np.array_equal(out.data, v)

    def test_single_text_token_adds_it_to_every_row(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal((4, 6))
        t = rng.standard_normal((1, 6))
        out = soft_fusion(Tensor(v), Tensor(t))
        assert np.allclose(out.data, v + t)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n, m, d = rng.integers(1, 7, size=3)
            v = rng.standard_normal((n, d))
            t = rng.standard_normal((m, d))
            expected = v + np_softmax(v @ t.T, axis=1) @ t
            out = soft_fusion(Tensor(v), Tensor(t))
            assert np.allclose(out.data, expected, atol=1e-12)

    def test_batched_matches_per_item(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal((3, 4, 5))
        t = rng.standard_normal((3, 2, 5))
        out = soft_fusion(Tensor(v), Tensor(t))
        for b in range(3):
            single = soft_fusion(Tensor(v[b]), Tensor(t[b]))
            assert np.allclose(out.data[b], single.data)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            soft_fusion(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 5))))


class TestContrastive:
    def test_orthonormal_pair_closed_form(self):
        # B=2, identical orthonormal rows, tau=1: each cross-entropy row is
        # -ln(e / (e + 1))
        v = Tensor(np.eye(2))
        t = Tensor(np.eye(2))
        expected = math.log((math.e + 1.0) / math.e)
        assert contrastive_loss(v, t, 1.0).item() == pytest.approx(expected, abs=1e-9)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            b = int(rng.integers(2, 9))
            v = rng.standard_normal((b, 6))
            t = rng.standard_normal((b, 6))
            lvt = contrastive_loss(Tensor(v), Tensor(t), 0.07).item()
            ltv = contrastive_loss(Tensor(t), Tensor(v), 0.07).item()
            assert lvt == pytest.approx(ltv, abs=1e-9)

    def test_invariant_to_positive_row_rescale(self):
        rng = np.random.default_rng(5)
        v = rng.standard_normal((4, 8))
        t = rng.standard_normal((4, 8))
        base = contrastive_loss(Tensor(v), Tensor(t), 0.07).item()
        scales = rng.uniform(0.1, 10.0, size=(4, 1))
        scaled = contrastive_loss(Tensor(v * scales), Tensor(t), 0.07).item()
        assert scaled == pytest.approx(base, abs=1e-6)

    def test_low_temperature_perfect_pairing_vanishes(self):
        rng = np.random.default_rng(6)
        v = rng.standard_normal((5, 16))
        assert contrastive_loss(Tensor(v), Tensor(v.copy()), 1e-3).item() < 1e-9

    def test_batch_of_one_rejected(self):
        with pytest.raises(ad.ContractError):
            contrastive_loss(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))), 0.07)


class TestMlce:
    def test_coincident_batches_give_zero(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((6, 10))
        assert mlce_loss(Tensor(x), Tensor(x.copy()), 1.0).item() == pytest.approx(
            0.0, abs=1e-12
        )

    def test_two_by_two_closed_form(self):
        # identical text rows vs orthogonal visual rows at tau=1:
        # C_t = [[1,1],[1,1]], C_v = [[1,.5],[.5,1]]
        t = Tensor(np.array([[2.0, 0.0], [3.0, 0.0]]))
        v = Tensor(np.eye(2))
        w_t = np.array([0.5, 0.5])
        w_v = np_softmax(np.array([1.0, 0.5]))
        expected = float(np.sum(w_t * (np.log(w_t) - np.log(w_v))))
        got = mlce_loss(v, t, 1.0, "text_teaches_vision").item()
        assert got == pytest.approx(expected, abs=1e-9)

    def test_nonnegative_on_random_batches(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            b = int(rng.integers(2, 7))
            v = rng.standard_normal((b, 5))
            t = rng.standard_normal((b, 5))
            assert mlce_loss(Tensor(v), Tensor(t), 1.0).item() >= -1e-12

    def test_direction_swaps_kl_arguments(self):
        rng = np.random.default_rng(9)
        v = rng.standard_normal((4, 6))
        t = rng.standard_normal((4, 6))
        a = mlce_loss(Tensor(v), Tensor(t), 1.0, "text_teaches_vision").item()
        b = mlce_loss(Tensor(t), Tensor(v), 1.0, "vision_teaches_text").item()
        assert a == pytest.approx(b, abs=1e-12)


class TestAlignment:
    def test_zero_mlce_weight_is_mean_contrastive(self):
        rng = np.random.default_rng(10)
        pairs = [
            (Tensor(rng.standard_normal((4, 8))), Tensor(rng.standard_normal((4, 8))))
            for _ in range(4)
        ]
        cfg = AlignmentLossConfig(mlce_weight=0.0).validate()
        got = alignment_loss(pairs, cfg).item()
        expected = np.mean([contrastive_loss(v, t, cfg.tau_cl).item() for v, t in pairs])
        assert got == pytest.approx(expected, abs=1e-9)

    def test_sum_reduction_is_n_times_mean(self):
        rng = np.random.default_rng(11)
        pairs = [
            (Tensor(rng.standard_normal((3, 6))), Tensor(rng.standard_normal((3, 6))))
            for _ in range(4)
        ]
        mean = alignment_loss(pairs, AlignmentLossConfig(stage_reduction="mean")).item()
        total = alignment_loss(pairs, AlignmentLossConfig(stage_reduction="sum")).item()
        assert total == pytest.approx(4 * mean, rel=1e-9)

    def test_default_combines_with_weight_30(self):
        rng = np.random.default_rng(12)
        v = Tensor(rng.standard_normal((4, 8)))
        t = Tensor(rng.standard_normal((4, 8)))
        cfg = AlignmentLossConfig()
        got = alignment_loss([(v, t)], cfg).item()
        expected = (
            contrastive_loss(v, t, cfg.tau_cl).item()
            + 30.0 * mlce_loss(v, t, cfg.tau_mlce).item()
        )
        assert got == pytest.approx(expected, rel=1e-9)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AlignmentLossConfig(tau_cl=0.0).validate()
        with pytest.raises(ValueError):
            AlignmentLossConfig(stage_reduction="max").validate()
        with pytest.raises(ValueError):
            AlignmentLossConfig(kl_direction="both").validate()


def test_global_fusion_is_soft_fusion():
    rng = np.random.default_rng(13)
    h_g = rng.standard_normal((2, 4, 8))
    h_t = rng.standard_normal((2, 4, 8))
    a = global_fusion(Tensor(h_g), Tensor(h_t))
    b = soft_fusion(Tensor(h_g), Tensor(h_t))
    assert np.array_equal(a.data, b.data)


class TestTgfa:
    def test_zero_value_paths_trace_to_identity(self):
        # with the second attention's values, the output projection, and the
        # MLP second layer zeroed, only the h_v residual survives
        rng = np.random.default_rng(14)
        tgfa = TextGuidedFusionAttention(rng, 8, 2)
        for lin in (tgfa.wv_v, tgfa.out, tgfa.fc2):
            lin.w.data[:] = 0.0
            lin.b.data[:] = 0.0
        h_v = rng.standard_normal((3, 5, 8))
        h_t = rng.standard_normal((3, 4, 8))
        out = tgfa(Tensor(h_v), Tensor(h_t))
        assert np.allclose(out.data, h_v, atol=1e-12)

    def test_zero_keys_make_head_count_irrelevant(self):
        # zero key projections give uniform attention, so splitting values
        # into heads and re-merging is a no-op; 1-head and 2-head modules
        # with shared weights must agree
        rng = np.random.default_rng(15)
        one = TextGuidedFusionAttention(np.random.default_rng(16), 8, 1)
        two = TextGuidedFusionAttention(np.random.default_rng(16), 8, 2)
        for a, b in zip(one.named_parameters(), two.named_parameters()):
            b.tensor.data[:] = a.tensor.data
        for m in (one, two):
            m.wk_t.w.data[:] = 0.0
            m.wk_t.b.data[:] = 0.0
            m.wk_v.w.data[:] = 0.0
            m.wk_v.b.data[:] = 0.0
        h_v = rng.standard_normal((2, 6, 8))
        h_t = rng.standard_normal((2, 3, 8))
        o1 = one(Tensor(h_v), Tensor(h_t))
        o2 = two(Tensor(h_v), Tensor(h_t))
        assert np.allclose(o1.data, o2.data, atol=1e-10)

    def test_permutation_equivariant_in_visual_rows(self):
        rng = np.random.default_rng(17)
        tgfa = TextGuidedFusionAttention(rng, 8, 2)
        h_v = rng.standard_normal((1, 5, 8))
        h_t = rng.standard_normal((1, 3, 8))
        perm = [3, 0, 4, 1, 2]
        base = tgfa(Tensor(h_v), Tensor(h_t))
        permuted = tgfa(Tensor(h_v[:, perm]), Tensor(h_t))
        assert np.allclose(base.data[:, perm], permuted.data, atol=1e-10)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError):
            TextGuidedFusionAttention(np.random.default_rng(18), 8, 3)


class TestCrossAttentionFusion:
    def test_zero_value_projection_is_identity(self):
        rng = np.random.default_rng(19)
        ca = CrossAttentionFusion(rng, 6)
        ca.v.w.data[:] = 0.0
        ca.v.b.data[:] = 0.0
        vis = rng.standard_normal((2, 4, 6))
        out = ca(Tensor(vis), Tensor(rng.standard_normal((2, 3, 6))))
        assert np.allclose(out.data, vis)


class TestClassifierHead:
    def test_token_order_invariant(self):
        rng = np.random.default_rng(20)
        head = ClassifierHead(rng, 8, 7)
        tokens = rng.standard_normal((2, 5, 8))
        a = head(Tensor(tokens))
        b = head(Tensor(tokens[:, ::-1].copy()))
        assert a.shape == (2, 7)
        assert np.allclose(a.data, b.data)

    def test_zero_weights_emit_bias(self):
        head = ClassifierHead(np.random.default_rng(21), 4, 3)
        head.fc.w.data[:] = 0.0
        out = head(Tensor(np.random.default_rng(22).standard_normal((2, 6, 4))))
        assert np.allclose(out.data, head.fc.b.data)
