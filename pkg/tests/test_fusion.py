import numpy as np
import pytest

import neural as nn
from errors import ConfigError, DataError, ModelError, NumericalError, ShapeError
from fusion import (ALPHA_GRID, BidirectionalMamba, CrossAttentionFusion, FusionModel, MambaFusion,
                    build_fusion_head, cross_attention_fuse, fusion_config, grid_search_alpha, mamba_fuse,
                    score_fusion, ssm_scan)
from neural import SeededRng, Tensor
from ppg_model import PpgModel, ppg_config
from sceeg_model import SceegModel, sceeg_config

TINY = {"preset": "tiny"}


def random_probs(rng, n):
    raw = rng.random((n, 4)) + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)


def naive_scan(x, delta, A, B, C):
    batch, steps, inner = x.shape
    y = np.zeros_like(x)
    for b in range(batch):
        for e in range(inner):
            h = np.zeros(A.shape[1])
            for t in range(steps):
                h = np.exp(delta[b, t, e] * A[e]) * h + delta[b, t, e] * B[b, t] * x[b, t, e]
                y[b, t, e] = C[b, t] @ h
    return y


def scan_inputs(rng, batch=1, steps=5, inner=3, n_state=2):
    return (rng.standard_normal((batch, steps, inner)), rng.random((batch, steps, inner)) + 0.05,
            -np.exp(rng.standard_normal((inner, n_state))), rng.standard_normal((batch, steps, n_state)),
            rng.standard_normal((batch, steps, n_state)))


class TestScoreFusion:
    def test_alpha_endpoints(self, np_rng):
        p_ppg, p_sceeg = random_probs(np_rng, 9), random_probs(np_rng, 9)
        np.testing.assert_array_equal(score_fusion(p_ppg, p_sceeg, 1.0), p_ppg)
        np.testing.assert_array_equal(score_fusion(p_ppg, p_sceeg, 0.0), p_sceeg)

    def test_rows_stay_on_simplex(self, np_rng):
        fused = score_fusion(random_probs(np_rng, 20), random_probs(np_rng, 20), 0.3)
        np.testing.assert_allclose(fused.sum(axis=1), 1.0, atol=1e-12)

    def test_rejects_bad_inputs(self, np_rng):
        p = random_probs(np_rng, 4)
        with pytest.raises(ConfigError):
            score_fusion(p, p, 1.5)
        with pytest.raises(ShapeError):
            score_fusion(p, p[:3], 0.5)
        with pytest.raises(DataError):
            score_fusion(p * 2, p, 0.5)

    def test_grid_has_eleven_points(self):
        assert ALPHA_GRID == (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

    def test_grid_search_prefers_the_reliable_modality(self):
        labels = np.arange(40) % 4
        p_ppg = np.eye(4)[labels]
        p_sceeg = np.full((40, 4), 0.1 / 3)
        p_sceeg[np.arange(40), (labels + 1) % 4] = 0.9
        alpha, curve = grid_search_alpha(p_ppg, p_sceeg, labels)
        assert [a for a, _ in curve] == list(ALPHA_GRID)
        assert alpha == 0.5
        assert dict(curve)[0.4] < 1.0 and dict(curve)[0.5] == pytest.approx(1.0)

    def test_ties_go_to_smaller_alpha(self, np_rng):
        p = random_probs(np_rng, 30)
        alpha, _ = grid_search_alpha(p, p, np_rng.integers(0, 4, 30))
        assert alpha == 0.0

    def test_empty_validation_set(self):
        with pytest.raises(DataError):
            grid_search_alpha(np.zeros((0, 4)), np.zeros((0, 4)), [])


class TestSsmScan:
    def test_matches_naive_recurrence(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            args = scan_inputs(rng, batch=int(rng.integers(1, 3)), steps=int(rng.integers(1, 9)),
                               inner=int(rng.integers(1, 4)), n_state=int(rng.integers(1, 4)))
            np.testing.assert_allclose(ssm_scan(*args).data, naive_scan(*args), rtol=1e-10, atol=1e-10)

    def test_memoryless_limit(self, np_rng):
        x, delta, A, B, C = scan_inputs(np_rng)
        A = np.full_like(A, -1e6)
        expected = delta * x * np.einsum("btn,btn->bt", B, C)[..., None]
        np.testing.assert_allclose(ssm_scan(x, delta, A, B, C).data, expected, atol=1e-12)

    def test_gradients(self, np_rng):
        tensors = [Tensor(a, requires_grad=True) for a in scan_inputs(np_rng, batch=2, steps=4)]
        weights = np_rng.standard_normal((2, 4, 3))
        assert nn.gradcheck(lambda: nn.tensor_sum(ssm_scan(*tensors) * Tensor(weights)), tensors) < 1e-6

    def test_non_finite_rejected(self, np_rng):
        x, delta, A, B, C = scan_inputs(np_rng)
        B[0, 1, 0] = np.nan
        with pytest.raises(NumericalError):
            ssm_scan(x, delta, A, B, C)

    def test_shape_mismatch(self, np_rng):
        x, delta, A, B, C = scan_inputs(np_rng)
        with pytest.raises(ShapeError):
            ssm_scan(x, delta[:, :-1], A, B, C)


class TestBidirectionalMamba:
    @pytest.fixture
    def cfg(self):
        return fusion_config(TINY)

    def test_decay_is_stable(self, cfg):
        block = BidirectionalMamba(cfg, SeededRng(1))
        assert (-np.exp(block.forward_block.A_log.data) < 0).all()

    def test_shape_preserved(self, cfg, np_rng):
        block = BidirectionalMamba(cfg, SeededRng(1))
        assert block(np_rng.standard_normal((7, 32))).shape == (7, 32)
        assert block(np_rng.standard_normal((2, 7, 32))).shape == (2, 7, 32)

    def test_forward_direction_is_causal(self, cfg, np_rng):
        block = BidirectionalMamba(cfg, SeededRng(1))
        x = np_rng.standard_normal((1, 8, 32))
        changed = x.copy()
        changed[0, 5:] += 1.0
        before = block.forward_block(Tensor(x)).data
        after = block.forward_block(Tensor(changed)).data
        np.testing.assert_allclose(after[0, :5], before[0, :5], atol=1e-12)
        assert not np.allclose(after[0, 5:], before[0, 5:])

    def test_reversal_symmetry(self, cfg, np_rng):
        first = BidirectionalMamba(cfg, SeededRng(1))
        second = BidirectionalMamba(cfg, SeededRng(2))
        second.forward_block.load_state_dict(first.backward_block.state_dict())
        second.backward_block.load_state_dict(first.forward_block.state_dict())
        weight = first.merge.weight.data
        second.merge.weight.data[...] = np.vstack([weight[cfg.d:], weight[:cfg.d]])
        second.merge.bias.data[...] = first.merge.bias.data
        x = np_rng.standard_normal((9, 32))
        np.testing.assert_allclose(second(x[::-1].copy()).data, first(x).data[::-1], atol=1e-12)

    def test_future_epochs_reach_the_past(self, cfg, np_rng):
        block = BidirectionalMamba(cfg, SeededRng(1))
        x = np_rng.standard_normal((1, 8, 32))
        changed = x.copy()
        changed[0, 4] += 1.0
        fwd_before, bwd_before = (t.data for t in block.directions(Tensor(x)))
        fwd_after, bwd_after = (t.data for t in block.directions(Tensor(changed)))
        np.testing.assert_allclose(fwd_after[0, :4], fwd_before[0, :4], atol=1e-12)
        assert not np.allclose(bwd_after[0, 3], bwd_before[0, 3])
        np.testing.assert_allclose(bwd_after[0, 5:], bwd_before[0, 5:], atol=1e-12)
        assert not np.allclose(block(changed).data[0, 3], block(x).data[0, 3])

    def test_backward_path_feeds_the_output(self, cfg, np_rng):
        block = BidirectionalMamba(cfg, SeededRng(1))
        x = np_rng.standard_normal((1, 8, 32))
        changed = x.copy()
        changed[0, 6:] += 1.0
        block.merge.weight.data[cfg.d:] = 0.0
        np.testing.assert_allclose(block(changed).data[0, :6], block(x).data[0, :6], atol=1e-12)

    def test_mamba_fusion_sees_the_next_epoch(self, np_rng):
        head = MambaFusion(fusion_config(TINY), seed=3)
        f_sceeg, f_ppg = np_rng.standard_normal((1, 6, 32)), np_rng.standard_normal((1, 6, 32))
        changed = f_sceeg.copy()
        changed[0, 3] += 1.0
        before = mamba_fuse(f_sceeg, f_ppg, head).data
        after = mamba_fuse(changed, f_ppg, head).data
        assert not np.allclose(after[0, 2], before[0, 2])

    def test_gradients(self, cfg, np_rng):
        block = BidirectionalMamba(cfg, SeededRng(3))
        x = np_rng.standard_normal((1, 4, 32))
        target = np_rng.standard_normal((1, 4, 32))
        params = [block.forward_block.A_log, block.forward_block.dt_proj.bias, block.backward_block.conv.weight,
                  block.backward_block.x_proj.weight, block.forward_block.D, block.merge.weight]
        fn = lambda: nn.tensor_sum(block(x) * Tensor(target))
        assert nn.gradcheck(fn, params, max_coords=10) < 1e-4


class TestFusionHeads:
    def test_cross_attention_output_is_stochastic(self, np_rng):
        head = CrossAttentionFusion(fusion_config(TINY))
        probs = head(np_rng.standard_normal((6, 32)), np_rng.standard_normal((6, 32))).data
        assert probs.shape == (6, 4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_single_epoch_windows_stay_isolated(self, np_rng):
        head = CrossAttentionFusion(fusion_config({**TINY, "blocks": 2}), seed=4)
        f_sceeg, f_ppg = np_rng.standard_normal((5, 1, 32)), np_rng.standard_normal((5, 1, 32))
        before = cross_attention_fuse(f_sceeg, f_ppg, head).data
        f_sceeg[2] += 3.0
        f_ppg[2] -= 2.0
        after = cross_attention_fuse(f_sceeg, f_ppg, head).data
        others = [0, 1, 3, 4]
        np.testing.assert_allclose(after[others], before[others], atol=1e-12)
        assert not np.allclose(after[2], before[2])

    def test_cross_attention_shape_mismatch(self, np_rng):
        with pytest.raises(ShapeError):
            CrossAttentionFusion(fusion_config(TINY))(np.zeros((6, 32)), np.zeros((5, 32)))

    def test_cross_attention_gradients(self, np_rng):
        head = CrossAttentionFusion(fusion_config({**TINY, "blocks": 2}), seed=2)
        f_sceeg, f_ppg = np_rng.standard_normal((3, 32)), np_rng.standard_normal((3, 32))
        target = np_rng.standard_normal((3, 4))
        params = [head.blocks[0].attn_a.wq, head.blocks[1].ffn_b.fc1.weight, head.proj.weight,
                  head.classifier.bias]
        fn = lambda: nn.tensor_sum(head(f_sceeg, f_ppg) * Tensor(target))
        assert nn.gradcheck(fn, params, max_coords=10) < 1e-4

    def test_mamba_starts_from_cross_attention_head(self, np_rng):
        cfg = fusion_config(TINY)
        xattn = CrossAttentionFusion(cfg, seed=8)
        mamba = MambaFusion(cfg, seed=1)
        mamba.init_from_cross(xattn.state_dict())
        mamba.mamba.merge.weight.data[...] = 0.0
        mamba.mamba.merge.bias.data[...] = 0.0
        f_sceeg, f_ppg = np_rng.standard_normal((5, 32)), np_rng.standard_normal((5, 32))
        np.testing.assert_allclose(mamba(f_sceeg, f_ppg).data, xattn(f_sceeg, f_ppg).data, atol=1e-12)

    def test_score_has_no_head(self):
        with pytest.raises(ConfigError):
            build_fusion_head("score", fusion_config(TINY))

    def test_default_scale(self):
        cfg = fusion_config()
        xattn = CrossAttentionFusion(cfg).num_parameters()
        added = MambaFusion(cfg).num_parameters() - xattn
        assert abs(xattn - 3.46e6) / 3.46e6 <= 0.10
        assert abs(added - 1.75e6) / 1.75e6 <= 0.10


class TestFusionModel:
    @pytest.fixture
    def encoders(self):
        return (SceegModel(sceeg_config(TINY, window_epochs=2), seed=1),
                PpgModel(ppg_config(TINY, window_epochs=2), seed=2))

    def test_requires_alpha_or_head(self, encoders):
        with pytest.raises(ModelError):
            FusionModel(*encoders, "score")
        with pytest.raises(ModelError):
            FusionModel(*encoders, "xattn")
        with pytest.raises(ConfigError):
            FusionModel(*encoders, "average", alpha=0.5)

    def test_head_consumes_encoder_features(self, encoders, np_rng):
        head = CrossAttentionFusion(fusion_config(TINY), seed=3)
        model = FusionModel(*encoders, "xattn", head=head)
        eeg, ppg = np_rng.standard_normal((2, 300)), np_rng.standard_normal((2, 64))
        expected = head(encoders[0](eeg)[0], encoders[1](ppg)[0]).data
        np.testing.assert_array_equal(model.predict_proba(eeg, ppg), expected)

    def test_score_model(self, encoders, np_rng):
        model = FusionModel(*encoders, "score", alpha=1.0)
        eeg, ppg = np_rng.standard_normal((3, 2, 300)), np_rng.standard_normal((3, 2, 64))
        probs = model.predict_proba(eeg, ppg)
        assert probs.shape == (3, 2, 4)
        np.testing.assert_allclose(probs, encoders[1](ppg)[1].data, atol=1e-12)
