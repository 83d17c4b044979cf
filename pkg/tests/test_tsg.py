import math

import numpy as np
import pytest

from tjstg import model, tsg
from tjstg.tensor import ShapeError, Tensor, grad_check, ops, softmax


def direct_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TestContributionScores:
    def test_identical_words_uniform(self, rng):
        f_q = np.tile(rng.standard_normal((1, 6)), (5, 1))
        s = tsg.question_contribution_scores(rng.standard_normal((1, 6)), f_q).data
        np.testing.assert_allclose(s, np.full((1, 5), 0.2), atol=1e-15)

    def test_peaks_at_aligned_word(self):
        f_q = np.eye(4) * 3
        h_q = np.array([[0.0, 0.0, 1.0, 0.0]])
        s = tsg.question_contribution_scores(h_q, f_q).data
        assert int(np.argmax(s)) == 2

    def test_direct_oracle(self, rng):
        h_q, f_q = rng.standard_normal((1, 8)), rng.standard_normal((8, 8))
        expected = direct_softmax(h_q @ f_q.T / math.sqrt(8))
        np.testing.assert_allclose(tsg.question_contribution_scores(h_q, f_q).data, expected, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            tsg.question_contribution_scores(np.ones((1, 3)), np.ones((4, 2)))


class TestSelectTarget:
    def test_argmax(self):
        f_q = np.arange(6.0).reshape(3, 2)
        idx, f_tgt = tsg.select_target([[0.1, 0.7, 0.2]], f_q)
        assert idx == 1
        np.testing.assert_array_equal(f_tgt.data, f_q[1:2])

    def test_tie_goes_to_lowest_index(self):
        assert tsg.select_target([[0.5, 0.5]], np.eye(2))[0] == 0

    def test_batched(self, rng):
        f_q = rng.standard_normal((3, 4, 2))
        s = softmax(rng.standard_normal((3, 1, 4)))
        idx, f_tgt = tsg.select_target(s, f_q)
        for b in range(3):
            assert idx[b] == np.argmax(s.data[b, 0])
            np.testing.assert_array_equal(f_tgt.data[b, 0], f_q[b, idx[b]])

    def test_gradient_reaches_selected_row_only(self, leaf):
        from tjstg.tensor import Tape, backward

        f_q = leaf("f_q", 3, 2)
        with Tape() as tape:
            _, f_tgt = tsg.select_target([[0.2, 0.3, 0.5]], f_q)
            loss = ops.sum(f_tgt)
        g = backward(tape, loss)["f_q"]
        np.testing.assert_array_equal(g, [[0, 0], [0, 0], [1, 1]])


class TestSpatialAttention:
    def test_orthogonal_probe_uniform(self):
        f_vm = np.tile([[0.0, 1.0, 0.0]], (4, 1))
        s = tsg.spatial_attention([[1.0, 0, 0]], f_vm).data
        np.testing.assert_allclose(s, np.full((1, 4), 0.25))

    def test_matching_region_dominates(self):
        f_vm = np.zeros((5, 4))
        f_vm[3] = [10.0, 0, 0, 0]
        f_vm[1] = [0, 10.0, 0, 0]
        s = tsg.spatial_attention([[10.0, 0, 0, 0]], f_vm).data
        assert s[0, 3] > 1 - 1e-9

    def test_direct_oracle_no_scaling(self, rng):
        probe, f_vm = rng.standard_normal((1, 6)), rng.standard_normal((9, 6))
        np.testing.assert_allclose(tsg.spatial_attention(probe, f_vm).data, direct_softmax(probe @ f_vm.T),
                                   atol=1e-12)


class TestThreshold:
    def test_zero_tau_is_identity(self, rng):
        s_q = softmax(rng.standard_normal(7)).data
        np.testing.assert_array_equal(tsg.threshold_mask(s_q, 0.0).data, s_q)

    def test_by_definition(self):
        np.testing.assert_array_equal(tsg.threshold_mask([0.6, 0.4], 0.5).data, [0.6, 0.0])

    def test_equality_is_kept(self):
        np.testing.assert_array_equal(tsg.threshold_mask([0.5, 0.5], 0.5).data, [0.5, 0.5])

    def test_default_tau(self):
        assert tsg.DEFAULT_TAU == 0.005

    def test_negative_tau(self):
        with pytest.raises(ValueError):
            tsg.threshold_mask([1.0], -0.1)

    def test_gradient_only_through_kept(self, leaf):
        from tjstg.tensor import Tape, backward

        s = Tensor(np.array([0.6, 0.3, 0.1]), name="s")
        with Tape() as tape:
            loss = ops.sum(tsg.threshold_mask(s, 0.2))
        np.testing.assert_array_equal(backward(tape, loss)["s"], [1, 1, 0])


class TestInterestingFeature:
    def test_one_hot_weights_pick_region(self, rng):
        f_vm = rng.standard_normal((4, 3))
        # a very large combined logit at region 2 makes the outer softmax one-hot
        s_a = np.array([[0.0, 0.0, 1.0, 0.0]])
        s_hat = np.array([[0.0, 0.0, 800.0, 0.0]])
        f_vi, w = tsg.interesting_visual_feature(f_vm, s_a, s_hat)
        np.testing.assert_allclose(f_vi.data, f_vm[2:3], atol=1e-12)

    def test_permutation_invariant(self, rng):
        f_vm = rng.standard_normal((6, 3))
        s_a, s_hat = softmax(rng.standard_normal((1, 6))).data, softmax(rng.standard_normal((1, 6))).data
        perm = rng.permutation(6)
        a, _ = tsg.interesting_visual_feature(f_vm, s_a, s_hat)
        b, _ = tsg.interesting_visual_feature(f_vm[perm], s_a[:, perm], s_hat[:, perm])
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_direct_oracle_literal(self, rng):
        f_vm = rng.standard_normal((5, 4))
        s_a = softmax(rng.standard_normal((1, 5))).data
        s_hat = tsg.threshold_mask(softmax(rng.standard_normal((1, 5)) * 4), 0.1).data
        expected = direct_softmax(s_a * s_hat) @ f_vm
        np.testing.assert_allclose(tsg.interesting_visual_feature(f_vm, s_a, s_hat)[0].data, expected, atol=1e-12)

    def test_masked_regions_keep_residual_weight_when_literal(self):
        s_a = np.array([[0.5, 0.5, 0.0]])
        s_hat = np.array([[0.9, 0.0, 0.0]])
        w = tsg.combined_attention(s_a, s_hat).data
        assert w[0, 1] > 0.2

    def test_renormalize_excludes_masked(self):
        s_a = np.array([[0.5, 0.5, 0.0]])
        s_hat = np.array([[0.9, 0.0, 0.0]])
        w = tsg.combined_attention(s_a, s_hat, renormalize=True).data
        np.testing.assert_allclose(w, [[1.0, 0.0, 0.0]], atol=1e-12)

    def test_renormalize_all_masked_falls_back(self):
        w = tsg.combined_attention(np.full((1, 3), 1 / 3), np.zeros((1, 3)), renormalize=True).data
        np.testing.assert_allclose(w, np.full((1, 3), 1 / 3))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tsg.interesting_visual_feature(np.ones((3, 2)), np.ones((1, 4)) / 4, np.ones((1, 4)) / 4)


class TestFuseVisual:
    def test_zero_layer(self, rng):
        out = tsg.fuse_visual(rng.standard_normal((1, 3)), rng.standard_normal((1, 3)), np.zeros((6, 3)), np.zeros(3))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_identity_block(self, rng):
        f_vg, f_vi = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
        W = np.vstack([np.eye(3), np.zeros((3, 3))])
        np.testing.assert_allclose(tsg.fuse_visual(f_vg, f_vi, W, np.zeros(3)).data, np.tanh(f_vg), atol=1e-15)

    def test_bad_weight_shape(self):
        with pytest.raises(ShapeError):
            tsg.fuse_visual(np.ones((1, 3)), np.ones((1, 3)), np.ones((5, 3)), np.zeros(3))


def _tsg_params(rng, d):
    return {
        "audio_proj.W": Tensor(rng.standard_normal((d, d)) * 0.5, name="audio_proj.W"),
        "audio_proj.b": Tensor(rng.standard_normal(d) * 0.1, name="audio_proj.b"),
        "fuse.W": Tensor(rng.standard_normal((2 * d, d)) * 0.5, name="fuse.W"),
        "fuse.b": Tensor(rng.standard_normal(d) * 0.1, name="fuse.b"),
    }


@pytest.mark.parametrize("target_aware", [True, False])
def test_tsg_path_gradient(rng, target_aware):
    B, T, hw, d = 2, 3, 4, 5
    params = _tsg_params(rng, d)
    audio, f_vm = rng.standard_normal((B, T, d)), rng.standard_normal((B, T, hw, d))
    f_tgt = Tensor(rng.standard_normal((B, 1, d)), name="f_tgt")
    w = rng.standard_normal((B, T, d))
    all_params = dict(params, f_tgt=f_tgt)

    def f():
        out = tsg.ground_segments(Tensor(audio), Tensor(f_vm), f_tgt, params, tau=0.0,
                                  target_aware=target_aware)
        return ops.sum(ops.mul(out.f_v, w))

    assert grad_check(f, all_params) < 1e-4


def test_target_aware_off_depends_only_on_audio_map(rng):
    B, T, hw, d = 1, 2, 4, 3
    params = _tsg_params(rng, d)
    audio, f_vm = rng.standard_normal((B, T, d)), rng.standard_normal((B, T, hw, d))
    a = tsg.ground_segments(Tensor(audio), Tensor(f_vm), Tensor(rng.standard_normal((B, 1, d))), params,
                            target_aware=False)
    b = tsg.ground_segments(Tensor(audio), Tensor(f_vm), Tensor(rng.standard_normal((B, 1, d))), params,
                            target_aware=False)
    np.testing.assert_array_equal(a.f_v.data, b.f_v.data)
    expected = direct_softmax(a.s_a.data)
    np.testing.assert_allclose(a.weights.data, expected, atol=1e-15)


def test_encode_question_bookkeeping():
    cfg = model.ModelConfig(d=4, C=2)
    params = model.init_params(cfg, 0)
    words = np.random.default_rng(0).standard_normal((3, 5, 4))
    q = model.encode_question(params, Tensor(words))
    for b in range(3):
        assert q.idx[b] == np.argmax(q.s.data[b, 0])
        np.testing.assert_array_equal(q.f_tgt.data[b, 0], q.f_q.data[b, q.idx[b]])
        assert abs(q.s.data[b].sum() - 1) < 1e-9
