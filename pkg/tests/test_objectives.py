import math

import numpy as np
import pytest

from reloclnet import objectives as O
from reloclnet import tensor as T
from reloclnet.encoders import EncodedVideo, ModularQuery
from reloclnet.exceptions import ConfigError, DataError, NonFiniteError
from reloclnet.gradcheck import gradient_check
from reloclnet.nn import BoundaryPredictor
from reloclnet.objectives import ContrastiveHeads, LossReport
from reloclnet.tensor import Tensor


def stable_softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


class TestFrameScores:
    def test_identity_and_orthogonal(self):
        q = Tensor([0.0, 2.0])
        h = Tensor([[0.0, 5.0], [3.0, 0.0]])
        np.testing.assert_allclose(O.vr_frame_scores(q, h).data, [1.0, 0.0], atol=1e-7)

    def test_diagonal_query(self):
        q = Tensor([1.0, 1.0]) * (1 / math.sqrt(2))
        np.testing.assert_allclose(O.vr_frame_scores(q, Tensor([[1.0, 0.0]])).data, [1 / math.sqrt(2)], rtol=1e-6)

    def test_zero_vector_is_finite(self):
        out = O.vr_frame_scores(Tensor([0.0, 0.0]), Tensor([[1.0, 0.0]]))
        assert np.isfinite(out.data).all()

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        q, h = rng.normal(size=4), rng.normal(size=(5, 4))
        a = O.vr_frame_scores(Tensor(q), Tensor(h)).data
        b = O.vr_frame_scores(Tensor(3.5 * q), Tensor(h * rng.uniform(0.5, 4, size=(5, 1)))).data
        np.testing.assert_allclose(a, b, atol=1e-6)


def make_video(h_v, h_s=None, mask=None):
    h_v = Tensor(np.asarray(h_v, dtype=float))
    mask = np.ones(h_v.shape[:2], bool) if mask is None else np.asarray(mask, bool)
    return EncodedVideo(hp_v=h_v, h_v=h_v, mask=mask,
                        hp_s=None if h_s is None else Tensor(h_s), h_s=None if h_s is None else Tensor(h_s))


class TestSimilarity:
    def test_single_stream_max(self):
        q = ModularQuery(q_v=Tensor([1.0, 0.0]), qp_v=Tensor([1.0, 0.0]))
        video = make_video([[[0.9, math.sqrt(1 - 0.81)], [0.0, 1.0]]])
        assert float(O.vr_similarity(q, video).data[0]) == pytest.approx(0.9, abs=1e-6)

    def test_stream_average(self):
        e0 = Tensor([1.0, 0.0])
        q = ModularQuery(q_v=e0, qp_v=e0, q_s=e0, qp_s=e0)
        video = make_video([[[0.8, 0.6]]], np.array([[[0.4, math.sqrt(1 - 0.16)]]]))
        assert float(O.vr_similarity(q, video).data[0]) == pytest.approx(0.6, abs=1e-6)

    def test_mask_leaves_single_column(self):
        q = ModularQuery(q_v=Tensor([1.0, 0.0]), qp_v=Tensor([1.0, 0.0]))
        video = make_video([[[1.0, 0.0], [0.6, 0.8]]], mask=[[False, True]])
        assert float(O.vr_similarity(q, video).data[0]) == pytest.approx(0.6, abs=1e-6)

    def test_matrix_matches_paired(self):
        rng = np.random.default_rng(1)
        qv, qs = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        hv, hs = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))
        mask = rng.random((3, 5)) < 0.7
        mask[:, 0] = True
        with T.default_dtype(np.float64):
            q = ModularQuery(Tensor(qv), Tensor(qv), Tensor(qs), Tensor(qs))
            phi = O.vr_similarity_matrix(q, make_video(hv, hs, mask)).data
            for i in range(3):
                for j in range(3):
                    qi = ModularQuery(Tensor(qv[i:i + 1]), Tensor(qv[i:i + 1]), Tensor(qs[i:i + 1]), Tensor(qs[i:i + 1]))
                    pair = O.vr_similarity(qi, make_video(hv[j:j + 1], hs[j:j + 1], mask[j:j + 1])).data[0]
                    assert phi[i, j] == pytest.approx(pair, abs=1e-12)
        assert (np.abs(phi) <= 1 + 1e-12).all()


class TestHinge:
    def test_both_clamp(self):
        assert float(O.vr_hinge_loss(Tensor(0.9), Tensor(0.2), Tensor(0.3)).data) == 0.0

    def test_hand_value(self):
        assert float(O.vr_hinge_loss(Tensor(0.2), Tensor(0.5), Tensor(0.4)).data) == pytest.approx(0.7, abs=1e-6)

    def test_margin_only(self):
        assert float(O.vr_hinge_loss(Tensor(0.3), Tensor(0.3), Tensor(0.3)).data) == pytest.approx(0.2, abs=1e-6)

    def test_vr_loss_from_matrix(self):
        phi = np.array([[0.2, 0.5], [0.4, 0.9]])
        # anchor 0: query-neg phi[1,0]=0.4, video-neg phi[0,1]=0.5 -> 0.3 + 0.4
        # anchor 1: query-neg phi[0,1]=0.5, video-neg phi[1,0]=0.4 -> 0 + 0
        loss = O.vr_loss(Tensor(phi), [np.array([1]), np.array([0])])
        assert float(loss.data) == pytest.approx(0.35, abs=1e-6)

    def test_empty_negatives(self):
        with pytest.raises(ConfigError):
            O.vr_loss(Tensor(np.eye(2)), [np.array([], int), np.array([0])])

    def test_self_negative_rejected(self):
        with pytest.raises(ConfigError):
            O.negative_weights([np.array([0]), np.array([0])], 2)


class TestLocalization:
    def test_zero_query(self):
        q = ModularQuery(q_v=Tensor([1.0, 1.0]), qp_v=Tensor([0.0, 0.0]))
        assert (O.ml_scores(q, make_video(np.ones((1, 3, 2)))).data == 0).all()

    def test_one_hot(self):
        q = ModularQuery(q_v=Tensor([[1.0, 0.0, 0.0]]), qp_v=Tensor([[1.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(O.ml_scores(q, make_video(np.eye(3)[None])).data, [[1.0, 0.0, 0.0]])

    def test_matvec_oracle(self):
        rng = np.random.default_rng(2)
        h, qp = rng.normal(size=(3, 4)), rng.normal(size=4)
        q = ModularQuery(q_v=Tensor(qp[None]), qp_v=Tensor(qp[None]))
        np.testing.assert_allclose(O.ml_scores(q, make_video(h[None])).data[0], h @ qp, rtol=1e-5)

    def test_distributions_normalized(self):
        bp = BoundaryPredictor(5, np.random.default_rng(0))
        s = Tensor(np.random.default_rng(1).normal(size=(2, 9)))
        mask = np.ones((2, 9), bool)
        mask[1, 6:] = False
        ps, pe = O.ml_distributions(s, bp, mask)
        np.testing.assert_allclose(ps.data.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(pe.data.sum(axis=1), 1.0, atol=1e-6)

    def test_hand_cross_entropy(self):
        logits = Tensor(np.log([0.25, 0.5, 0.25]))
        loss = O.ml_loss(logits, logits, [(1, 2)], np.ones(3, bool))
        assert float(loss.data) == pytest.approx(0.5 * (-math.log(0.5) - math.log(0.25)), abs=1e-6)
        assert float(loss.data) == pytest.approx(1.0397, abs=1e-4)

    def test_uniform(self):
        loss = O.ml_loss(Tensor(np.zeros(4)), Tensor(np.zeros(4)), [(0, 3)], np.ones(4, bool))
        assert float(loss.data) == pytest.approx(math.log(4), abs=1e-6)

    def test_perfect(self):
        logits = Tensor([0.0, 60.0, -60.0])
        loss = O.ml_loss(logits, Tensor([-60.0, 60.0, -60.0]), [(1, 1)], np.ones(3, bool))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-6)

    def test_padded_gold(self):
        with pytest.raises(DataError):
            O.ml_loss(Tensor(np.zeros(4)), Tensor(np.zeros(4)), [(1, 3)], np.array([1, 1, 1, 0], bool))


class TestVideoCL:
    def test_symmetric_case(self):
        logits = Tensor([[0.0, 0.0]])
        info = O.nce_score(logits, [[True, False]], [[False, True]])
        assert -float(info.data) == pytest.approx(math.log(2), abs=1e-6)

    def test_ratio(self):
        info = O.nce_score(Tensor([[math.log(3.0), 0.0]]), [[True, False]], [[False, True]])
        assert -float(info.data) == pytest.approx(-math.log(0.75), abs=1e-6)
        assert -float(info.data) == pytest.approx(0.2877, abs=1e-4)

    def test_negative_limit(self):
        info = O.nce_score(Tensor([[0.0, -200.0]]), [[True, False]], [[False, True]])
        assert -float(info.data) == pytest.approx(0.0, abs=1e-8)

    def test_masks(self):
        pos, neg = O.video_cl_pair_masks(["a", "b", "a"])
        assert pos.tolist() == np.eye(3, dtype=bool).tolist()
        assert neg.tolist() == [[False, True, False], [True, False, True], [False, True, False]]

    def test_batch_of_one(self):
        with pytest.raises(ConfigError):
            O.video_cl_pair_masks(["a"])

    def test_loss_positive_and_monotone(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(4, 4))
        pos, neg = O.video_cl_pair_masks(list("abcd"))
        base = -float(O.nce_score(Tensor(logits), pos, neg).data)
        assert base > 0
        bumped = logits.copy()
        bumped[2, 2] += 0.5
        assert -float(O.nce_score(Tensor(bumped), pos, neg).data) < base


class TestFrameCL:
    def test_zero_scores(self):
        mi = O.js_mi(Tensor([[0.0, 0.0, 0.0]]), [[True, False, False]], [[False, True, True]])
        assert -float(mi.data[0]) == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_softplus_hand_value(self):
        mi = O.js_mi(Tensor([[2.0, -2.0]]), [[True, False]], [[False, True]])
        expected = stable_softplus(-2.0) + stable_softplus(-2.0)
        assert -float(mi.data[0]) == pytest.approx(expected, abs=1e-6)
        assert -float(mi.data[0]) == pytest.approx(0.2538, abs=1e-4)

    def test_separation_limit(self):
        mi = O.js_mi(Tensor([[500.0, -500.0]]), [[True, False]], [[False, True]])
        assert -float(mi.data[0]) == pytest.approx(0.0, abs=1e-8)

    def test_full_span_drops_background(self):
        mi = O.js_mi(Tensor([[0.0, 0.0]]), [[True, True]], [[False, False]])
        assert -float(mi.data[0]) == pytest.approx(math.log(2), abs=1e-6)

    def test_empty_foreground(self):
        with pytest.raises(DataError):
            O.js_mi(Tensor([[0.0, 0.0]]), [[False, False]], [[True, True]])

    def test_span_masks_exclude_padding(self):
        fg, bg = O.span_masks([(1, 2)], np.array([[1, 1, 1, 1, 0]], bool))
        assert fg.tolist() == [[False, True, True, False, False]]
        assert bg.tolist() == [[True, False, False, True, False]]

    def test_monotone(self):
        fg, bg = [[True, True, False, False]], [[False, False, True, True]]
        s = np.array([[0.3, -0.1, 0.2, 0.5]])
        base = -float(O.js_mi(Tensor(s), fg, bg).data[0])
        up_fg, up_bg = s.copy(), s.copy()
        up_fg[0, 0] += 1
        up_bg[0, 3] += 1
        assert -float(O.js_mi(Tensor(up_fg), fg, bg).data[0]) < base < -float(O.js_mi(Tensor(up_bg), fg, bg).data[0])


class TestTotal:
    def test_zero(self):
        r = LossReport(vr=Tensor(0.0), ml=Tensor(0.0), video_cl=Tensor(0.0), frame_cl=Tensor(0.0))
        assert float(O.total_loss(r, (1, .01, .01, .01)).data) == 0.0

    def test_weighted(self):
        r = LossReport(vr=Tensor(0.5), ml=Tensor(1.0), video_cl=Tensor(1.0), frame_cl=Tensor(1.0))
        assert float(O.total_loss(r, (1, .01, .01, .01)).data) == pytest.approx(0.53, abs=1e-6)

    def test_relonet_gate(self):
        a = LossReport(vr=Tensor(0.5), ml=Tensor(1.0), video_cl=Tensor(7.0), frame_cl=Tensor(3.0))
        b = LossReport(vr=Tensor(0.5), ml=Tensor(1.0))
        assert float(O.total_loss(a, (1, .01, 0, 0)).data) == float(O.total_loss(b, (1, .01, .01, .01)).data)

    def test_nan_component(self):
        with pytest.raises(NonFiniteError):
            O.total_loss(LossReport(vr=Tensor(0.5), ml=_nan()), (1, .01, .01, .01))


def _nan():
    # constructors reject NaN, so plant it afterwards
    t = Tensor(0.0)
    t.data = np.array(np.nan)
    return t


class TestGradients:
    """Every loss against central differences in 64-bit arithmetic."""

    @pytest.fixture
    def batch(self):
        rng = np.random.default_rng(4)
        mask = np.ones((3, 6), bool)
        mask[2, 4:] = False
        return rng, mask

    def test_vr(self, batch):
        rng, mask = batch
        hv = rng.normal(size=(3, 6, 4))
        negs = [np.array([1, 2]), np.array([0]), np.array([0, 1])]

        def f(q):
            query = ModularQuery(q_v=q, qp_v=q)
            return O.vr_loss(O.vr_similarity_matrix(query, make_video(hv, mask=mask)), negs, margin=0.5)

        res = gradient_check(f, rng.normal(size=(3, 4)))
        assert res.max_rel_error <= 1e-4 and res.checked > 0

    def test_ml(self, batch):
        rng, mask = batch
        res = gradient_check(lambda s: O.ml_loss(s, s * 0.5, [(0, 2), (3, 5), (1, 3)], mask),
                             rng.normal(size=(3, 6)))
        assert res.max_rel_error <= 1e-4

    def test_video_cl(self, batch):
        rng, mask = batch
        with T.default_dtype(np.float64):
            heads = ContrastiveHeads(4, rng, subtitle_enabled=False)
        hv = rng.normal(size=(3, 6, 4))

        def f(q):
            return O.video_cl_loss(ModularQuery(q_v=q, qp_v=q), make_video(hv, mask=mask), heads, ["a", "b", "c"])

        assert gradient_check(f, rng.normal(size=(3, 4))).max_rel_error <= 1e-4

    def test_frame_cl(self, batch):
        rng, mask = batch
        with T.default_dtype(np.float64):
            heads = ContrastiveHeads(4, rng, subtitle_enabled=False)
        q = rng.normal(size=(3, 4))

        def f(h):
            return O.frame_cl_loss(ModularQuery(q_v=Tensor(q), qp_v=Tensor(q)), EncodedVideo(h, h, mask),
                                   [(0, 2), (3, 5), (1, 3)], heads)

        assert gradient_check(f, rng.normal(size=(3, 6, 4))).max_rel_error <= 1e-4
