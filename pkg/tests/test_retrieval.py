import math

import numpy as np
import oracles
import pytest

from reloclnet.data import SyntheticSpec, VideoRecord, generate_synthetic_corpus
from reloclnet.encoders import ModelConfig
from reloclnet.exceptions import ConfigError, DataError, DomainError
from reloclnet.model import ReLoCLNetModel
from reloclnet.retrieval import (CorpusIndex, QueryVectors, bench_retrieval, build_corpus_index, encode_queries,
                                 localize_moments, moment_score, retrieve_videos, top_spans, vcmr_rank)

SMALL = dict(d_v=10, d_w=6, d=8, heads=2, n_v_max=16, n_q_max=8)


@pytest.fixture(scope="module")
def setup():
    model = ReLoCLNetModel(ModelConfig(**SMALL, seed=1))
    model.eval()
    spec = SyntheticSpec(n_train=12, n_val=0, n_v_range=(6, 16), n_q_range=(3, 8), d_v=10, d_w=6, seed=2)
    corpus = generate_synthetic_corpus(spec)
    index = build_corpus_index(corpus.videos, model)
    return model, corpus, index


def random_index(rng, n_videos, n_max, d, streams=2):
    ids = [f"vid{j:03d}" for j in rng.permutation(n_videos)]
    lengths = rng.integers(1, n_max + 1, size=n_videos)
    arrays = [rng.normal(size=(n_videos, n_max, d)).astype(np.float32) for _ in range(streams)]
    masks = np.arange(n_max)[None] < lengths[:, None]
    for a in arrays:
        a[~masks] = 0
    return CorpusIndex(ids, arrays, masks), lengths


class TestRetrieveVideos:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        index, lengths = random_index(rng, 10, 7, 5)
        query = QueryVectors(q=[rng.normal(size=5), rng.normal(size=5)], qp=[None, None])
        videos = [(vid, [s[j, : lengths[j]].astype(float).tolist() for s in index.streams])
                  for j, vid in enumerate(index.ids)]
        expected = oracles.retrieve([q.tolist() for q in query.q], videos, 4)
        got = retrieve_videos(query, index, 4)
        assert [v for v, _ in got] == [v for v, _ in expected]
        np.testing.assert_allclose([p for _, p in got], [p for _, p in expected], atol=1e-9)

    def test_k_beyond_corpus(self):
        rng = np.random.default_rng(1)
        index, _ = random_index(rng, 5, 4, 3, streams=1)
        assert len(retrieve_videos(QueryVectors([rng.normal(size=3)], [None]), index, 50)) == 5

    def test_identical_column_ranks_first(self):
        rng = np.random.default_rng(2)
        index, _ = random_index(rng, 6, 1, 4, streams=1)
        target = index.streams[0][3, 0].astype(np.float64)
        top = retrieve_videos(QueryVectors([target * 2.0], [None]), index, 1)[0]
        assert top[0] == index.ids[3] and top[1] == pytest.approx(1.0, abs=1e-6)

    def test_ties_by_id(self):
        streams = [np.ones((3, 1, 2), np.float32)]
        index = CorpusIndex(["c", "a", "b"], streams, np.ones((3, 1), bool))
        assert [v for v, _ in retrieve_videos(QueryVectors([np.ones(2)], [None]), index, 3)] == ["a", "b", "c"]

    def test_empty_index(self):
        index = CorpusIndex([], [], np.zeros((0, 0), bool))
        with pytest.raises(DomainError):
            retrieve_videos(QueryVectors([np.ones(2)], [None]), index, 1)

    def test_bad_k(self):
        index, _ = random_index(np.random.default_rng(3), 3, 2, 2, streams=1)
        with pytest.raises(ConfigError):
            retrieve_videos(QueryVectors([np.ones(2)], [None]), index, 0)


class TestLocalize:
    def test_hand_example(self):
        out = localize_moments([0.1, 0.6, 0.3], [0.2, 0.3, 0.5], top_n=1, l_max=3)
        assert out[0][0] == (1, 2) and out[0][1] == pytest.approx(0.30)

    def test_one_hot(self):
        p = np.eye(5)[2]
        assert localize_moments(p, p, top_n=1)[0] == ((2, 2), 1.0)

    def test_l_max_one_is_diagonal(self):
        rng = np.random.default_rng(4)
        out = localize_moments(rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6)), top_n=30, l_max=1)
        assert len(out) == 6 and all(s == e for (s, e), _ in out)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 20))
        ps, pe = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        # coarse values force ties
        ps, pe = np.round(ps, 1), np.round(pe, 1)
        l_max = int(rng.integers(1, n + 1))
        expected = oracles.localize(ps.tolist(), pe.tolist(), 7, l_max)
        got = localize_moments(ps, pe, top_n=7, l_max=l_max)
        assert [s for s, _ in got] == [s for s, _ in expected]

    def test_no_cap(self):
        ps = np.array([0.9, 0.05, 0.05])
        pe = np.array([0.05, 0.05, 0.9])
        assert localize_moments(ps, pe, top_n=1, l_max=None)[0][0] == (0, 2)
        assert localize_moments(ps, pe, top_n=1, l_max=2)[0][0] != (0, 2)

    def test_mask(self):
        out = localize_moments([0.5, 0.5, 0.0], [0.5, 0.5, 0.0], top_n=10, mask=[True, True, False])
        assert all(e < 2 for (_, e), _ in out)

    def test_no_valid_position(self):
        with pytest.raises(DomainError):
            top_spans(np.ones((1, 3)), np.ones((1, 3)), np.zeros((1, 3), bool), 1)


class TestMomentScore:
    def test_hand_value(self):
        assert moment_score(0.3, 0.1, 30.0) == pytest.approx(0.3 * math.e ** 3)
        assert moment_score(0.3, 0.1, 30.0) == pytest.approx(6.0257, abs=1e-4)

    def test_scale_invariant_order(self):
        rng = np.random.default_rng(5)
        p, phi = rng.random(20), rng.uniform(-1, 1, 20)
        a = np.argsort(-moment_score(p, phi, 30.0), kind="stable")
        b = np.argsort(-moment_score(3.7 * p, phi, 30.0), kind="stable")
        assert (a == b).all()


class TestVcmr:
    def test_sorted_and_consistent(self, setup):
        model, corpus, index = setup
        q = encode_queries(model, [corpus.annotations[0].word_feats])[0]
        preds = vcmr_rank(model, q, index, k=5, top_n=3, l_max=4)
        deltas = [p.delta for p in preds]
        assert deltas == sorted(deltas, reverse=True)
        for p in preds:
            assert p.delta == pytest.approx(p.p_se * math.exp(30.0 * p.phi), rel=1e-9)
            assert 0 <= p.i_s <= p.i_e and p.i_e - p.i_s + 1 <= 4
        assert len({p.video_id for p in preds}) <= 5

    def test_k_one(self, setup):
        model, corpus, index = setup
        q = encode_queries(model, [corpus.annotations[1].word_feats])[0]
        assert len({p.video_id for p in vcmr_rank(model, q, index, k=1)}) == 1

    def test_gamma_zero_orders_by_p_se(self, setup):
        model, corpus, index = setup
        q = encode_queries(model, [corpus.annotations[2].word_feats])[0]
        p = [m.p_se for m in vcmr_rank(model, q, index, k=4, gamma=0.0)]
        assert p == sorted(p, reverse=True)


class TestIndex:
    def test_shape_contract(self, setup):
        _, corpus, index = setup
        assert len(index) == len(corpus.videos) and index.ids == list(corpus.videos)
        for j, rec in enumerate(corpus.videos.values()):
            assert [s.shape for s in index.entry(j)] == [(rec.n_v, 8)] * 2

    def test_rebuild_is_bitwise_identical(self, setup):
        model, corpus, index = setup
        assert build_corpus_index(corpus.videos, model).to_bytes() == index.to_bytes()

    def test_round_trip(self, setup, tmp_path):
        model, corpus, index = setup
        index.save(tmp_path / "i.rlci")
        loaded = CorpusIndex.load(tmp_path / "i.rlci")
        assert loaded.to_bytes() == index.to_bytes()
        q = encode_queries(model, [a.word_feats for a in corpus.annotations[:3]])
        for query in q:
            assert vcmr_rank(model, query, index) == vcmr_rank(model, query, loaded)

    def test_header(self, setup):
        _, _, index = setup
        data = index.to_bytes()
        assert data[:4] == b"RLCI" and int.from_bytes(data[4:8], "little") == 1
        assert data[8:40] == index.fingerprint

    def test_fingerprint_guard(self, setup):
        model, _, index = setup
        index.check_fingerprint(model.fingerprint())
        with pytest.raises(ConfigError):
            index.check_fingerprint(b"\1" * 32)

    @pytest.mark.parametrize("cut", [3, 20, 60, -1])
    def test_truncated(self, setup, cut):
        with pytest.raises(DataError):
            CorpusIndex.from_bytes(setup[2].to_bytes()[:cut])

    def test_bad_magic(self, setup):
        with pytest.raises(DataError):
            CorpusIndex.from_bytes(b"XXXX" + setup[2].to_bytes()[4:])

    def test_empty(self, setup):
        model = setup[0]
        index = build_corpus_index({}, model)
        assert len(index) == 0
        assert len(CorpusIndex.from_bytes(index.to_bytes())) == 0


class TestBench:
    def test_single_pair_modes_agree(self, setup):
        model, corpus, _ = setup
        videos = {k: v for k, v in list(corpus.videos.items())[:1]}
        index = build_corpus_index(videos, model)
        words = [corpus.annotations[0].word_feats]
        a = bench_retrieval(model, index, videos, words, "precomputed")
        b = bench_retrieval(model, index, videos, words, "re-encode")
        assert a.results == b.results
        assert a.results[0][0].span == b.results[0][0].span

    def test_report_fields(self, setup):
        model, corpus, index = setup
        rep = bench_retrieval(model, index, corpus.videos, [a.word_feats for a in corpus.annotations[:4]])
        assert rep.total_seconds >= 0 and rep.mean_seconds == pytest.approx(rep.total_seconds / 4)
        assert rep.to_dict()["n_videos"] == len(corpus.videos)

    def test_bad_mode(self, setup):
        model, corpus, index = setup
        with pytest.raises(ConfigError):
            bench_retrieval(model, index, corpus.videos, [], mode="fast")


def test_video_record_without_subtitles_is_rejected_by_subtitle_model(setup):
    model = setup[0]
    rec = VideoRecord("x", 10.0, np.zeros((4, 10), np.float32), None)
    with pytest.raises(DataError):
        build_corpus_index([rec], model)
