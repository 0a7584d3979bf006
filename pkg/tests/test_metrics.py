import numpy as np
import oracles
import pytest

from reloclnet.exceptions import DataError
from reloclnet.metrics import EvalReport, build_report, recall_moment, recall_vr, temporal_iou


class TestIoU:
    def test_hand_value(self):
        assert temporal_iou((2, 5), (4, 7)) == pytest.approx(1 / 3)

    def test_identity_and_disjoint(self):
        assert temporal_iou((3, 3), (3, 3)) == 1.0
        assert temporal_iou((0, 2), (3, 9)) == 0.0

    def test_matches_set_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            a = tuple(sorted(rng.integers(0, 20, 2).tolist()))
            b = tuple(sorted(rng.integers(0, 20, 2).tolist()))
            assert temporal_iou(a, b) == pytest.approx(oracles.iou(a, b))
            assert temporal_iou(a, b) == temporal_iou(b, a)


class TestRecallVr:
    def test_gold_ranks(self):
        # gold sits at ranks 1, 4 and 12
        rankings = {"a": ["g"] + list("bcdefghijklm"),
                    "b": list("xyz") + ["g"] + list("pq"),
                    "c": [f"o{i}" for i in range(11)] + ["g"]}
        gold = {q: "g" for q in rankings}
        rankings["a"] = ["g"] + [f"n{i}" for i in range(12)]
        got = {k: recall_vr(rankings, gold, k) for k in (1, 5, 10, 100)}
        assert got == pytest.approx({1: 1 / 3, 5: 2 / 3, 10: 2 / 3, 100: 1.0})

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        vids = [f"v{i}" for i in range(8)]
        rankings = {f"q{i}": list(rng.permutation(vids)) for i in range(20)}
        gold = {q: vids[rng.integers(8)] for q in rankings}
        for k in (1, 3, 5, 8, 100):
            assert recall_vr(rankings, gold, k) == oracles.recall_vr(rankings, gold, k)
        assert recall_vr(rankings, gold, 100) == recall_vr(rankings, gold, 8) == 1.0

    def test_missing_query(self):
        with pytest.raises(DataError):
            recall_vr({}, {"q": "v"}, 1)

    def test_empty_gold(self):
        assert recall_vr({}, {}, 1) == 0.0


class TestRecallMoment:
    GOLD = {"q1": ("v1", (2, 5)), "q2": ("v2", (0, 3)), "q3": ("v3", (4, 4)),
            "q4": ("v1", (0, 9)), "q5": ("v2", (6, 8))}
    PRED = {"q1": [("v1", (2, 5))],
            "q2": [("v9", (0, 3)), ("v2", (0, 1))],
            "q3": [("v1", (0, 1)), ("v3", (4, 5))],
            "q4": [("v1", (0, 5))],
            "q5": [("v7", (6, 8))]}

    def test_counting(self):
        # IoUs against the right video: q1 1.0, q2 0.5, q3 0.5, q4 0.6; q5 only has the wrong video
        assert recall_moment(self.PRED, self.GOLD, 1, 0.5, "vcmr") == pytest.approx(2 / 5)
        assert recall_moment(self.PRED, self.GOLD, 2, 0.5, "vcmr") == pytest.approx(2 / 5)
        assert recall_moment(self.PRED, self.GOLD, 2, 0.4, "vcmr") == pytest.approx(4 / 5)
        assert recall_moment(self.PRED, self.GOLD, 1, 0.5, "svmr") == pytest.approx(4 / 5)

    def test_wrong_video_fails_vcmr_only(self):
        gold = {"q": ("v1", (0, 3))}
        pred = {"q": [("v2", (0, 3))]}
        assert recall_moment(pred, gold, 1, 0.5, "vcmr") == 0.0
        assert recall_moment(pred, gold, 1, 0.5, "svmr") == 1.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        gold, pred = {}, {}
        for i in range(30):
            gold[f"q{i}"] = (f"v{rng.integers(3)}", tuple(sorted(rng.integers(0, 12, 2).tolist())))
            pred[f"q{i}"] = [(f"v{rng.integers(3)}", tuple(sorted(rng.integers(0, 12, 2).tolist())))
                             for _ in range(int(rng.integers(0, 15)))]
        for task in ("vcmr", "svmr"):
            for k in (1, 5, 10, 100):
                for mu in (0.3, 0.5, 0.7):
                    assert recall_moment(pred, gold, k, mu, task) == oracles.recall_moment(pred, gold, k, mu, task)

    def test_unknown_task(self):
        with pytest.raises(DataError):
            recall_moment({}, {"q": ("v", (0, 0))}, 1, 0.5, "vr")


class TestReport:
    def make(self):
        gold = TestRecallMoment.GOLD
        vr = {q: ["v1", "v2", "v3", "v7", "v9"] for q in gold}
        return build_report(vr, TestRecallMoment.PRED, TestRecallMoment.PRED, gold)

    def test_keys_and_monotone(self):
        rep = self.make()
        assert set(rep.vr) == {"R@1", "R@5", "R@10", "R@100"}
        assert "R@10,IoU=0.5" in rep.vcmr and "R@100,IoU=0.7" in rep.svmr
        assert rep.monotonicity_violations() == []

    def test_violation_is_reported(self):
        rep = EvalReport(vr={"R@1": 0.5, "R@5": 0.4})
        assert rep.monotonicity_violations() == ["VR R@1 > R@5"]

    def test_curves_csv(self):
        rep = build_report({"q1": ["v1"]}, {"q1": [("v1", (2, 5))]}, {"q1": [("v1", (2, 4))]},
                           {"q1": ("v1", (2, 5))}, mu_grid=[0.8, 0.2])
        rows = rep.curves_csv().splitlines()
        assert rows[0] == "task,k,mu,recall"
        assert "VCMR,1,0.2000,1.000000" in rows and "VCMR,1,0.8000,0.000000" in rows
        assert len(rows) == 1 + 2 * 3 * 2
