"""Recall@k for video retrieval and Recall@k,IoU=mu for moment retrieval."""

import csv
import io
from dataclasses import dataclass, field

from .exceptions import DataError

VR_KS = (1, 5, 10, 100)
MOMENT_KS = (1, 10, 100)
IOU_THRESHOLDS = (0.5, 0.7)


def temporal_iou(a, b):
    """IoU of inclusive index spans, measured on half-open intervals [s, e + 1)."""
    (s1, e1), (s2, e2) = a, b
    inter = max(0, min(e1, e2) + 1 - max(s1, s2))
    union = (e1 + 1 - s1) + (e2 + 1 - s2) - inter
    return inter / union if union > 0 else 0.0


def recall_vr(rankings, gold, k):
    """Fraction of queries whose gold video is among the first ``k`` ranked ids."""
    if not gold:
        return 0.0
    hits = 0
    for qid, vid in gold.items():
        if qid not in rankings:
            raise DataError(f"no ranking for query {qid!r}")
        hits += vid in rankings[qid][:k]
    return hits / len(gold)


def recall_moment(predictions, gold, k, mu, task="vcmr"):
    """Fraction of queries with a top-``k`` prediction whose IoU exceeds ``mu``.

    ``predictions[qid]`` is a ranked list of ``(video_id, (i_s, i_e))``;
    ``gold[qid]`` is ``(video_id, (i_s, i_e))``. For ``task="svmr"`` the
    video is given, so only the span is compared.
    """
    task = task.lower()
    if task not in ("vcmr", "svmr"):
        raise DataError(f"unknown task {task!r}")
    if not gold:
        return 0.0
    hits = 0
    for qid, (gold_vid, gold_span) in gold.items():
        if qid not in predictions:
            raise DataError(f"no predictions for query {qid!r}")
        for vid, span in predictions[qid][:k]:
            if task == "vcmr" and vid != gold_vid:
                continue
            if temporal_iou(span, gold_span) > mu:
                hits += 1
                break
    return hits / len(gold)


@dataclass
class EvalReport:
    vr: dict = field(default_factory=dict)
    svmr: dict = field(default_factory=dict)
    vcmr: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    n_queries: int = 0

    def to_dict(self):
        return {"n_queries": self.n_queries, "VR": self.vr, "SVMR": self.svmr, "VCMR": self.vcmr}

    def curves_csv(self):
        """Rows ``task,k,mu,recall`` for recall-vs-IoU curves."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task", "k", "mu", "recall"])
        for task in ("SVMR", "VCMR"):
            for k, points in sorted(self.curves.get(task, {}).items()):
                for mu, value in points:
                    writer.writerow([task, k, f"{mu:.4f}", f"{value:.6f}"])
        return buf.getvalue()

    def monotonicity_violations(self, tol=0.0):
        """Messages for every broken recall-vs-k or recall-vs-mu ordering."""
        problems = []
        ks = sorted(int(k.split("@")[1]) for k in self.vr)
        for a, b in zip(ks, ks[1:]):
            if self.vr[f"R@{a}"] > self.vr[f"R@{b}"] + tol:
                problems.append(f"VR R@{a} > R@{b}")
        for task in ("SVMR", "VCMR"):
            for k, points in self.curves.get(task, {}).items():
                for (m1, r1), (m2, r2) in zip(points, points[1:]):
                    if r2 > r1 + tol:
                        problems.append(f"{task} R@{k} rises from mu={m1} to mu={m2}")
            table = self.svmr if task == "SVMR" else self.vcmr
            for mu in IOU_THRESHOLDS:
                vals = [table.get(f"R@{k},IoU={mu}") for k in MOMENT_KS]
                for (ka, va), (kb, vb) in zip(zip(MOMENT_KS, vals), zip(MOMENT_KS[1:], vals[1:])):
                    if va is not None and vb is not None and va > vb + tol:
                        problems.append(f"{task} R@{ka} > R@{kb} at IoU={mu}")
        return problems


def build_report(vr_rankings, svmr_predictions, vcmr_predictions, gold, mu_grid=None):
    """Assemble an :class:`EvalReport` from rankings and span predictions."""
    gold_vid = {qid: vid for qid, (vid, _) in gold.items()}
    report = EvalReport(n_queries=len(gold))
    report.vr = {f"R@{k}": recall_vr(vr_rankings, gold_vid, k) for k in VR_KS}
    for mu in IOU_THRESHOLDS:
        for k in MOMENT_KS:
            report.svmr[f"R@{k},IoU={mu}"] = recall_moment(svmr_predictions, gold, k, mu, "svmr")
            report.vcmr[f"R@{k},IoU={mu}"] = recall_moment(vcmr_predictions, gold, k, mu, "vcmr")
    grid = sorted(mu_grid) if mu_grid is not None else [round(0.1 * i, 2) for i in range(1, 10)]
    for task, preds in (("SVMR", svmr_predictions), ("VCMR", vcmr_predictions)):
        report.curves[task] = {k: [(mu, recall_moment(preds, gold, k, mu, task)) for mu in grid]
                               for k in MOMENT_KS}
    return report
