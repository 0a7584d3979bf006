"""Training objectives: VR hinge, ML cross-entropy, VideoCL (NCE) and FrameCL (JS MI)."""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, DataError, NonFiniteError
from .nn import AdditivePool, Linear, Module, Parameter, _uniform
from .tensor import Tensor


class ContrastiveHeads(Module):
    """Projections f (video) and g (query), bilinear discriminator, and video pooling."""

    def __init__(self, d, rng, subtitle_enabled=True):
        self.f = Linear(d, d, rng)
        self.g = Linear(d, d, rng)
        self.disc = Parameter(_uniform(rng, (d, d), d))
        self.pool_v = AdditivePool(d, rng)
        if subtitle_enabled:
            self.pool_s = AdditivePool(d, rng)

    def pools(self):
        return [self.pool_v] + ([self.pool_s] if hasattr(self, "pool_s") else [])


@dataclass
class LossReport:
    vr: Optional[Tensor] = None
    ml: Optional[Tensor] = None
    video_cl: Optional[Tensor] = None
    frame_cl: Optional[Tensor] = None
    total: Optional[Tensor] = None

    def to_dict(self):
        def val(t):
            return 0.0 if t is None else float(t.data)

        return {"L_VR": val(self.vr), "L_ML": val(self.ml), "L_VideoCL": val(self.video_cl),
                "L_FrameCL": val(self.frame_cl), "L_total": val(self.total)}


# -- video retrieval --------------------------------------------------------


def vr_frame_scores(q, h):
    """Cosine similarity of ``q`` (…, d) with every row of ``h`` (…, n, d)."""
    qn = T.l2_normalize(q, axis=-1)
    hn = T.l2_normalize(h, axis=-1)
    if q.ndim == 1:
        return (hn @ qn.reshape(-1, 1)).reshape(h.shape[:-1])
    batch = q.shape[0]
    return (hn @ qn.reshape(batch, -1, 1)).reshape(batch, h.shape[1])


def vr_similarity(query, video):
    """Paired video score phi: per-stream masked max of cosines, averaged over streams."""
    per_stream = []
    for (q, _), h in zip(query.streams(), video.final_streams()):
        per_stream.append(T.masked_max(vr_frame_scores(q, h), video.mask, axis=-1))
    return per_stream[0] if len(per_stream) == 1 else (per_stream[0] + per_stream[1]) * 0.5


def vr_similarity_matrix(query, video):
    """phi[i, j] = score of query i against video j for batched inputs."""
    per_stream = []
    for (q, _), h in zip(query.streams(), video.final_streams()):
        bq, (bv, n, d) = q.shape[0], h.shape
        qn = T.l2_normalize(q, axis=-1)
        hn = T.l2_normalize(h, axis=-1).reshape(bv * n, d)
        cos = (hn @ qn.T).reshape(bv, n, bq).transpose(2, 0, 1)
        per_stream.append(T.masked_max(cos, video.mask[None], axis=-1))
    return per_stream[0] if len(per_stream) == 1 else (per_stream[0] + per_stream[1]) * 0.5


def vr_hinge_loss(phi_pos, neg_query_mean, neg_video_mean, margin=0.1):
    """max(0, margin + mean phi' - phi) + max(0, margin + mean phi'' - phi)."""
    return T.relu(neg_query_mean - phi_pos + margin) + T.relu(neg_video_mean - phi_pos + margin)


def negative_weights(neg_sets, batch):
    """Row i spreads weight 1/|N_i| over anchor i's negative indices."""
    w = np.zeros((batch, batch))
    for i, negs in enumerate(neg_sets):
        negs = np.asarray(negs, dtype=int)
        if negs.size == 0:
            raise ConfigError(f"anchor {i} has an empty negative set")
        if (negs == i).any():
            raise ConfigError(f"anchor {i} lists itself as a negative")
        w[i, negs] = 1.0 / negs.size
    return w


def vr_loss(phi, neg_sets, margin=0.1):
    """Batch-mean hinge loss from the (query x video) score matrix.

    For anchor i, query negatives score phi[j, i] and video negatives
    score phi[i, j] for j in ``neg_sets[i]``.
    """
    batch = phi.shape[0]
    w = negative_weights(neg_sets, batch)
    pos = phi * np.eye(batch)
    phi_pos = pos.sum(axis=1)
    neg_query = (phi * w.T).sum(axis=0)
    neg_video = (phi * w).sum(axis=1)
    return vr_hinge_loss(phi_pos, neg_query, neg_video, margin).mean()


# -- moment localization ----------------------------------------------------


def ml_scores(query, video):
    """Un-normalised dot products H_m . q'_m, averaged over streams; shape (batch, n)."""
    per_stream = []
    for (_, qp), h in zip(query.streams(), video.final_streams()):
        batch, n, d = h.shape
        per_stream.append((h @ qp.reshape(batch, d, 1)).reshape(batch, n))
    return per_stream[0] if len(per_stream) == 1 else (per_stream[0] + per_stream[1]) * 0.5


def ml_logits(scores, predictor, mask):
    return predictor(scores, mask)


def ml_distributions(scores, predictor, mask):
    start, end = predictor(scores, mask)
    return T.masked_softmax(start, mask, axis=-1), T.masked_softmax(end, mask, axis=-1)


def _check_spans(spans, mask):
    spans = np.asarray(spans, dtype=int).reshape(-1, 2)
    rows = np.arange(len(spans))
    if (spans[:, 0] > spans[:, 1]).any() or (spans < 0).any() or (spans[:, 1] >= mask.shape[1]).any():
        raise DataError("gold span out of range")
    if not (mask[rows, spans[:, 0]].all() and mask[rows, spans[:, 1]].all()):
        raise DataError("gold span touches a padded position")
    return spans, rows


def ml_loss(start_logits, end_logits, spans, mask):
    """Batch mean of 0.5 * (-log P_start[i_s] - log P_end[i_e])."""
    squeeze = start_logits.ndim == 1
    if squeeze:
        start_logits = start_logits.reshape(1, -1)
        end_logits = end_logits.reshape(1, -1)
        mask = np.asarray(mask, dtype=bool)[None]
    mask = np.asarray(mask, dtype=bool)
    spans, rows = _check_spans(spans, mask)
    log_ps = T.masked_log_softmax(start_logits, mask, axis=-1)
    log_pe = T.masked_log_softmax(end_logits, mask, axis=-1)
    nll = -(log_ps[rows, spans[:, 0]] + log_pe[rows, spans[:, 1]]) * 0.5
    return nll.mean()


# -- VideoCL ----------------------------------------------------------------


def nce_score(logits, pos_mask, neg_mask):
    """log( sum_P e^s / (sum_P e^s + sum_N e^s) ) over a score matrix."""
    pos_mask = np.asarray(pos_mask, dtype=bool)
    neg_mask = np.asarray(neg_mask, dtype=bool)
    if not neg_mask.any():
        raise ConfigError("VideoCL needs at least one negative pair")
    return T.logsumexp(logits, pos_mask) - T.logsumexp(logits, pos_mask | neg_mask)


def video_cl_pair_masks(video_ids):
    """Matched pairs on the diagonal; negatives pair different videos."""
    ids = np.asarray(video_ids)
    if len(ids) < 2:
        raise ConfigError("VideoCL needs a batch of at least two pairs")
    pos = np.eye(len(ids), dtype=bool)
    neg = ids[:, None] != ids[None, :]
    return pos, neg


def video_cl_loss(query, video, heads, video_ids):
    """-I^e with I^e the stream-averaged NCE score of (f(c_m), g(q_m)) pairs."""
    pos, neg = video_cl_pair_masks(video_ids)
    scores = []
    for (q, _), hp, pool in zip(query.streams(), video.cross_streams(), heads.pools()):
        c = pool(hp, video.mask)
        logits = heads.g(q) @ heads.f(c).T
        scores.append(nce_score(logits, pos, neg))
    info = scores[0] if len(scores) == 1 else (scores[0] + scores[1]) * 0.5
    return -info


# -- FrameCL ----------------------------------------------------------------


def js_mi(scores, fg_mask, bg_mask):
    """Per-row E_F[-sp(-C)] - E_B[sp(C)]; an empty background contributes 0."""
    fg = np.asarray(fg_mask, dtype=bool)
    bg = np.asarray(bg_mask, dtype=bool)
    n_fg = fg.sum(axis=-1, keepdims=True)
    n_bg = bg.sum(axis=-1, keepdims=True)
    if (n_fg == 0).any():
        raise DataError("FrameCL needs a non-empty foreground")
    w_fg = fg / n_fg
    w_bg = np.where(n_bg > 0, bg / np.maximum(n_bg, 1), 0.0)
    pos_term = -(T.softplus(-scores) * w_fg).sum(axis=-1)
    neg_term = (T.softplus(scores) * w_bg).sum(axis=-1)
    return pos_term - neg_term


def span_masks(spans, mask):
    mask = np.asarray(mask, dtype=bool)
    spans, _ = _check_spans(spans, mask)
    idx = np.arange(mask.shape[1])[None]
    fg = (idx >= spans[:, :1]) & (idx <= spans[:, 1:])
    return fg, mask & ~fg


def frame_cl_loss(query, video, spans, heads, source="cross"):
    """-I^a: discriminator C(q, h) = q^T W h over foreground vs background frames."""
    fg, bg = span_masks(spans, video.mask)
    streams = video.cross_streams() if source == "cross" else video.final_streams()
    infos = []
    for (q, _), hp in zip(query.streams(), streams):
        batch, n, d = hp.shape
        u = q @ heads.disc
        scores = (hp @ u.reshape(batch, d, 1)).reshape(batch, n)
        infos.append(js_mi(scores, fg, bg).mean())
    info = infos[0] if len(infos) == 1 else (infos[0] + infos[1]) * 0.5
    return -info


# -- total --------------------------------------------------------------------


def total_loss(report, lambdas):
    """Weighted sum of the enabled components; raises on a non-finite component."""
    parts = (report.vr, report.ml, report.video_cl, report.frame_cl)
    total = None
    for lam, part in zip(lambdas, parts):
        if part is None or lam == 0.0:
            continue
        value = float(part.data)
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite loss component: {value}")
        term = part * lam
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)
    report.total = total
    return total
