"""Two-stage inference: corpus index, top-K video retrieval, span localization, VCMR ranking.

Videos are encoded once into their final representations and stored;
a query is then encoded alone and compared against the stored
representations by cosine (retrieval) and dot product (localization).
"""

import io
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import pad_sequences
from .exceptions import ConfigError, DataError, DomainError, NonFiniteError
from .tensor import Tensor, no_grad

INDEX_MAGIC = b"RLCI"
INDEX_VERSION = 1


@dataclass
class QueryVectors:
    """Pooled (``q``) and re-projected (``qp``) query vectors per stream, float64."""

    q: list
    qp: list


@dataclass
class MomentPrediction:
    video_id: str
    i_s: int
    i_e: int
    p_se: float
    phi: float
    delta: float

    @property
    def span(self):
        return (self.i_s, self.i_e)

    def to_dict(self):
        return {"video_id": self.video_id, "i_s": self.i_s, "i_e": self.i_e,
                "p_se": self.p_se, "phi": self.phi, "delta": self.delta}


class CorpusIndex:
    """Final video representations for a corpus, padded into dense arrays.

    ``streams[m]`` has shape ``(M, n_max, d)``: row ``i`` of entry ``j`` is
    column ``i`` of the ``d x n_v`` matrix H_m for video ``j``.
    """

    def __init__(self, ids, streams, masks, fingerprint=b"\0" * 32):
        self.ids = list(ids)
        self.streams = [np.asarray(s, dtype=np.float32) for s in streams]
        self.masks = np.asarray(masks, dtype=bool)
        self.fingerprint = bytes(fingerprint)
        if len(self.fingerprint) != 32:
            raise DataError("index fingerprint must be 32 bytes")
        for s in self.streams:
            if s.shape[:2] != self.masks.shape:
                raise DataError("stream arrays and masks disagree in shape")
            if not np.isfinite(s).all():
                raise NonFiniteError("index holds non-finite representations")
        self.n_v = self.masks.sum(axis=1).astype(int)
        self._unit = None
        self._id_rank = None

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.streams[0].shape[2] if self.streams else 0

    @property
    def unit_streams(self):
        if self._unit is None:
            unit = []
            for s in self.streams:
                s64 = s.astype(np.float64)
                norm = np.sqrt((s64 * s64).sum(axis=-1, keepdims=True))
                unit.append(s64 / np.maximum(norm, 1e-12))
            self._unit = unit
        return self._unit

    @property
    def id_rank(self):
        if self._id_rank is None:
            order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
            rank = np.empty(len(self.ids), dtype=int)
            rank[order] = np.arange(len(self.ids))
            self._id_rank = rank
        return self._id_rank

    def entry(self, j):
        n = self.n_v[j]
        return [s[j, :n] for s in self.streams]

    def check_fingerprint(self, fingerprint):
        if bytes(fingerprint) != self.fingerprint:
            raise ConfigError("index was built with a different checkpoint")

    # -- persistence ------------------------------------------------------

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(INDEX_MAGIC)
        buf.write(struct.pack("<I", INDEX_VERSION))
        buf.write(self.fingerprint)
        buf.write(struct.pack("<III", len(self.streams), self.dim, len(self.ids)))
        for j, vid in enumerate(self.ids):
            name = vid.encode("utf-8")
            n = int(self.n_v[j])
            buf.write(struct.pack("<I", len(name)))
            buf.write(name)
            buf.write(struct.pack("<I", n))
            buf.write(np.packbits(self.masks[j, :n]).tobytes())
            for s in self.streams:
                buf.write(np.ascontiguousarray(s[j, :n], dtype="<f4").tobytes())
        return buf.getvalue()

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data, source="<bytes>"):
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(data):
                raise DataError(f"{source}: truncated index")
            chunk = data[pos : pos + n]
            pos += n
            return chunk

        if take(4) != INDEX_MAGIC:
            raise DataError(f"{source}: not an RLCI index")
        (version,) = struct.unpack("<I", take(4))
        if version != INDEX_VERSION:
            raise DataError(f"{source}: unsupported index version {version}")
        fp = take(32)
        n_streams, dim, count = struct.unpack("<III", take(12))
        ids, per_stream, masks = [], [[] for _ in range(n_streams)], []
        for _ in range(count):
            (n_name,) = struct.unpack("<I", take(4))
            ids.append(take(n_name).decode("utf-8"))
            (n,) = struct.unpack("<I", take(4))
            masks.append(np.unpackbits(np.frombuffer(take((n + 7) // 8), dtype=np.uint8))[:n].astype(bool))
            for m in range(n_streams):
                per_stream[m].append(np.frombuffer(take(4 * n * dim), dtype="<f4").reshape(n, dim))
        if pos != len(data):
            raise DataError(f"{source}: trailing bytes in index")
        if count == 0:
            return cls([], [np.zeros((0, 0, dim), np.float32) for _ in range(n_streams)], np.zeros((0, 0), bool), fp)
        streams = [pad_sequences(rows)[0] for rows in per_stream]
        n_max = streams[0].shape[1]
        mask_arr = np.zeros((count, n_max), dtype=bool)
        for j, m in enumerate(masks):
            mask_arr[j, : len(m)] = m
        return cls(ids, streams, mask_arr, fp)

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes(), str(path))


# -- encoding -----------------------------------------------------------------


def encode_video_arrays(model, record):
    """Final representations of one video, encoded on its own (batch of one)."""
    model.eval()
    with no_grad():
        enc = model.encode_video(record.vis_feats[None], None if record.sub_feats is None else record.sub_feats[None])
    return [h.data[0] for h in enc.final_streams()]


def index_from_arrays(ids, per_video_streams, fingerprint):
    if not ids:
        return CorpusIndex([], [], np.zeros((0, 0), bool), fingerprint)
    n_streams = len(per_video_streams[0])
    streams, masks = [], None
    for m in range(n_streams):
        padded, masks = pad_sequences([v[m] for v in per_video_streams])
        streams.append(padded)
    return CorpusIndex(ids, streams, masks, fingerprint)


def build_corpus_index(videos, model, fingerprint=None):
    """Encode every video once; one index entry per input video, in input order."""
    videos = list(videos.values()) if isinstance(videos, dict) else list(videos)
    fingerprint = model.fingerprint() if fingerprint is None else fingerprint
    arrays = [encode_video_arrays(model, rec) for rec in videos]
    return index_from_arrays([rec.id for rec in videos], arrays, fingerprint)


def encode_queries(model, word_feats, chunk=64):
    """Encode a list of ``(n_q, d_w)`` arrays into :class:`QueryVectors`."""
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(word_feats), chunk):
            words, mask = pad_sequences(word_feats[start : start + chunk])
            query = model.encode_query(words, mask)
            streams = query.streams()
            for b in range(words.shape[0]):
                out.append(QueryVectors(q=[s[0].data[b].astype(np.float64) for s in streams],
                                        qp=[s[1].data[b].astype(np.float64) for s in streams]))
    return out


# -- scoring --------------------------------------------------------------------


def video_scores(query, index):
    """phi for every indexed video: per-stream max cosine over valid rows, stream-averaged."""
    if len(index) == 0:
        raise DomainError("cannot score against an empty index")
    total = np.zeros(len(index))
    for q, unit in zip(query.q, index.unit_streams):
        qn = q / max(np.linalg.norm(q), 1e-12)
        cos = np.where(index.masks, unit @ qn, -np.inf)
        total += cos.max(axis=1)
    return total / len(query.q)


def retrieve_videos(query, index, k):
    """Top-``k`` ``(video_id, phi)`` pairs, descending; ties by ascending id."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    phi = video_scores(query, index)
    order = np.lexsort((index.id_rank, -phi))[:k]
    return [(index.ids[j], float(phi[j])) for j in order]


def _masked_softmax_rows(x, mask):
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def boundary_distributions(model, query, rows, masks):
    """P_start, P_end for a stack of videos; ``rows[m]`` is ``(K, n, d)``."""
    scores = np.zeros(masks.shape)
    for qp, h in zip(query.qp, rows):
        scores += h.astype(np.float64) @ qp
    scores /= len(rows)
    with no_grad():
        start, end = model.predictor(Tensor(scores), masks)
    return (_masked_softmax_rows(start.data.astype(np.float64), masks),
            _masked_softmax_rows(end.data.astype(np.float64), masks))


def top_spans(p_start, p_end, mask, top_n, l_max=None):
    """Best ``top_n`` spans per row by P_start[i_s] * P_end[i_e].

    Only pairs with ``i_s <= i_e``, both valid and ``i_e - i_s + 1 <= l_max``
    are considered. Returns arrays ``(i_s, i_e, p)`` of shape ``(K, top_n)``;
    slots beyond the number of feasible pairs hold ``p = -1``.
    """
    if top_n < 1 or (l_max is not None and l_max < 1):
        raise ConfigError("top_n and l_max must be >= 1")
    p_start = np.atleast_2d(p_start)
    p_end = np.atleast_2d(p_end)
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if not mask.any(axis=1).all():
        raise DomainError("no valid position to localize in")
    k, n = p_start.shape
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    band = j >= i
    if l_max is not None:
        band &= (j - i + 1) <= l_max
    valid = band[None] & mask[:, :, None] & mask[:, None, :]
    flat = np.where(valid, p_start[:, :, None] * p_end[:, None, :], -1.0).reshape(k, n * n)
    top = min(top_n, n * n)
    order = np.argsort(-flat, axis=1, kind="stable")[:, :top]
    probs = np.take_along_axis(flat, order, axis=1)
    return order // n, order % n, probs


def localize_moments(p_start, p_end, top_n=10, l_max=16, mask=None):
    """Top spans of a single video as ``[((i_s, i_e), p_se), ...]``."""
    p_start = np.asarray(p_start, dtype=np.float64)
    if mask is None:
        mask = np.ones(p_start.shape[-1], dtype=bool)
    s, e, p = top_spans(p_start, p_end, mask, top_n, l_max)
    return [((int(a), int(b)), float(c)) for a, b, c in zip(s[0], e[0], p[0]) if c >= 0]


def localize_in_video(model, query, streams, top_n=10, l_max=16):
    """Spans for one query inside one encoded video (``streams[m]`` is ``(n, d)``)."""
    mask = np.ones((1, streams[0].shape[0]), dtype=bool)
    ps, pe = boundary_distributions(model, query, [s[None] for s in streams], mask)
    return localize_moments(ps[0], pe[0], top_n, l_max, mask[0])


def moment_score(p_se, phi, gamma):
    """delta = P_se * exp(gamma * phi)."""
    return p_se * np.exp(gamma * phi)


def vcmr_rank(model, query, index, k=100, top_n=10, l_max=16, gamma=30.0):
    """Rank moments over the top-``k`` videos by delta = P_se * exp(gamma * phi)."""
    top = retrieve_videos(query, index, k)
    pos = {vid: j for j, vid in enumerate(index.ids)}
    rows_idx = np.array([pos[vid] for vid, _ in top])
    phi = np.array([p for _, p in top])
    masks = index.masks[rows_idx]
    rows = [s[rows_idx] for s in index.streams]
    ps, pe = boundary_distributions(model, query, rows, masks)
    s_idx, e_idx, p_se = top_spans(ps, pe, masks, top_n, l_max)
    feasible = p_se >= 0
    vid_row = np.broadcast_to(np.arange(len(top))[:, None], p_se.shape)[feasible]
    s_idx, e_idx, p_se = s_idx[feasible], e_idx[feasible], p_se[feasible]
    delta = moment_score(p_se, phi[vid_row], gamma)
    order = np.lexsort((e_idx, s_idx, index.id_rank[rows_idx][vid_row], -delta))
    return [MomentPrediction(top[vid_row[o]][0], int(s_idx[o]), int(e_idx[o]), float(p_se[o]),
                             float(phi[vid_row[o]]), float(delta[o])) for o in order]


# -- benchmark ------------------------------------------------------------------


@dataclass
class BenchReport:
    mode: str
    n_queries: int
    n_videos: int
    total_seconds: float
    mean_seconds: float
    results: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {"mode": self.mode, "n_queries": self.n_queries, "n_videos": self.n_videos,
                "total_seconds": self.total_seconds, "mean_seconds": self.mean_seconds}


def bench_retrieval(model, index, videos, word_feats, mode="precomputed", k=100, top_n=10, l_max=16,
                    gamma=30.0, threads=1):
    """Time end-to-end VCMR per query.

    ``precomputed`` scores against the stored index. ``re-encode`` encodes
    every corpus video again for every query, the cost a model with
    query-dependent video encoding would pay, then applies the same scoring.
    """
    if mode not in ("precomputed", "re-encode"):
        raise ConfigError(f"unknown bench mode {mode!r}")
    videos = list(videos.values()) if isinstance(videos, dict) else list(videos)
    results = []
    with threadpool_limits(limits=threads):
        start = time.perf_counter()
        for words in word_feats:
            query = encode_queries(model, [words])[0]
            if mode == "precomputed":
                target = index
            else:
                target = index_from_arrays([r.id for r in videos],
                                           [encode_video_arrays(model, r) for r in videos], index.fingerprint)
            results.append(vcmr_rank(model, query, target, k, top_n, l_max, gamma))
        total = time.perf_counter() - start
    n = len(word_feats)
    return BenchReport(mode, n, len(index), total, total / n if n else 0.0, results)
