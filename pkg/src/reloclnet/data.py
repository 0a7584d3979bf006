"""Synthetic planted-signal corpora, feature/annotation files and batching.

Features are stored per record as ``(length, dim)`` float32 arrays, i.e.
the transpose of the ``dim x length`` matrices in the model description.
"""

import io
import json
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DataError

FEATURE_MAGIC = b"RLCF"
FEATURE_VERSION = 1
ROLES = {"video": 0, "subtitle": 1, "query": 2}
MAX_VIDEO_UNITS = 128


@dataclass
class VideoRecord:
    id: str
    duration: float
    vis_feats: np.ndarray
    sub_feats: Optional[np.ndarray] = None

    @property
    def n_v(self):
        return self.vis_feats.shape[0]

    @property
    def mask(self):
        return np.ones(self.n_v, dtype=bool)


@dataclass
class QueryAnnotation:
    query_id: str
    video_id: str
    word_feats: np.ndarray
    tau_s: float
    tau_e: float
    i_s: int
    i_e: int

    @property
    def n_q(self):
        return self.word_feats.shape[0]

    @property
    def span(self):
        return (self.i_s, self.i_e)


@dataclass
class Corpus:
    videos: dict
    annotations: list
    splits: dict = field(default_factory=dict)
    planted: dict = field(default_factory=dict)
    basis: dict = field(default_factory=dict)

    def subset(self, split):
        """Videos of one split and the annotations that point at them."""
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}")
        ids = list(self.splits[split])
        keep = set(ids)
        return Corpus(videos={i: self.videos[i] for i in ids},
                      annotations=[a for a in self.annotations if a.video_id in keep],
                      splits={split: ids}, planted=self.planted, basis=self.basis)

    def video_ids(self):
        return list(self.videos)


@dataclass
class SyntheticSpec:
    n_train: int = 64
    n_val: int = 32
    n_v_range: tuple = (48, 48)
    n_q_range: tuple = (4, 12)
    d_v: int = 96
    d_w: int = 48
    latent_dim: Optional[int] = None
    signal: float = 1.5
    noise: float = 1.0
    word_noise: float = 0.5
    moments_per_video: tuple = (1, 5)
    span_fraction: tuple = (0.05, 0.4)
    duration_range: tuple = (30.0, 150.0)
    subtitles: bool = True
    seed: int = 0

    def validate(self):
        lo, hi = self.n_v_range
        if not 1 <= lo <= hi <= MAX_VIDEO_UNITS:
            raise ConfigError(f"n_v_range must lie within [1, {MAX_VIDEO_UNITS}]")
        if not 1 <= self.n_q_range[0] <= self.n_q_range[1]:
            raise ConfigError("n_q_range must be positive and ordered")
        if self.signal <= 0:
            raise ConfigError("signal strength must be positive")
        f_lo, f_hi = self.span_fraction
        if not 0 < f_lo <= f_hi <= 1:
            raise ConfigError("span fractions must satisfy 0 < lo <= hi <= 1")
        if not 1 <= self.moments_per_video[0] <= self.moments_per_video[1]:
            raise ConfigError("moments_per_video must be positive and ordered")
        if self.n_train + self.n_val < 1:
            raise ConfigError("corpus must contain at least one video")
        latent = self.latent_dim or min(self.d_v, self.d_w)
        if latent > min(self.d_v, self.d_w):
            raise ConfigError("latent_dim cannot exceed the feature dimensions")
        return self


def time_to_index(tau, duration, n_v):
    """Map a time in seconds onto the clip unit (half-open bin) containing it."""
    if duration <= 0 or n_v < 1:
        raise DataError("duration must be positive and n_v >= 1")
    if tau < 0 or tau > duration:
        raise DataError(f"time {tau} outside [0, {duration}]")
    return int(min(max(math.floor(tau / duration * n_v), 0), n_v - 1))


def span_to_indices(tau_s, tau_e, duration, n_v):
    """Gold (i_s, i_e) for a moment; the end bin excludes an exact right boundary."""
    if not 0 <= tau_s < tau_e <= duration:
        raise DataError(f"invalid moment ({tau_s}, {tau_e}) for duration {duration}")
    i_s = time_to_index(tau_s, duration, n_v)
    i_e = int(min(max(math.ceil(tau_e / duration * n_v) - 1, 0), n_v - 1))
    return i_s, max(i_s, i_e)


def _orthonormal(rng, rows, cols):
    q, _ = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q[:, :cols]


def generate_synthetic_corpus(spec=None):
    """Build a seeded corpus in which each query's direction is planted in its span.

    A latent unit vector ``u`` per query is mapped into visual, subtitle and
    word spaces by fixed orthonormal bases. Frames inside the gold span get
    ``signal * A_v u`` added to isotropic noise of norm about ``noise``.
    """
    spec = (spec or SyntheticSpec()).validate()
    rng = np.random.default_rng(spec.seed)
    latent = spec.latent_dim or min(spec.d_v, spec.d_w)
    basis = {"vis": _orthonormal(rng, spec.d_v, latent),
             "sub": _orthonormal(rng, spec.d_w, latent),
             "word": _orthonormal(rng, spec.d_w, latent)}

    n_total = spec.n_train + spec.n_val
    width = len(str(max(n_total - 1, 1)))
    videos, annotations, planted = {}, [], {}
    for k in range(n_total):
        vid = f"v{k:0{width}d}"
        n_v = int(rng.integers(spec.n_v_range[0], spec.n_v_range[1] + 1))
        duration = float(np.round(rng.uniform(*spec.duration_range), 3))
        vis = rng.normal(0.0, spec.noise / math.sqrt(spec.d_v), size=(n_v, spec.d_v))
        sub = rng.normal(0.0, spec.noise / math.sqrt(spec.d_w), size=(n_v, spec.d_w)) if spec.subtitles else None
        n_moments = int(rng.integers(spec.moments_per_video[0], spec.moments_per_video[1] + 1))
        min_len = max(1, int(round(spec.span_fraction[0] * n_v)))
        max_len = max(min_len, int(round(spec.span_fraction[1] * n_v)))
        if max_len > n_v:
            raise ConfigError("span longer than video")
        unit = duration / n_v
        for j in range(n_moments):
            length = int(rng.integers(min_len, max_len + 1))
            start = int(rng.integers(0, n_v - length + 1))
            end = start + length - 1
            tau_s = float(np.round((start + rng.uniform(0.0, 0.5)) * unit, 6))
            tau_e = float(np.round((end + 1 - rng.uniform(0.0, 0.5)) * unit, 6))
            tau_e = min(tau_e, duration)
            i_s, i_e = span_to_indices(tau_s, tau_e, duration, n_v)
            u = rng.normal(size=latent)
            u /= np.linalg.norm(u)
            vis[i_s : i_e + 1] += spec.signal * (basis["vis"] @ u)
            if sub is not None:
                sub[i_s : i_e + 1] += spec.signal * (basis["sub"] @ u)
            n_q = int(rng.integers(spec.n_q_range[0], spec.n_q_range[1] + 1))
            words = spec.signal * (basis["word"] @ u) + rng.normal(
                0.0, spec.word_noise / math.sqrt(spec.d_w), size=(n_q, spec.d_w))
            qid = f"{vid}_q{j}"
            planted[qid] = u
            annotations.append(QueryAnnotation(qid, vid, words.astype(np.float32), tau_s, tau_e, i_s, i_e))
        videos[vid] = VideoRecord(vid, duration, vis.astype(np.float32),
                                  None if sub is None else sub.astype(np.float32))

    ids = list(videos)
    splits = {"train": ids[: spec.n_train], "val": ids[spec.n_train :]}
    return Corpus(videos=videos, annotations=annotations, splits=splits, planted=planted, basis=basis)


def planted_oracle_scores(corpus, annotation):
    """phi-like score of every corpus video using the query's planted direction."""
    direction = corpus.basis["vis"] @ corpus.planted[annotation.query_id]
    direction = direction / np.linalg.norm(direction)
    out = {}
    for vid, rec in corpus.videos.items():
        feats = rec.vis_feats.astype(np.float64)
        cos = feats @ direction / np.maximum(np.linalg.norm(feats, axis=1), 1e-12)
        out[vid] = float(cos.max())
    return out


def planted_oracle_rankings(corpus):
    """Video ranking per query from the planted-direction scorer (ties by id)."""
    rankings = {}
    for ann in corpus.annotations:
        scores = planted_oracle_scores(corpus, ann)
        rankings[ann.query_id] = sorted(scores, key=lambda v: (-scores[v], v))
    return rankings


# -- batching ---------------------------------------------------------------


@dataclass
class TrainingBatch:
    indices: np.ndarray
    neg_sets: list
    video_ids: list

    def __len__(self):
        return len(self.indices)


def make_batches(annotations, batch_size, seed, n_neg=10, epoch=0):
    """Yield one epoch of shuffled batches whose videos are pairwise distinct.

    Every anchor gets ``min(n_neg, B - 1)`` in-batch negatives drawn without
    replacement. Leftover batches smaller than two are skipped this epoch.
    """
    if batch_size < 2:
        raise ConfigError("batch size must be at least 2 for in-batch negatives")
    rng = np.random.default_rng([int(seed), int(epoch)])
    order = rng.permutation(len(annotations))
    open_batches = []
    for idx in order:
        vid = annotations[idx].video_id
        for members, vids in open_batches:
            if len(members) < batch_size and vid not in vids:
                members.append(int(idx))
                vids.add(vid)
                break
        else:
            open_batches.append(([int(idx)], {vid}))
    for members, _ in open_batches:
        if len(members) < 2:
            continue
        size = len(members)
        k = min(n_neg, size - 1)
        neg_sets = []
        for i in range(size):
            candidates = np.delete(np.arange(size), i)
            neg_sets.append(np.sort(rng.choice(candidates, size=k, replace=False)))
        yield TrainingBatch(indices=np.asarray(members), neg_sets=neg_sets,
                            video_ids=[annotations[m].video_id for m in members])


def pad_sequences(arrays, length=None):
    length = length or max(a.shape[0] for a in arrays)
    dim = arrays[0].shape[1]
    out = np.zeros((len(arrays), length, dim), dtype=np.float32)
    mask = np.zeros((len(arrays), length), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = True
    return out, mask


def collate(corpus, annotations, batch):
    """Pad one :class:`TrainingBatch` into the arrays the model consumes."""
    anns = [annotations[i] for i in batch.indices]
    recs = [corpus.videos[a.video_id] for a in anns]
    words, q_mask = pad_sequences([a.word_feats for a in anns])
    vis, v_mask = pad_sequences([r.vis_feats for r in recs])
    out = {"words": words, "q_mask": q_mask, "vis": vis, "v_mask": v_mask,
           "spans": np.array([a.span for a in anns]), "neg_sets": batch.neg_sets,
           "video_ids": batch.video_ids}
    if all(r.sub_feats is not None for r in recs):
        out["sub"], _ = pad_sequences([r.sub_feats for r in recs])
    return out


# -- files --------------------------------------------------------------------


def write_features(path, role, records):
    """Write ``(id, array)`` pairs as an RLCF feature file."""
    if role not in ROLES:
        raise DataError(f"unknown feature role {role!r}")
    records = list(records)
    dim = records[0][1].shape[1] if records else 0
    max_len = max((a.shape[0] for _, a in records), default=0)
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    buf.write(struct.pack("<IBIII", FEATURE_VERSION, ROLES[role], dim, max_len, len(records)))
    for rid, arr in records:
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise DataError(f"record {rid!r} has shape {arr.shape}, expected (*, {dim})")
        name = rid.encode("utf-8")
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", arr.shape[0]))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_features(path):
    """Return ``(role, {id: array})``; raises :class:`DataError` on any defect."""
    reader = _Reader(Path(path).read_bytes(), path)
    if reader.take(4) != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic")
    version, role_code, dim, max_len, count = reader.unpack("<IBIII")
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    roles = {v: k for k, v in ROLES.items()}
    if role_code not in roles:
        raise DataError(f"{path}: unknown role byte {role_code}")
    records = {}
    for _ in range(count):
        (n_name,) = reader.unpack("<I")
        rid = reader.take(n_name).decode("utf-8")
        (length,) = reader.unpack("<I")
        if length > max_len:
            raise DataError(f"{path}: record {rid!r} longer than header maximum")
        payload = reader.take(4 * length * dim)
        arr = np.frombuffer(payload, dtype="<f4").reshape(length, dim).astype(np.float32)
        if not np.isfinite(arr).all():
            raise DataError(f"{path}: record {rid!r} holds non-finite values")
        records[rid] = arr
    if reader.pos != len(reader.data):
        raise DataError(f"{path}: trailing bytes after {count} records")
    return roles[role_code], records


ANNOTATION_FIELDS = ("query_id", "video_id", "tau_s", "tau_e", "i_s", "i_e", "n_q")


def write_annotations(path, annotations):
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            row = {"query_id": a.query_id, "video_id": a.video_id, "tau_s": a.tau_s, "tau_e": a.tau_e,
                   "i_s": int(a.i_s), "i_e": int(a.i_e), "n_q": int(a.n_q)}
            fh.write(json.dumps(row) + "\n")


def read_annotation_rows(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            missing = [k for k in ANNOTATION_FIELDS if k not in row]
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {missing}")
            rows.append(row)
    return rows


def save_corpus(corpus, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    recs = list(corpus.videos.values())
    write_features(directory / "videos.rlcf", "video", [(r.id, r.vis_feats) for r in recs])
    if recs and all(r.sub_feats is not None for r in recs):
        write_features(directory / "subtitles.rlcf", "subtitle", [(r.id, r.sub_feats) for r in recs])
    write_features(directory / "queries.rlcf", "query", [(a.query_id, a.word_feats) for a in corpus.annotations])
    write_annotations(directory / "annotations.jsonl", corpus.annotations)
    with open(directory / "videos.jsonl", "w", encoding="utf-8") as fh:
        for r in recs:
            fh.write(json.dumps({"video_id": r.id, "duration": r.duration, "n_v": r.n_v}) + "\n")
    (directory / "splits.json").write_text(json.dumps(corpus.splits, indent=1), encoding="utf-8")


def load_corpus(directory):
    directory = Path(directory)
    _, vis = read_features(directory / "videos.rlcf")
    sub = None
    if (directory / "subtitles.rlcf").exists():
        _, sub = read_features(directory / "subtitles.rlcf")
    _, words = read_features(directory / "queries.rlcf")
    videos = {}
    with open(directory / "videos.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            meta = json.loads(line)
            vid = meta["video_id"]
            if vid not in vis:
                raise DataError(f"{directory / 'videos.rlcf'}: no features for video {vid!r}")
            if vis[vid].shape[0] != meta["n_v"]:
                raise DataError(f"video {vid!r}: n_v mismatch between metadata and features")
            videos[vid] = VideoRecord(vid, float(meta["duration"]), vis[vid], None if sub is None else sub[vid])
    annotations = []
    for row in read_annotation_rows(directory / "annotations.jsonl"):
        qid, vid = row["query_id"], row["video_id"]
        if qid not in words or vid not in videos:
            raise DataError(f"annotation {qid!r} refers to missing features")
        n_v = videos[vid].n_v
        if not 0 <= row["i_s"] <= row["i_e"] <= n_v - 1:
            raise DataError(f"annotation {qid!r}: gold indices out of range")
        annotations.append(QueryAnnotation(qid, vid, words[qid], float(row["tau_s"]), float(row["tau_e"]),
                                           int(row["i_s"]), int(row["i_e"])))
    splits = {}
    if (directory / "splits.json").exists():
        splits = json.loads((directory / "splits.json").read_text(encoding="utf-8"))
    return Corpus(videos=videos, annotations=annotations, splits=splits)


def spec_from_dict(data):
    known = {f.name for f in fields(SyntheticSpec)}
    return SyntheticSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items() if k in known})
