"""Input checks shared by the estimator, the CLI and the file readers."""

import numpy as np

from .data import MAX_VIDEO_UNITS, Corpus
from .exceptions import ConfigError, DataError, DimensionError, NonFiniteError


def check_features(x, dim=None, name="features", max_len=None):
    """Return ``x`` as a finite float32 ``(n, dim)`` array with ``n >= 1``."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D (length, dim), got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise DimensionError(f"{name} is empty")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionError(f"{name} has feature dim {arr.shape[1]}, expected {dim}")
    if max_len is not None and arr.shape[0] > max_len:
        raise DimensionError(f"{name} has length {arr.shape[0]} > {max_len}")
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or inf")
    return arr


def check_query_list(queries, dim=None):
    """Accept one ``(n_q, d_w)`` array or a sequence of them."""
    if isinstance(queries, np.ndarray) and queries.ndim == 2:
        queries = [queries]
    out = [check_features(q, dim, name=f"query {i}") for i, q in enumerate(queries)]
    if not out:
        raise DataError("no queries given")
    return out


def check_corpus(corpus, require_annotations=True):
    """Structural checks on a :class:`Corpus` before training or evaluation."""
    if not isinstance(corpus, Corpus):
        raise DataError(f"expected a Corpus, got {type(corpus).__name__}")
    if not corpus.videos:
        raise DataError("corpus has no videos")
    dims = {r.vis_feats.shape[1] for r in corpus.videos.values()}
    if len(dims) != 1:
        raise DimensionError(f"videos disagree on visual feature dim: {sorted(dims)}")
    for rec in corpus.videos.values():
        if rec.n_v > MAX_VIDEO_UNITS:
            raise DimensionError(f"video {rec.id!r} has {rec.n_v} clip units > {MAX_VIDEO_UNITS}")
        if rec.sub_feats is not None and rec.sub_feats.shape[0] != rec.n_v:
            raise DimensionError(f"video {rec.id!r}: subtitle and visual lengths differ")
    if require_annotations and not corpus.annotations:
        raise DataError("corpus has no annotations")
    for ann in corpus.annotations:
        if ann.video_id not in corpus.videos:
            raise DataError(f"annotation {ann.query_id!r} names unknown video {ann.video_id!r}")
        if not 0 <= ann.i_s <= ann.i_e < corpus.videos[ann.video_id].n_v:
            raise DataError(f"annotation {ann.query_id!r}: span {ann.span} outside the video")
    return corpus


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_probability(value, name, closed_right=False):
    ok = 0.0 <= value <= 1.0 if closed_right else 0.0 <= value < 1.0
    if not ok:
        raise ConfigError(f"{name} must lie in [0, 1{']' if closed_right else ')'}, got {value!r}")
    return float(value)
