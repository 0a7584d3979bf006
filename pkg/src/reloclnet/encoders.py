"""Query and video encoders built from :mod:`reloclnet.nn` blocks."""

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .exceptions import ConfigError, DataError, DomainError
from .nn import AdditivePool, CoAttentionBlock, Dropout, Linear, Module, PositionalEmbedding, TransformerBlock
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Architecture and objective hyperparameters.

    Defaults are the desk-scale profile; :meth:`paper` returns the
    full-size TVR profile.
    """

    d_v: int = 96
    d_w: int = 48
    d: int = 64
    n_v_max: int = 48
    n_q_max: int = 30
    heads: int = 4
    d_ff: Optional[int] = None
    conv_width: int = 5
    dropout: float = 0.1
    margin: float = 0.1
    lambdas: tuple = (1.0, 0.01, 0.01, 0.01)
    gamma: float = 30.0
    top_k: int = 100
    top_n: int = 10
    l_max: Optional[int] = 16
    n_neg: int = 10
    subtitle_enabled: bool = True
    query_blocks: int = 2
    frame_cl_source: str = "cross"
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if self.d_ff is None:
            self.d_ff = 4 * self.d
        self.validate()

    def validate(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.conv_width % 2 == 0:
            raise ConfigError("conv_width must be odd")
        if len(self.lambdas) != 4 or any(x < 0 for x in self.lambdas):
            raise ConfigError("lambdas must be four non-negative weights")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.frame_cl_source not in ("cross", "final"):
            raise ConfigError("frame_cl_source must be 'cross' or 'final'")
        if self.l_max is not None and self.l_max < 1:
            raise ConfigError("l_max must be >= 1 or None")
        return self

    @classmethod
    def paper(cls, **overrides):
        base = dict(d_v=3072, d_w=768, d=384, n_v_max=128, n_q_max=30, gamma=30.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        out = asdict(self)
        out["lambdas"] = list(self.lambdas)
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ModularQuery:
    q_v: Tensor
    qp_v: Tensor
    q_s: Optional[Tensor] = None
    qp_s: Optional[Tensor] = None

    def streams(self):
        """(pooled, re-projected) per available stream, visual first."""
        out = [(self.q_v, self.qp_v)]
        if self.q_s is not None:
            out.append((self.q_s, self.qp_s))
        return out


@dataclass
class EncodedVideo:
    hp_v: Tensor
    h_v: Tensor
    mask: np.ndarray
    hp_s: Optional[Tensor] = None
    h_s: Optional[Tensor] = None
    extras: dict = field(default_factory=dict)

    def final_streams(self):
        return [self.h_v] if self.h_s is None else [self.h_v, self.h_s]

    def cross_streams(self):
        return [self.hp_v] if self.hp_s is None else [self.hp_v, self.hp_s]


def _as_batch(feats, mask, name):
    arr = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise DataError(f"{name} must be (length, dim) or (batch, length, dim)")
    if mask is None:
        mask = np.ones(arr.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if squeeze and mask.ndim == 1:
        mask = mask[None]
    if mask.shape != arr.shape[:2]:
        raise DataError(f"{name} mask shape {mask.shape} does not match features {arr.shape[:2]}")
    if not mask.any(axis=1).all():
        raise DomainError(f"{name}: every sequence needs at least one valid position")
    # zeroing padding keeps arbitrary padded values from reaching anything downstream
    feats = Tensor(np.where(mask[..., None], arr, 0.0))
    return feats, mask, squeeze


class QueryEncoder(Module):
    def __init__(self, cfg, rng):
        self.subtitle_enabled = cfg.subtitle_enabled
        self.proj = Linear(cfg.d_w, cfg.d, rng)
        self.pos = PositionalEmbedding(cfg.n_q_max, cfg.d, rng)
        self.drop = Dropout(cfg.dropout)
        self.blocks = [TransformerBlock(cfg.d, cfg.heads, cfg.d_ff, cfg.dropout, rng, cfg.ln_eps)
                       for _ in range(cfg.query_blocks)]
        self.pool_v = AdditivePool(cfg.d, rng)
        self.reproj_v = Linear(cfg.d, cfg.d, rng)
        if cfg.subtitle_enabled:
            self.pool_s = AdditivePool(cfg.d, rng)
            self.reproj_s = Linear(cfg.d, cfg.d, rng)

    def __call__(self, words, mask=None):
        """Return the contextual sequence and the modular query vectors."""
        x, mask, _ = _as_batch(words, mask, "query")
        if x.shape[1] == 0:
            raise DomainError("empty query")
        h = self.drop(self.pos(self.proj(x)))
        for block in self.blocks:
            h = block(h, mask)
        q_v = self.pool_v(h, mask)
        out = ModularQuery(q_v=q_v, qp_v=self.reproj_v(q_v))
        if self.subtitle_enabled:
            out.q_s = self.pool_s(h, mask)
            out.qp_s = self.reproj_s(out.q_s)
        return h, out, mask


class VideoEncoder(Module):
    def __init__(self, cfg, rng):
        self.subtitle_enabled = cfg.subtitle_enabled
        args = (cfg.d, cfg.heads, cfg.d_ff, cfg.dropout, rng, cfg.ln_eps)
        self.vis_proj = Linear(cfg.d_v, cfg.d, rng)
        self.vis_pos = PositionalEmbedding(cfg.n_v_max, cfg.d, rng)
        self.vis_self = TransformerBlock(*args)
        self.co_vs = CoAttentionBlock(*args)
        self.vis_final = TransformerBlock(*args)
        if cfg.subtitle_enabled:
            self.sub_proj = Linear(cfg.d_w, cfg.d, rng)
            self.sub_pos = PositionalEmbedding(cfg.n_v_max, cfg.d, rng)
            self.sub_self = TransformerBlock(*args)
            self.co_sv = CoAttentionBlock(*args)
            self.sub_final = TransformerBlock(*args)
        self.drop = Dropout(cfg.dropout)

    def __call__(self, vis, sub=None, mask=None):
        v, mask, _ = _as_batch(vis, mask, "video")
        v_tilde = self.vis_self(self.drop(self.vis_pos(self.vis_proj(v))), mask)
        if not self.subtitle_enabled:
            hp_v = self.co_vs(v_tilde, v_tilde, mask)
            return EncodedVideo(hp_v=hp_v, h_v=self.vis_final(hp_v, mask), mask=mask)
        if sub is None:
            raise DataError("model expects subtitle features but none were given")
        s, s_mask, _ = _as_batch(sub, mask, "subtitle")
        if s.shape[:2] != v.shape[:2]:
            raise DataError(f"subtitle length {s.shape[1]} does not match video length {v.shape[1]}")
        s_tilde = self.sub_self(self.drop(self.sub_pos(self.sub_proj(s))), mask)
        hp_v = self.co_vs(v_tilde, s_tilde, mask)
        hp_s = self.co_sv(s_tilde, v_tilde, mask)
        return EncodedVideo(hp_v=hp_v, h_v=self.vis_final(hp_v, mask), mask=mask,
                            hp_s=hp_s, h_s=self.sub_final(hp_s, mask))
