"""The full network: encoders, boundary predictor and contrastive heads."""

import numpy as np

from . import objectives as O
from .encoders import ModelConfig, QueryEncoder, VideoEncoder
from .exceptions import ConfigError
from .nn import BoundaryPredictor, Dropout, Module

GATE_NAMES = ("vr", "ml", "video_cl", "frame_cl")


def check_gates(gates):
    gates = tuple(bool(g) for g in gates)
    if len(gates) != 4:
        raise ConfigError("gates must list four flags (vr, ml, video_cl, frame_cl)")
    if not (gates[0] or gates[1]):
        raise ConfigError("at least one of the VR and ML objectives must be enabled")
    return gates


class ReLoCLNetModel(Module):
    def __init__(self, config=None):
        config = config or ModelConfig()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.query_encoder = QueryEncoder(config, rng)
        self.video_encoder = VideoEncoder(config, rng)
        self.predictor = BoundaryPredictor(config.conv_width, rng)
        self.heads = O.ContrastiveHeads(config.d, rng, config.subtitle_enabled)
        self.set_dropout_seed(config.seed)

    def set_dropout_seed(self, seed):
        rng = np.random.default_rng([int(seed), 1])
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def encode_query(self, words, mask=None):
        _, query, _ = self.query_encoder(words, mask)
        return query

    def encode_video(self, vis, sub=None, mask=None):
        return self.video_encoder(vis, sub if self.config.subtitle_enabled else None, mask)

    def losses(self, batch, gates=(True, True, True, True)):
        """Forward a collated batch and return the :class:`LossReport`.

        ``batch`` holds words, q_mask, vis, sub, v_mask, spans, neg_sets and
        video_ids (see :func:`reloclnet.data.collate`).
        """
        gates = check_gates(gates)
        cfg = self.config
        query = self.encode_query(batch["words"], batch["q_mask"])
        video = self.encode_video(batch["vis"], batch.get("sub"), batch["v_mask"])
        report = O.LossReport()
        if gates[0]:
            phi = O.vr_similarity_matrix(query, video)
            report.vr = O.vr_loss(phi, batch["neg_sets"], cfg.margin)
        if gates[1]:
            scores = O.ml_scores(query, video)
            start, end = self.predictor(scores, video.mask)
            report.ml = O.ml_loss(start, end, batch["spans"], video.mask)
        if gates[2]:
            report.video_cl = O.video_cl_loss(query, video, self.heads, batch["video_ids"])
        if gates[3]:
            report.frame_cl = O.frame_cl_loss(query, video, batch["spans"], self.heads, cfg.frame_cl_source)
        O.total_loss(report, cfg.lambdas)
        return report

    def named_parameters_as_arrays(self):
        return [(name, p.data) for name, p in self.named_parameters()]

    def fingerprint(self):
        """SHA-256 of the serialised checkpoint for the current weights."""
        from .checkpoint import fingerprint, model_bytes

        return fingerprint(model_bytes(self))
