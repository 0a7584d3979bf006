"""Training loop with early stopping, evaluation, and the objective ablation grid."""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .data import collate, make_batches
from .encoders import ModelConfig
from .exceptions import ConfigError, NonFiniteError, TrainingAborted
from .metrics import MOMENT_KS, VR_KS, build_report
from .model import ReLoCLNetModel, check_gates
from .optim import AdamW
from .retrieval import build_corpus_index, encode_queries, localize_in_video, retrieve_videos, vcmr_rank

logger = logging.getLogger(__name__)

ABLATIONS = {
    "ReLoNet": (True, True, False, False),
    "ReLoNet+VideoCL": (True, True, True, False),
    "ReLoNet+FrameCL": (True, True, False, True),
    "ReLoCLNet": (True, True, True, True),
}

EARLY_STOP_KEY = "R@1,IoU=0.5"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    gates: tuple = (True, True, True, True)
    epochs: int = 200
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.01
    warmup_proportion: float = 0.01
    patience: int = 10
    min_epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.gates = check_gates(self.gates)
        if self.epochs < 1 or self.batch_size < 2 or self.patience < 1 or self.min_epochs < 0:
            raise ConfigError("epochs >= 1, batch_size >= 2, patience >= 1 and min_epochs >= 0 are required")

    @classmethod
    def paper(cls, **overrides):
        base = dict(model=ModelConfig.paper(), epochs=100, batch_size=128, lr=1e-4, min_epochs=0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def variant(cls, name, **overrides):
        if name not in ABLATIONS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(ABLATIONS)}")
        return cls(gates=ABLATIONS[name], **overrides)

    def to_dict(self):
        out = asdict(self)
        out["model"] = self.model.to_dict()
        out["gates"] = dict(zip(("vr", "ml", "video_cl", "frame_cl"), self.gates))
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        gates = data.get("gates")
        if isinstance(gates, dict):
            data["gates"] = tuple(bool(gates.get(k, False)) for k in ("vr", "ml", "video_cl", "frame_cl"))
        return cls(**data)


@dataclass
class TrainResult:
    model: ReLoCLNetModel
    history: list
    best_epoch: int
    best_score: float
    log: list = field(repr=False, default_factory=list)


def _count_batches(annotations, batch_size, seed, n_neg):
    return sum(1 for _ in make_batches(annotations, batch_size, seed, n_neg, epoch=0))


def train(run, corpus, log_path=None, checkpoint_path=None, train_split="train", val_split="val", on_epoch=None):
    """Train one model; the best-validation weights are restored before returning.

    One JSON line per optimisation step goes to ``log_path`` (and to
    ``TrainResult.log``). The early-stopping signal is validation VCMR
    Recall@1,IoU=0.5; epochs before ``run.min_epochs`` never count against
    the patience. Without a validation split the last epoch is kept.
    ``on_epoch(epoch, model)`` is called after every epoch, in eval mode;
    a truthy return value ends training after that epoch.
    """
    cfg = replace(run.model, seed=run.seed)
    train_c = corpus.subset(train_split) if train_split in corpus.splits else corpus
    val_c = corpus.subset(val_split) if val_split in corpus.splits and corpus.splits[val_split] else None
    anns = train_c.annotations
    if len(anns) < 2:
        raise ConfigError("training needs at least two annotations")

    model = ReLoCLNetModel(cfg)
    per_epoch = max(1, _count_batches(anns, run.batch_size, run.seed, cfg.n_neg))
    opt = AdamW(model.named_parameters(), lr=run.lr, weight_decay=run.weight_decay,
                warmup_proportion=run.warmup_proportion, total_steps=per_epoch * run.epochs)

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    lines, history = [], []
    best_score, best_epoch, best_state, stale = -1.0, 0, model.state_dict(), 0
    step = 0
    try:
        with threadpool_limits(limits=1):
            for epoch in range(run.epochs):
                model.train()
                for batch in make_batches(anns, run.batch_size, run.seed, cfg.n_neg, epoch):
                    arrays = collate(train_c, anns, batch)
                    try:
                        report = model.losses(arrays, run.gates)
                        opt.zero_grad()
                        report.total.backward()
                    except NonFiniteError as exc:
                        if checkpoint_path:
                            model.load_state_dict(best_state)
                            checkpoint.save_model(model, checkpoint_path, {"run": run.to_dict()})
                        raise TrainingAborted(f"epoch {epoch} step {step}: {exc}", checkpoint_path) from exc
                    opt.step()
                    step += 1
                    row = {"epoch": epoch, "step": step, "lr": opt.state.lr_at(opt.state.step)}
                    row.update(report.to_dict())
                    line = json.dumps(row, sort_keys=True)
                    lines.append(line)
                    if log_fh:
                        log_fh.write(line + "\n")

                stop = False
                if on_epoch is not None:
                    model.eval()
                    stop = bool(on_epoch(epoch, model))
                if val_c is None:
                    best_state, best_epoch = model.state_dict(), epoch
                    history.append({"epoch": epoch})
                    if stop:
                        break
                    continue
                score = evaluate(model, val_c).vcmr[EARLY_STOP_KEY]
                history.append({"epoch": epoch, "val_vcmr_r1_iou05": score})
                logger.info("epoch %d val VCMR %s = %.4f", epoch, EARLY_STOP_KEY, score)
                if score > best_score:
                    best_score, best_epoch, best_state, stale = score, epoch, model.state_dict(), 0
                elif epoch >= run.min_epochs:
                    stale += 1
                    if stale >= run.patience:
                        break
                if stop:
                    break
    finally:
        if log_fh:
            log_fh.close()

    model.load_state_dict(best_state)
    model.eval()
    if checkpoint_path:
        checkpoint.save_model(model, checkpoint_path, {"run": run.to_dict()})
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_score=best_score, log=lines)


def predict_corpus(model, corpus, index=None, k=None, top_n=None, l_max="config", gamma=None):
    """Rankings and span predictions for every annotation of ``corpus``."""
    cfg = model.config
    k = cfg.top_k if k is None else k
    top_n = cfg.top_n if top_n is None else top_n
    l_max = cfg.l_max if l_max == "config" else l_max
    gamma = cfg.gamma if gamma is None else gamma
    if index is None:
        index = build_corpus_index(corpus.videos, model)
    anns = corpus.annotations
    queries = encode_queries(model, [a.word_feats for a in anns])
    pos = {vid: j for j, vid in enumerate(index.ids)}
    vr, svmr, vcmr = {}, {}, {}
    for ann, query in zip(anns, queries):
        vr[ann.query_id] = [vid for vid, _ in retrieve_videos(query, index, max(VR_KS))]
        preds = vcmr_rank(model, query, index, k, top_n, l_max, gamma)
        vcmr[ann.query_id] = [(p.video_id, p.span) for p in preds]
        spans = localize_in_video(model, query, index.entry(pos[ann.video_id]), max(MOMENT_KS), l_max)
        svmr[ann.query_id] = [(ann.video_id, span) for span, _ in spans]
    return vr, svmr, vcmr


def evaluate(model, corpus, index=None, mu_grid=None, **retrieval):
    """Full :class:`EvalReport` for the annotations of ``corpus``."""
    vr, svmr, vcmr = predict_corpus(model, corpus, index=index, **retrieval)
    gold = {a.query_id: (a.video_id, a.span) for a in corpus.annotations}
    return build_report(vr, svmr, vcmr, gold, mu_grid)


def run_ablation(corpus, seeds=(0, 1, 2), variants=tuple(ABLATIONS), metric=("VCMR", "R@10,IoU=0.5"), **run_kwargs):
    """Train every variant for every seed; returns ``{variant: [score per seed]}``."""
    table, key = {}, metric[1]
    for name in variants:
        scores = []
        for seed in seeds:
            result = train(RunConfig.variant(name, seed=seed, **run_kwargs), corpus)
            report = evaluate(result.model, corpus.subset("val"))
            scores.append((report.vcmr if metric[0] == "VCMR" else report.svmr)[key])
        table[name] = scores
    return table


def load_run_config(path):
    return RunConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def model_config_for(corpus, base):
    """Adapt feature dims and subtitle use to a corpus."""
    rec = next(iter(corpus.videos.values()))
    ann = corpus.annotations[0]
    n_v_max = max(base.n_v_max, max(r.n_v for r in corpus.videos.values()))
    n_q_max = max(base.n_q_max, max(a.n_q for a in corpus.annotations))
    return replace(base, d_v=rec.vis_feats.shape[1], d_w=ann.word_feats.shape[1],
                   subtitle_enabled=base.subtitle_enabled and rec.sub_feats is not None,
                   n_v_max=n_v_max, n_q_max=n_q_max)


def seeds_mean(values):
    return float(np.mean(values)) if values else 0.0


def gradient_check_config(seed=0):
    """Small model plus a 2-video, 4-query batch for the full-loss gradient check."""
    from .data import SyntheticSpec, generate_synthetic_corpus

    spec = SyntheticSpec(n_train=2, n_val=0, n_v_range=(6, 8), n_q_range=(3, 5), d_v=6, d_w=5, latent_dim=4,
                         moments_per_video=(2, 2), span_fraction=(0.2, 0.5), seed=seed)
    corpus = generate_synthetic_corpus(spec)
    cfg = ModelConfig(d_v=6, d_w=5, d=4, heads=2, n_v_max=8, n_q_max=5, dropout=0.0, query_blocks=1, seed=seed)
    anns = corpus.annotations[:4]
    vids = [a.video_id for a in anns]
    neg_sets = [np.array([j for j in range(4) if vids[j] != vids[i]]) for i in range(4)]
    from .data import TrainingBatch

    batch = collate(corpus, anns, TrainingBatch(np.arange(4), neg_sets, vids))
    return cfg, batch


def loss_gradient_check(seed=0, gates=(True, True, True, True), h=1e-3, max_elements=None, order=4):
    """Gradient check of the weighted total loss with respect to every parameter.

    Dropout is off (eval mode) so the loss is a deterministic function of
    the weights.
    """
    from .gradcheck import gradient_check

    cfg, batch = gradient_check_config(seed)
    model = ReLoCLNetModel(cfg)
    model.eval()
    params = [p for _, p in model.named_parameters()]
    return gradient_check(lambda: model.losses(batch, gates).total, params, h=h, max_elements=max_elements,
                          rng=np.random.default_rng(seed), order=order)
