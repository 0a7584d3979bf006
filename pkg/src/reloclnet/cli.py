"""Command-line entry point: ``reloclnet <subcommand> [options]``."""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import (SyntheticSpec, generate_synthetic_corpus, load_corpus, read_features, save_corpus,
                   spec_from_dict)
from .encoders import ModelConfig
from .exceptions import ConfigError, DataError, ReLoCLNetError, TrainingAborted
from .retrieval import CorpusIndex, bench_retrieval, build_corpus_index, encode_queries, vcmr_rank
from .training import ABLATIONS, RunConfig, evaluate, load_run_config, loss_gradient_check, model_config_for, train
from .validation import check_corpus, check_query_list

logger = logging.getLogger("reloclnet")


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")


def _load_split(path, split):
    corpus = load_corpus(path)
    if split:
        if split not in corpus.splits:
            raise DataError(f"split {split!r} not in {sorted(corpus.splits)}")
        corpus = corpus.subset(split)
    return corpus


def _retrieval_args(p):
    p.add_argument("--k", type=int, default=None, help="videos kept by the retrieval stage")
    p.add_argument("--top-n", type=int, default=None, help="spans kept per video")
    p.add_argument("--l-max", type=int, default=None, help="span length cap in clip units; 0 disables")
    p.add_argument("--gamma", type=float, default=None)


def _retrieval_params(args, cfg):
    l_max = cfg.l_max if args.l_max is None else (None if args.l_max == 0 else args.l_max)
    return dict(k=cfg.top_k if args.k is None else args.k,
                top_n=cfg.top_n if args.top_n is None else args.top_n,
                l_max=l_max, gamma=cfg.gamma if args.gamma is None else args.gamma)


def cmd_gen_data(args):
    spec = spec_from_dict(json.loads(Path(args.spec).read_text())) if args.spec else SyntheticSpec()
    overrides = {"seed": args.seed}
    if args.n_train is not None:
        overrides["n_train"] = args.n_train
    if args.n_val is not None:
        overrides["n_val"] = args.n_val
    if args.no_subtitles:
        overrides["subtitles"] = False
    corpus = generate_synthetic_corpus(replace(spec, **overrides))
    save_corpus(corpus, args.out)
    _write_json({"videos": len(corpus.videos), "queries": len(corpus.annotations),
                 "splits": {k: len(v) for k, v in corpus.splits.items()}}, None)


def cmd_train(args):
    corpus = check_corpus(load_corpus(args.data))
    if args.config:
        run = load_run_config(args.config)
    elif args.profile == "paper":
        run = RunConfig.paper()
    else:
        run = RunConfig()
    if args.variant:
        run = replace(run, gates=ABLATIONS[args.variant])
    if args.epochs is not None:
        run = replace(run, epochs=args.epochs)
    run = replace(run, seed=args.seed, model=model_config_for(corpus, run.model))
    try:
        result = train(run, corpus, log_path=args.log, checkpoint_path=args.out,
                       val_split=None if args.no_val else "val")
    except TrainingAborted as exc:
        print(f"training aborted: {exc}; last good checkpoint: {exc.checkpoint_path}", file=sys.stderr)
        return 3
    _write_json({"checkpoint": args.out, "best_epoch": result.best_epoch, "best_val_vcmr_r1_iou05": result.best_score,
                 "epochs_run": len(result.history), "steps": len(result.log)}, None)
    return 0


def cmd_encode_corpus(args):
    model, _, fp = checkpoint.load_model(args.checkpoint)
    corpus = _load_split(args.data, args.split)
    index = build_corpus_index(corpus.videos, model, fingerprint=fp)
    index.save(args.out)
    _write_json({"index": args.out, "videos": len(index), "streams": len(index.streams), "dim": index.dim}, None)


def cmd_retrieve(args):
    model, _, fp = checkpoint.load_model(args.checkpoint)
    index = CorpusIndex.load(args.index)
    index.check_fingerprint(fp)
    role, records = read_features(args.queries)
    if role != "query":
        raise DataError(f"{args.queries}: expected query features, found role {role!r}")
    ids = list(records)
    feats = check_query_list([records[q] for q in ids], model.config.d_w)
    params = _retrieval_params(args, model.config)
    out = open(args.out, "w", encoding="utf-8") if args.out not in (None, "-") else sys.stdout
    try:
        for qid, query in zip(ids, encode_queries(model, feats)):
            preds = vcmr_rank(model, query, index, params["k"], params["top_n"], params["l_max"], params["gamma"])
            out.write(json.dumps({"query_id": qid, "moments": [p.to_dict() for p in preds]}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_eval(args):
    model, _, fp = checkpoint.load_model(args.checkpoint)
    corpus = check_corpus(_load_split(args.data, args.split))
    index = None
    if args.index:
        index = CorpusIndex.load(args.index)
        index.check_fingerprint(fp)
    mu_grid = [float(x) for x in args.mu_grid.split(",")] if args.mu_grid else None
    report = evaluate(model, corpus, index=index, mu_grid=mu_grid, **_retrieval_params(args, model.config))
    _write_json(report.to_dict(), args.out)
    if args.curves:
        Path(args.curves).write_text(report.curves_csv(), encoding="utf-8")


def cmd_bench(args):
    if args.checkpoint:
        model, _, fp = checkpoint.load_model(args.checkpoint)
    else:
        from .model import ReLoCLNetModel

        model = ReLoCLNetModel(ModelConfig(seed=args.seed))
        fp = model.fingerprint()
    if args.data:
        corpus = load_corpus(args.data)
    else:
        corpus = generate_synthetic_corpus(SyntheticSpec(n_train=args.n_videos, n_val=0, seed=args.seed))
    words = [a.word_feats for a in corpus.annotations]
    rng = np.random.default_rng(args.seed)
    picks = rng.choice(len(words), size=min(args.n_queries, len(words)), replace=False)
    words = [words[i] for i in picks]
    index = build_corpus_index(corpus.videos, model, fingerprint=fp)
    params = _retrieval_params(args, model.config)
    modes = ["precomputed", "re-encode"] if args.mode == "both" else [args.mode]
    reports = {m: bench_retrieval(model, index, corpus.videos, words, mode=m, threads=args.threads, **params)
               for m in modes}
    out = {m: r.to_dict() for m, r in reports.items()}
    if len(reports) == 2:
        pre, re_ = reports["precomputed"], reports["re-encode"]
        out["speedup"] = re_.mean_seconds / pre.mean_seconds if pre.mean_seconds > 0 else float("inf")
        out["identical_results"] = pre.results == re_.results
    _write_json(out, args.out)


def cmd_grad_check(args):
    result = loss_gradient_check(seed=args.seed, h=args.h, max_elements=args.max_elements, order=args.order)
    ok = result.passed(args.tol)
    _write_json({"max_rel_error": result.max_rel_error, "checked": result.checked,
                 "excluded": len(result.excluded), "tolerance": args.tol, "passed": ok}, None)
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="reloclnet", description="Video corpus moment retrieval toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic corpus directory")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--no-subtitles", action="store_true")

    p = add("train", cmd_train, "train a model and write an RLCK checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="JSON file mirroring RunConfig")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--variant", choices=sorted(ABLATIONS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--log", help="JSON-lines training log")
    p.add_argument("--no-val", action="store_true", help="ignore the val split and keep the last epoch")

    p = add("encode-corpus", cmd_encode_corpus, "encode videos into an RLCI index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True)

    p = add("retrieve", cmd_retrieve, "rank moments for query features against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint the index was built with")
    p.add_argument("--queries", required=True, help="RLCF file with query word features")
    p.add_argument("--out", default="-")
    _retrieval_args(p)

    p = add("eval", cmd_eval, "write an EvalReport as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--index")
    p.add_argument("--mu-grid", help="comma separated IoU thresholds for the curves")
    p.add_argument("--curves", help="CSV path for recall-vs-IoU curves")
    p.add_argument("--out", default="-")
    _retrieval_args(p)

    p = add("bench", cmd_bench, "time precomputed-index against per-query re-encoding")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--n-videos", type=int, default=500)
    p.add_argument("--n-queries", type=int, default=100)
    p.add_argument("--mode", choices=("precomputed", "re-encode", "both"), default="both")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="-")
    _retrieval_args(p)

    p = add("grad-check", cmd_grad_check, "finite-difference check of the full training loss")
    p.add_argument("--h", type=float, default=1e-3)
    p.add_argument("--order", type=int, choices=(2, 4), default=4, help="central-difference stencil order")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-elements", type=int)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        code = args.func(args)
    except ReLoCLNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
