"""Command-line entry points: gen, label, train, eval, rank, bench.

Artifacts go to the paths given by flags; logs go to stderr. On failure the
last stderr line is a machine-readable JSON object with the error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .checkpoint import load_checkpoint
from .datastore import load_dataset, load_unlabeled_set, save_unlabeled_set
from .encoders import init_params
from .labeler import FileJudge, FrozenStreamScorer, MllmHttpJudge, ScoreFileScorer, label_dataset, oracle_judge_from_file
from .retrieval import evaluate, rank_images, save_ranked_lists
from .synth import BenchConfig, SynthConfig, generate, render_table, run_benchmark
from .trainer import train

log = logging.getLogger("rxf")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def cmd_gen(args: argparse.Namespace) -> int:
    doc = cfgmod.load_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["global_seed"] = args.seed
    if args.dataset_id is not None:
        doc["dataset_id"] = args.dataset_id
    cfg = cfgmod.synth_from_dict(doc)
    paths = generate(cfg, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2, sort_keys=True))
    return 0


def cmd_label(args: argparse.Namespace) -> int:
    ds = load_dataset(args.manifest)
    if args.scorer == "frozen":
        scorer = FrozenStreamScorer(args.text_stream, args.image_stream)
    else:
        if not args.score_file:
            raise ValueError("--scorer file requires --score-file")
        scorer = ScoreFileScorer(args.score_file)
    if args.judge == "oracle":
        if not args.truth:
            raise ValueError("--judge oracle requires --truth")
        judge = oracle_judge_from_file(args.truth, ds)
    elif args.judge == "file":
        if not args.verdicts:
            raise ValueError("--judge file requires --verdicts")
        judge = FileJudge(args.verdicts)
    else:
        if not (args.endpoint and args.model and args.instructions and args.image_root):
            raise ValueError("--judge mllm-http requires --endpoint, --model, --instructions, --image-root")
        judge = MllmHttpJudge(
            endpoint=args.endpoint,
            model=args.model,
            instructions=json.loads(Path(args.instructions).read_text()),
            image_root=args.image_root,
            timeout_s=args.timeout,
            max_retries=args.retries,
        )
    uset = label_dataset(ds, scorer, judge, n_cand=args.n_cand, cache_path=args.cache, jobs=args.jobs)
    save_unlabeled_set(uset, args.out)
    print(json.dumps({"pairs": len(uset.pairs), "out": str(args.out)}))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run = cfgmod.run_config_from_dict(cfgmod.load_json(args.config))
    train_cfg = run["train"]
    overrides = {}
    for name in ("seed", "epochs", "lr", "loss", "batch_size"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if overrides:
        train_cfg = dataclasses.replace(train_cfg, **overrides)
    data = run["data"]
    ds_train = load_dataset(data["train_manifest"])
    ds_val = load_dataset(data["val_manifest"])
    if data.get("unlabeled_set"):
        uset = load_unlabeled_set(data["unlabeled_set"])
    else:
        from .datastore import UnlabeledPositiveSet

        uset = UnlabeledPositiveSet(pairs=frozenset(), provenance="file", created_at="")
    out_dir = args.out or run["out_dir"]
    if out_dir is None:
        raise ValueError("no output directory: pass --out or set out_dir in the run config")
    pset, record = train(
        ds_train, ds_val, uset, run["image_encoder"], run["text_encoder"], train_cfg, out_dir=out_dir
    )
    print(json.dumps({"best_epoch": record.best_epoch, "best_val_recall": record.best_val_recall,
                      "out": str(out_dir)}))
    return 0


def _params_for_eval(args: argparse.Namespace, ds):
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    if args.init_seed is None:
        raise ValueError("pass --checkpoint or --init-seed")
    doc = cfgmod.load_json(args.config) if args.config else {}
    image_cfg = cfgmod.image_encoder_from_dict(doc.get("image_encoder", {}))
    text_cfg = cfgmod.text_encoder_from_dict(doc.get("text_encoder", {}))
    return init_params(image_cfg, text_cfg, dict(ds.manifest.stream_schema), seed=args.init_seed)


def cmd_eval(args: argparse.Namespace) -> int:
    ds = load_dataset(args.manifest)
    pset = _params_for_eval(args, ds)
    ranked = [] if args.ranked_out else None
    report = evaluate(pset, ds, _parse_ints(args.k), ranked_out=ranked)
    Path(args.out).write_text(report.to_json() + "\n")
    if args.ranked_out:
        save_ranked_lists(ranked, args.ranked_out)
    print(report.to_json())
    return 0


def cmd_rank(args: argparse.Namespace) -> int:
    ds = load_dataset(args.manifest)
    pset = load_checkpoint(args.checkpoint)
    ranked = rank_images(pset, ds, args.query)
    doc = {"query_id": ranked.query_id, "mode": ranked.mode, "image_ids": ranked.image_ids,
           "scores": ranked.scores}
    if args.out:
        save_ranked_lists([ranked], args.out)
    print(json.dumps(doc))
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    doc = cfgmod.load_json(args.config) if args.config else {}
    cfg = cfgmod.bench_from_dict(doc)
    overrides = {}
    if args.seeds:
        overrides["seeds"] = _parse_ints(args.seeds)
    if args.losses:
        overrides["loss_kinds"] = tuple(tok for tok in args.losses.split(",") if tok)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    results = run_benchmark(cfg, args.workdir)
    Path(args.out).write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    print(render_table(results))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rxf", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", help="synthetic config JSON")
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--dataset-id", help="override the dataset id")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("label", help="mine unlabeled positives with a judge")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="unlabeled-set JSONL path")
    p.add_argument("--judge", choices=("oracle", "file", "mllm-http"), required=True)
    p.add_argument("--truth", help="planted-truth JSON (oracle judge)")
    p.add_argument("--verdicts", help="verdict JSONL (file judge)")
    p.add_argument("--endpoint", help="chat-completions URL (mllm judge)")
    p.add_argument("--model", help="model name (mllm judge)")
    p.add_argument("--instructions", help="JSON of query_id -> instruction text (mllm judge)")
    p.add_argument("--image-root", help="directory of image files (mllm judge)")
    p.add_argument("--scorer", choices=("frozen", "file"), default="frozen")
    p.add_argument("--score-file", help="score JSONL for --scorer file")
    p.add_argument("--text-stream", default="t_orig")
    p.add_argument("--image-stream", default="v_M")
    p.add_argument("--n-cand", type=int, default=20)
    p.add_argument("--cache", help="verdict cache JSONL")
    p.add_argument("--jobs", type=int, default=1, help="max in-flight judge calls")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--retries", type=int, default=3)
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("train", help="train and keep the best validation checkpoint")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="recall@K over a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--init-seed", type=int, help="evaluate freshly initialized weights instead")
    p.add_argument("--config", help="encoder config JSON for --init-seed")
    p.add_argument("--k", default="5,10,20")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--ranked-out", help="also dump per-query rankings (JSONL)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("rank", help="rank one query's environment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--out", help="ranked-list JSONL path")
    p.set_defaults(fn=cmd_rank)

    p = sub.add_parser("bench", help="train several loss kinds on synthetic data and compare")
    p.add_argument("--config", help="bench config JSON")
    p.add_argument("--workdir", required=True)
    p.add_argument("--out", required=True, help="results JSON path")
    p.add_argument("--seeds", help="comma-separated seed list override")
    p.add_argument("--losses", help="comma-separated loss kinds override")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except Exception as err:  # surface a machine-readable last line
        log.error("%s", err)
        print(json.dumps({"error": str(err), "type": type(err).__name__}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
