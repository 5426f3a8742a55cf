"""Command-line entry point.

Subcommands: gen-data, train, sample, eval, compare. Every command is
deterministic given --seed, reads nothing from environment variables, and
writes a run manifest (resolved config plus content hashes of its file
inputs) next to its outputs. Exit codes: 0 success, 1 usage error,
2 data/IO error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from typing import Optional

import numpy as np

from . import constfit as C
from . import d3pm as D
from . import metrics as M
from . import vocab as V
from .backbone import MODE_AR, MODE_DIFFUSION, BackboneConfig
from .checkpoint import load_checkpoint
from .config import RunConfig, apply_overrides, load_config
from .dataset import build_dataset, load_split
from .errors import DataError, SymregError, UsageError
from .generate import make_generator, schedule_from_meta
from .metrics import EvalReport, compare_reports, evaluate_records, format_comparison
from .training import train_ar, train_diffusion
from .vocab import Vocabulary

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_manifest(out_dir, command: str, cfg: RunConfig, inputs, outputs) -> None:
    # Outputs are recorded relative to the run directory so reruns into
    # different directories stay byte-identical.
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "inputs": {str(p): _sha256_file(p) for p in inputs},
        "outputs": sorted(os.path.relpath(str(o), str(out_dir)) for o in outputs),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _floats_pair(text: str):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 2:
        raise UsageError(f"expected lo,hi pair, got {text!r}")
    return tuple(parts)


def _load_run_config(args, overrides: dict) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    cfg = apply_overrides(cfg, overrides)
    if cfg.threads:
        import torch
        torch.set_num_threads(cfg.threads)
    return cfg


# --- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    overrides = {
        "dataset.n_samples": args.n,
        "dataset.n_points": args.points,
        "dataset.max_depth": args.max_depth,
        "dataset.max_len": args.max_len,
        "dataset.split": [float(x) for x in args.split.split(",")] if args.split else None,
        "dataset.x_range": list(_floats_pair(args.x_range)) if args.x_range else None,
        "dataset.const_range": list(_floats_pair(args.const_range)) if args.const_range else None,
    }
    cfg = _load_run_config(args, overrides)
    cfg.dataset.seed = cfg.seed
    vocab = Vocabulary.default()
    manifest = build_dataset(cfg.dataset, args.out, vocab)
    inputs = [args.config] if args.config else []
    outputs = [os.path.join(args.out, f"{n}.jsonl") for n in ("train", "test", "validate")]
    _write_run_manifest(args.out, "gen-data", cfg, inputs, outputs)
    print(f"wrote {manifest['counts']} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {
        "model.embed_dim": args.embed_dim,
        "model.num_heads": args.heads,
        "model.num_layers": args.layers,
        "model.ff_dim": args.ff_dim,
        "model.dropout": args.dropout,
        "schedule.num_steps": args.num_steps,
        "schedule.beta_min": args.beta_min,
        "schedule.beta_max": args.beta_max,
        "training.batch_size": args.batch_size,
        "training.learning_rate": args.lr,
        "training.max_epochs": args.epochs,
        "training.lambda_ce": getattr(args, "lambda_ce", None),
    }
    cfg = _load_run_config(args, overrides)
    cfg.training.seed = cfg.seed
    vocab = Vocabulary.default()
    train_split = load_split(args.data, "train", vocab)
    val_name = args.val_split
    val_split = load_split(args.data, val_name, vocab)
    if len(val_split) == 0:
        raise DataError(f"validation split {val_name!r} in {args.data} is empty")
    max_len = train_split.tokens.shape[1]
    mode = MODE_DIFFUSION if args.mode == "diffusion" else MODE_AR
    model_cfg = BackboneConfig(
        embed_dim=cfg.model.embed_dim,
        num_heads=cfg.model.num_heads,
        num_layers=cfg.model.num_layers,
        ff_dim=cfg.model.ff_dim,
        dropout=cfg.model.dropout,
        max_len=max_len,
        vocab_size=vocab.size,
        mode=mode,
        num_steps=cfg.schedule.num_steps if mode == MODE_DIFFUSION else None,
    )
    log = print if not args.quiet else None
    tag = args.tag or args.mode
    if mode == MODE_DIFFUSION:
        schedule = D.NoiseSchedule.cosine(
            vocab.size, num_steps=cfg.schedule.num_steps,
            beta_min=cfg.schedule.beta_min, beta_max=cfg.schedule.beta_max)
        result = train_diffusion(train_split, val_split, model_cfg, schedule,
                                 cfg.training, vocab, args.out, tag=tag, log=log)
    else:
        result = train_ar(train_split, val_split, model_cfg, cfg.training, vocab,
                          args.out, tag=tag, log=log)
    inputs = [p for p in (args.config,) if p]
    inputs += [os.path.join(args.data, f"{n}.jsonl") for n in ("train", val_name)]
    inputs += [os.path.join(args.data, "vocab.json")]
    _write_run_manifest(args.out, "train", cfg, inputs,
                        [result.checkpoint_path, result.curve_path])
    print(f"best validation loss {result.best_val_loss:.6f} after "
          f"{result.epochs_run} epochs -> {result.checkpoint_path}")
    return EXIT_OK


def _read_points_file(path, expect_triples=True) -> list:
    """CSV with x1,x2,y header -> one problem; JSONL records -> many."""
    problems = []
    if str(path).endswith(".csv"):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"{path}: no data rows")
        try:
            pts = np.array([[float(r["x1"]), float(r["x2"]), float(r["y"])] for r in rows])
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: expected x1,x2,y columns: {exc}") from exc
        problems.append(pts)
    else:
        with open(path, encoding="utf-8") as fh:
            for ln, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    pts = np.asarray(rec["points"], dtype=np.float64)
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise DataError(f"{path}:{ln}: bad record: {exc}") from exc
                if pts.ndim != 2 or pts.shape[1] != 3:
                    raise DataError(f"{path}:{ln}: points must be Nx3")
                problems.append(pts)
    return problems


def _substitute_constants(expr: str, constants) -> str:
    out = []
    it = iter(constants)
    for word in expr.split():
        out.append(f"{next(it):.6g}" if word == "C" else word)
    return " ".join(out)


def cmd_sample(args) -> int:
    cfg = _load_run_config(args, {
        "fitting.de_iterations": args.de_iterations,
        "eval.num_steps": args.num_steps,
    })
    model, header = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.from_json_obj(header["vocab"])
    inputs = [args.checkpoint] + ([args.config] if args.config else [])
    if args.input:
        problems = _read_points_file(args.input)
        inputs.append(args.input)
    elif args.data:
        split = load_split(args.data, args.split, vocab)
        limit = args.limit or len(split)
        problems = [split.points[i] for i in range(min(limit, len(split)))]
        inputs.append(os.path.join(args.data, f"{args.split}.jsonl"))
    else:
        raise UsageError("need --input FILE or --data DIR")
    schedule = None
    if model.config.mode == MODE_DIFFUSION:
        schedule = schedule_from_meta(header.get("meta", {}), vocab.size,
                                      model.config.num_steps)
    generate = make_generator(model, vocab, seed=cfg.seed,
                              num_steps=cfg.eval.num_steps, schedule=schedule)
    results = []
    for i, pts in enumerate(problems):
        tokens = generate(pts[None, :, :])[0]
        expr = V.detokenize(tokens, vocab)
        rec = {"expr": expr, "valid": bool(V.validate_rpn(tokens, vocab).valid)}
        if rec["valid"]:
            problem = C.FitProblem(tokens, pts, vocab,
                                   bounds=(cfg.fitting.bound_lo, cfg.fitting.bound_hi))
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, i])))
            fit = C.fit_constants(problem, rng, de_iterations=cfg.fitting.de_iterations,
                                  lbfgs_max_iters=cfg.fitting.lbfgs_max_iters)
            rec["constants"] = [float(c) for c in fit.constants]
            rec["sse"] = fit.sse
            rec["expr_fitted"] = _substitute_constants(expr, fit.constants)
        results.append(rec)
        print(json.dumps(rec))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        out_path = os.path.join(args.out, "expressions.jsonl")
        with open(out_path, "w", encoding="utf-8") as fh:
            for rec in results:
                fh.write(json.dumps(rec) + "\n")
        _write_run_manifest(args.out, "sample", cfg, inputs, [out_path])
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_run_config(args, {
        "fitting.de_iterations": args.de_iterations,
        "eval.num_steps": args.num_steps,
        "eval.limit": args.limit,
    })
    model, header = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.from_json_obj(header["vocab"])
    split = load_split(args.data, args.split, vocab)
    schedule = None
    if model.config.mode == MODE_DIFFUSION:
        schedule = schedule_from_meta(header.get("meta", {}), vocab.size,
                                      model.config.num_steps)
    generate = make_generator(model, vocab, seed=cfg.seed,
                              num_steps=cfg.eval.num_steps, schedule=schedule)
    tag = args.tag or header["meta"].get("mode", model.config.mode)
    report = evaluate_records(
        split, generate, vocab, seed=cfg.seed, tag=tag,
        bounds=(cfg.fitting.bound_lo, cfg.fitting.bound_hi),
        de_iterations=cfg.fitting.de_iterations,
        generation_batch=cfg.eval.generation_batch,
        limit=cfg.eval.limit,
        log=None if args.quiet else print,
    )
    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, "report.json")
    csv_path = os.path.join(args.out, "samples.csv")
    report.save(json_path, csv_path)
    inputs = [args.checkpoint, os.path.join(args.data, f"{args.split}.jsonl"),
              os.path.join(args.data, "vocab.json")]
    if args.config:
        inputs.append(args.config)
    _write_run_manifest(args.out, "eval", cfg, inputs, [json_path, csv_path])
    print(json.dumps(report.aggregates(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    ra = EvalReport.load(args.report_a)
    rb = EvalReport.load(args.report_b)
    cmp = compare_reports(ra, rb)
    print(format_comparison(cmp))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        cfg = _load_run_config(args, {})
        out_path = os.path.join(args.out, "comparison.json")
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(cmp, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_run_manifest(args.out, "compare", cfg,
                            [args.report_a, args.report_b], [out_path])
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="cap torch worker threads")


def build_parser() -> _Parser:
    parser = _Parser(prog="symreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None, help="total samples")
    p.add_argument("--points", type=int, default=None, help="points per sample")
    p.add_argument("--split", default=None, help="train,test,validate fractions")
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--x-range", default=None, help="lo,hi")
    p.add_argument("--const-range", default=None, help="lo,hi")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _add_common(p)
    p.add_argument("--mode", choices=["diffusion", "ar"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-split", default="validate", choices=["train", "test", "validate"])
    p.add_argument("--tag", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--ff-dim", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--num-steps", type=int, default=None, help="diffusion steps T")
    p.add_argument("--beta-min", type=float, default=None)
    p.add_argument("--beta-max", type=float, default=None)
    p.add_argument("--lambda", dest="lambda_ce", type=float, default=None,
                   help="cross-entropy weight in the hybrid loss")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate expressions from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", default=None, help="CSV (x1,x2,y) or JSONL points file")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--split", default="validate")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--num-steps", type=int, default=None, help="reverse steps at sampling")
    p.add_argument("--de-iterations", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="validate")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--num-steps", type=int, default=None)
    p.add_argument("--de-iterations", type=int, default=None)
    p.add_argument("--tag", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="compare two evaluation reports")
    _add_common(p)
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SymregError as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
