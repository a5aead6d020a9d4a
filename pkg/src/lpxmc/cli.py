"""Command-line entry point.

Subcommands: train, quantsweep, memest, memsweep, histprobe, gen-synth,
eval.  Every run writes a manifest (resolved config + seed + version) into
the output directory so it can be reproduced exactly.  Exit codes: 0 ok,
2 configuration error, 1 runtime failure.

The default output directory is taken from $LPXMC_OUTDIR (falling back to
the current directory).  A config file of key=value lines can pre-set any
flag; explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .data import SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .head import load_head
from .memory import GIB, Recipe, TrainingShape, plan, sweep_labels
from .metrics import (dataset_precision_at_k, dataset_psp_at_k,
                      metrics_report, propensity_from_frequencies)
from .trainer import TrainConfig, Trainer, quant_sweep, train

__all__ = ["main", "run"]


class ConfigError(ValueError):
    pass


def _outdir(args) -> str:
    out = args.out or os.environ.get("LPXMC_OUTDIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(outdir: str, command: str, resolved: dict):
    manifest = {"command": command, "version": __version__, "config": resolved}
    with open(os.path.join(outdir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)


def _apply_config_file(argv: list[str], parser) -> list[str]:
    """Prepend key=value pairs from --config as defaults (flags override)."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    try:
        path = argv[i + 1]
    except IndexError:
        raise ConfigError("--config requires a file path")
    pre = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"config file line not key=value: {line!r}")
            k, v = line.split("=", 1)
            pre += [f"--{k.strip().replace('_', '-')}", v.strip()]
    rest = argv[:i] + argv[i + 2:]
    return [rest[0]] + pre + rest[1:]


def _train_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="dataset file (sparse text format)")
    p.add_argument("--head-format", default="fp32", help="weight grid, e.g. fp32/bf16/e4m3/eXmY")
    p.add_argument("--encoder-format", default="fp32", help="encoder parameter grid")
    p.add_argument("--head-lr", type=float, default=0.1, help="classifier learning rate")
    p.add_argument("--encoder-lr", type=float, default=1e-3, help="encoder learning rate")
    p.add_argument("--head-weight-decay", type=float, default=0.0, help="classifier weight decay")
    p.add_argument("--encoder-weight-decay", type=float, default=0.01, help="encoder weight decay")
    p.add_argument("--head-rounding", default="stochastic",
                   choices=["stochastic", "nearest"], help="weight-update rounding mode")
    p.add_argument("--warmup", type=int, default=0, help="linear warmup length (steps)")
    p.add_argument("--epochs", type=int, default=10, help="training epochs")
    p.add_argument("--batch-size", type=int, default=32, help="samples per step")
    p.add_argument("--chunks", type=int, default=1, help="label chunks k")
    p.add_argument("--dropout", type=float, default=0.0, help="weight dropout probability in [0,1)")
    p.add_argument("--hidden", type=int, default=64, help="encoder hidden width")
    p.add_argument("--embed-dim", type=int, default=32, help="embedding dimension m")
    p.add_argument("--seed", type=int, default=0, help="global seed")
    p.add_argument("--config", help="key=value config file; flags override")


def _cfg_from_args(args) -> TrainConfig:
    return TrainConfig(
        hidden=args.hidden, embed_dim=args.embed_dim,
        head_format=args.head_format, encoder_format=args.encoder_format,
        head_lr=args.head_lr, encoder_lr=args.encoder_lr,
        head_weight_decay=args.head_weight_decay,
        encoder_weight_decay=args.encoder_weight_decay,
        head_rounding=args.head_rounding, warmup_steps=args.warmup,
        epochs=args.epochs, batch_size=args.batch_size, chunks=args.chunks,
        dropout_p=args.dropout, seed=args.seed)


def _cmd_train(args) -> int:
    outdir = _outdir(args)
    cfg = _cfg_from_args(args)
    dataset = load_dataset(args.data)
    trainer = Trainer(dataset, cfg)
    with open(os.path.join(outdir, "history.jsonl"), "w") as hist:
        for _ in range(cfg.epochs):
            record = trainer.run_epoch()
            hist.write(json.dumps(record) + "\n")
    trainer.save(os.path.join(outdir, "checkpoint"))
    _write_manifest(outdir, "train", {**asdict(cfg), "data": args.data})
    final = trainer.history[-1] if trainer.history else {}
    print(json.dumps(final))
    return 0


def _cmd_eval(args) -> int:
    outdir = _outdir(args)
    dataset = load_dataset(args.data)
    trainer = Trainer.load(args.checkpoint, dataset)
    idx = np.arange(dataset.num_samples)
    scores = trainer.predict_scores(idx)
    truths = [dataset.labels[i] for i in idx]
    prop = propensity_from_frequencies(dataset.label_counts(),
                                       dataset.num_samples,
                                       a=args.prop_a, b=args.prop_b)
    records = []
    for k in args.k:
        if k > dataset.num_labels:
            continue
        records.append({"metric": "P", "k": k,
                        "value": dataset_precision_at_k(scores, truths, k)})
        records.append({"metric": "PSP", "k": k,
                        "value": dataset_psp_at_k(scores, truths, prop, k,
                                                  normalized=args.normalized)})
    with open(os.path.join(outdir, "metrics.json"), "w") as f:
        f.write(metrics_report(records, as_json=True) + "\n")
    _write_manifest(outdir, "eval", vars(args))
    print(metrics_report(records, as_json=False))
    return 0


def _cmd_quantsweep(args) -> int:
    outdir = _outdir(args)
    cfg = _cfg_from_args(args)
    dataset = load_dataset(args.data)
    formats = [f.strip() for f in args.formats.split(",") if f.strip()]
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    rows = quant_sweep(dataset, cfg, formats, modes)
    path = os.path.join(outdir, "quantsweep.csv")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["format", "rounding", "p_at_1", "diverged"])
        w.writeheader()
        w.writerows(rows)
    _write_manifest(outdir, "quantsweep", {**asdict(cfg), "formats": formats,
                                           "modes": modes, "data": args.data})
    for r in rows:
        print(f"{r['format']:>8} {r['rounding']:>10}  P@1={r['p_at_1']:.4f}"
              + ("  DIVERGED" if r["diverged"] else ""))
    return 0


def _cmd_memest(args) -> int:
    if args.labels <= 0:
        raise ConfigError("labels must be positive")
    outdir = _outdir(args)
    shape = TrainingShape(args.labels, args.dim, args.batch, args.seq,
                          args.chunks, args.encoder_params)
    p = plan(shape, Recipe.parse(args.recipe))
    summary = {"recipe": p.recipe.value, "peak_gib": round(p.peak_gib, 4)}
    with open(os.path.join(outdir, "memest.json"), "w") as f:
        json.dump(summary, f, indent=2)
    with open(os.path.join(outdir, "memest.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["phase", "allocation", "bytes", "live_total"])
        w.writerows(p.timeline_rows())
    _write_manifest(outdir, "memest", vars(args))
    print(json.dumps(summary))
    return 0


def _cmd_memsweep(args) -> int:
    outdir = _outdir(args)
    labels = [int(x) for x in args.labels.split(",")]
    if any(l <= 0 for l in labels):
        raise ConfigError("labels must be positive")
    recipes = [Recipe.parse(r) for r in args.recipes.split(",")]
    shape = TrainingShape(labels[0], args.dim, args.batch, args.seq,
                          args.chunks, args.encoder_params)
    rows = sweep_labels(shape, labels, recipes)
    path = os.path.join(outdir, "memsweep.csv")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["num_labels", "recipe",
                                          "peak_bytes", "peak_gib"])
        w.writeheader()
        w.writerows(rows)
    _write_manifest(outdir, "memsweep", vars(args))
    for r in rows:
        print(f"L={r['num_labels']:>10,d} {r['recipe']:>10}  "
              f"peak={r['peak_gib']:.2f} GiB")
    return 0


def _cmd_histprobe(args) -> int:
    outdir = _outdir(args)
    cfg = _cfg_from_args(args)
    dataset = load_dataset(args.data)
    steps = [int(s) for s in args.steps.split(",")]
    result = train(dataset, cfg, probe_steps=steps)
    out = {}
    for step, fams in result.histograms.items():
        out[str(step)] = {
            fam: {"underflow": h.underflow_fraction,
                  "in_range": h.in_range_fraction,
                  "overflow": h.overflow_fraction,
                  "zero_count": h.zero_count,
                  "all_zero": h.all_zero,
                  "counts": {str(k): v for k, v in h.counts.items()}}
            for fam, h in fams.items()}
    with open(os.path.join(outdir, "histograms.json"), "w") as f:
        json.dump(out, f, indent=2)
    _write_manifest(outdir, "histprobe", {**asdict(cfg), "steps": steps,
                                          "data": args.data})
    print(json.dumps({s: {f: v["in_range"] for f, v in fams.items()}
                      for s, fams in out.items()}))
    return 0


def _cmd_gen_synth(args) -> int:
    outdir = _outdir(args)
    spec = SyntheticSpec(args.samples, args.features, args.labels,
                         mean_labels=args.mean_labels, zipf_exponent=args.zipf,
                         noise=args.noise, min_labels=args.min_labels,
                         seed=args.seed)
    ds = generate_synthetic(spec)
    path = args.file or os.path.join(outdir, "synthetic.txt")
    save_dataset(ds, path)
    _write_manifest(outdir, "gen-synth", vars(args))
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lpxmc",
        description="Low-precision training tools for extreme classifiers.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a sparse dataset")
    _train_flags(p)
    p.add_argument("--out", help="output directory (default $LPXMC_OUTDIR)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (P@k, PSP@k)")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--k", type=int, nargs="+", default=[1, 3, 5], help="cutoffs")
    p.add_argument("--prop-a", type=float, default=0.55, help="propensity A")
    p.add_argument("--prop-b", type=float, default=1.5, help="propensity B")
    p.add_argument("--normalized", action="store_true",
                   help="normalize PSP by the best achievable score")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("quantsweep", help="P@1 per (format, rounding) cell")
    _train_flags(p)
    p.add_argument("--formats", required=True,
                   help="comma list of formats, e.g. e2m2,e3m2,e4m3,fp32")
    p.add_argument("--modes", default="nearest,stochastic",
                   help="comma list of rounding modes")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_quantsweep)

    p = sub.add_parser("memest", help="analytic peak-memory estimate")
    p.add_argument("--labels", type=int, required=True, help="label count L")
    p.add_argument("--dim", type=int, default=768, help="embedding dimension")
    p.add_argument("--batch", type=int, default=128, help="batch size")
    p.add_argument("--seq", type=int, default=128, help="sequence length")
    p.add_argument("--chunks", type=int, default=8, help="label chunks k")
    p.add_argument("--encoder-params", type=int, default=110_000_000,
                   help="encoder parameter count")
    p.add_argument("--recipe", required=True,
                   help="renee | elmo_bf16 | elmo_fp8")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_memest)

    p = sub.add_parser("memsweep", help="peak memory across label counts")
    p.add_argument("--labels", required=True, help="comma list of label counts")
    p.add_argument("--recipes", default="renee,elmo_bf16,elmo_fp8",
                   help="comma list of recipes")
    p.add_argument("--dim", type=int, default=768, help="embedding dimension")
    p.add_argument("--batch", type=int, default=128, help="batch size")
    p.add_argument("--seq", type=int, default=128, help="sequence length")
    p.add_argument("--chunks", type=int, default=8, help="label chunks k")
    p.add_argument("--encoder-params", type=int, default=110_000_000,
                   help="encoder parameter count")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_memsweep)

    p = sub.add_parser("histprobe", help="exponent histograms at given steps")
    _train_flags(p)
    p.add_argument("--steps", required=True, help="comma list of step indices")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_histprobe)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p.add_argument("--samples", type=int, required=True, help="sample count N")
    p.add_argument("--features", type=int, required=True, help="feature dim D")
    p.add_argument("--labels", type=int, required=True, help="label count L")
    p.add_argument("--mean-labels", type=float, default=2.0,
                   help="mean labels per sample (Poisson)")
    p.add_argument("--zipf", type=float, default=1.0,
                   help="Zipf exponent of label frequencies")
    p.add_argument("--noise", type=float, default=0.1, help="feature noise sigma")
    p.add_argument("--min-labels", type=int, default=0,
                   help="minimum labels per sample")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--file", help="dataset output path (.gz accepted)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=_cmd_gen_synth)
    return parser


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv:
            argv = _apply_config_file(argv, parser)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
