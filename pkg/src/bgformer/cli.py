"""Command-line entry point: ``bgformer <subcommand> ...``.

Subcommands: preprocess, train, evaluate, export-attention, bench, theory.
Exit codes: 0 success, 1 other failures, 2 missing input file,
3 too few genes for the requested HVG count.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import hashlib
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import ingest, theory, trainer
from .errors import BGFormerError, InsufficientGenes, ShapeMismatch

log = logging.getLogger("bgformer")

EXIT_OK, EXIT_FAIL, EXIT_MISSING, EXIT_GENES = 0, 1, 2, 3
BUNDLE_NAME = "data.bgd"


def _g(x) -> str:
    return f"{x:.6g}"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _iso_mtime(path) -> str:
    ts = os.stat(path).st_mtime
    return _dt.datetime.fromtimestamp(ts, tz=_dt.timezone.utc).isoformat()


def write_manifest(out_dir, command: str, inputs, seed=None, config=None) -> dict:
    """Record what a run consumed.  Written before any heavy work starts.

    Timestamps are the inputs' modification times rather than wall-clock
    time, so rerunning on unchanged inputs rewrites identical bytes.
    """
    inputs = [p for p in inputs if p]
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "timestamps": {os.path.basename(p): _iso_mtime(p) for p in inputs},
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _threads():
    raw = os.environ.get("BGF_THREADS")
    if not raw:
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, int(raw)))


def _require(path) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def _bundle_path(path) -> str:
    if os.path.isdir(path):
        path = os.path.join(path, BUNDLE_NAME)
    return _require(path)


def _truth(em, path):
    """Truth labels aligned to the bundle's cells.

    Accepts one label per line or ``cell_id,label`` rows (a ``cell_id``
    header is skipped).  A file covering the pre-QC cells is subset to the
    cells that survived QC.
    """
    if not path:
        return None
    lines = ingest.read_labels(_require(path))
    if lines and lines[0].lower().startswith("cell_id,"):
        lines = lines[1:]
    labels = [ln.rsplit(",", 1)[-1].strip() for ln in lines]
    codes, _ = ingest.encode_labels(labels)
    if codes.size == em.n_cells:
        return codes
    kept = em.kept_cells
    if kept is not None and kept.size == em.n_cells and codes.size > int(kept.max()):
        return ingest.encode_labels([labels[i] for i in kept])[0]
    raise ShapeMismatch(f"{codes.size} labels for {em.n_cells} cells")


# -- subcommands --------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    src = _require(args.input)
    write_manifest(args.out, "preprocess", [src], config={"hvg": args.hvg, "format": args.format,
                                                          "min_genes": args.min_genes, "min_cells": args.min_cells})
    em = ingest.load_counts(src, args.format)
    em = ingest.preprocess(em, args.hvg, args.min_genes, args.min_cells)
    path = os.path.join(args.out, BUNDLE_NAME)
    ingest.save_bundle(path, em)
    print(f"cells={em.n_cells} genes={em.processed.shape[1]} -> {path}")
    return EXIT_OK


def _train_config(args) -> trainer.TrainConfig:
    overrides = {
        "seed": args.seed, "m": args.anchors, "l": args.heads, "K": args.clusters, "epochs": args.epochs,
        "disable_L_a": True if args.disable_L_a else None,
        "disable_L_s": True if args.disable_L_s else None,
    }
    if args.config:
        return trainer.TrainConfig.from_file(_require(args.config), **overrides)
    return trainer.TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_train(args) -> int:
    bundle = _bundle_path(args.input)
    cfg = _train_config(args)
    write_manifest(args.out, "train", [bundle, args.config, args.labels], seed=cfg.seed, config=cfg.to_text())
    em = ingest.load_bundle(bundle)
    truth = _truth(em, args.labels)
    with _threads():
        res = trainer.train(em, cfg, truth=truth, echo=None if args.quiet else print)
        trainer.write_outputs(args.out, res.model, em, res.labels, res.metrics, res.history, res.Z)
    _print_metrics(res.metrics)
    return EXIT_OK


def _print_metrics(metrics):
    parts = [f"{k}={_g(metrics[k])}" for k in ("acc", "ari") if k in metrics]
    parts.append("sizes=" + ",".join(str(s) for s in metrics["cluster_sizes"]))
    print(" ".join(parts))


def cmd_evaluate(args) -> int:
    bundle = _bundle_path(args.input)
    ckpt = _require(os.path.join(args.model, "checkpoint.bgf"))
    write_manifest(args.out, "evaluate", [bundle, ckpt, args.labels])
    em = ingest.load_bundle(bundle)
    model = trainer.load_model(args.model)
    truth = _truth(em, args.labels)
    with _threads():
        out = trainer.evaluate(model, em, truth)
    os.makedirs(args.out, exist_ok=True)
    trainer.write_labels(os.path.join(args.out, "labels.csv"), em.cell_ids, out["labels"])
    trainer.write_metrics(os.path.join(args.out, "metrics.json"), out["metrics"])
    trainer.write_matrix_csv(os.path.join(args.out, "embeddings.csv"), out["Z"])
    _print_metrics(out["metrics"])
    return EXIT_OK


def cmd_export_attention(args) -> int:
    bundle = _bundle_path(args.input)
    ckpt = _require(os.path.join(args.model, "checkpoint.bgf"))
    write_manifest(args.out, "export-attention", [bundle, ckpt, args.labels])
    em = ingest.load_bundle(bundle)
    model = trainer.load_model(args.model)
    truth = _truth(em, args.labels)
    with _threads():
        out = trainer.evaluate(model, em, with_attention=True)
    labels = truth if truth is not None else out["labels"]
    K = int(labels.max()) + 1
    files = trainer.write_attention(args.out, out["attention"], labels, K)
    print(f"wrote {len(files)} files to {args.out}")
    return EXIT_OK


def _int_list(text: str):
    return [int(float(t)) for t in text.split(",") if t.strip()]


def cmd_bench(args) -> int:
    sizes = _int_list(args.sizes)
    params = {"sizes": sizes, "d": args.genes, "m": args.anchors, "l": args.heads, "d_k": args.d_k,
              "reps": args.reps, "full_cap": args.full_cap}
    write_manifest(args.out, "bench", [], seed=args.seed, config=params)
    # timing always uses one BLAS lane so slopes are comparable across machines
    rep = theory.scaling_benchmark(sizes, d=args.genes, m=args.anchors, l=args.heads, d_k=args.d_k,
                                   reps=args.reps, full_cap=args.full_cap, seed=args.seed, threads=1)
    theory.write_bench(rep, os.path.join(args.out, "bench.csv"), os.path.join(args.out, "bench.json"))
    for r in rep.rows:
        t = "skipped" if r.skipped else f"{_g(r.mean_ms)} ms"
        print(f"n={r.n} {r.method}: {t}")
    for method, slope in sorted(rep.slopes.items()):
        print(f"slope {method}={_g(slope)}")
    return EXIT_OK


def cmd_theory(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.experiment == "jl":
        cfg = theory.JlTrialConfig(epsilon=args.epsilon, trials=args.trials, seed=args.seed)
        write_manifest(args.out, "theory jl", [], seed=args.seed, config=vars(cfg))
        errs = theory.jl_trial_errors(cfg)
        result = {
            "n": cfg.n, "n_prime": cfg.n_prime, "epsilon": cfg.epsilon, "m_jl": cfg.projection_dim,
            "trials": cfg.trials, "success_rate": float(np.mean(errs <= cfg.epsilon)),
            "median_relative_error": float(np.median(errs)),
            "inner_product_success_rate": theory.jl_inner_product_experiment(cfg),
        }
        print(f"m_jl={cfg.projection_dim} success_rate={_g(result['success_rate'])} "
              f"median_error={_g(result['median_relative_error'])} "
              f"inner_product_rate={_g(result['inner_product_success_rate'])}")
    else:
        cfg = theory.EquivalenceConfig(seed=args.seed)
        write_manifest(args.out, "theory equivalence", [], seed=args.seed, config=vars(cfg))
        rep = theory.equivalence_report(cfg)
        result = {"max_abs_diff": rep.max_abs_diff, "softmax_gap": rep.softmax_gap, "scale": rep.scale,
                  "n": cfg.n, "m": cfg.m, "d": cfg.d}
        print(f"max_abs_diff={_g(rep.max_abs_diff)} softmax_gap={_g(rep.softmax_gap)}")
    with open(os.path.join(args.out, f"theory_{args.experiment}.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bgformer", description="Bipartite graph-attention clustering for count matrices.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("preprocess", help="QC, HVG selection and normalisation into a bundle")
    sp.add_argument("--input", required=True)
    sp.add_argument("--format", choices=["mtx", "csv"], default="csv")
    sp.add_argument("--hvg", type=int, default=1500, help="number of highly variable genes")
    sp.add_argument("--min-genes", type=int, default=1, help="minimum detected genes per cell")
    sp.add_argument("--min-cells", type=int, default=1, help="minimum cells per gene")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_preprocess)

    def model_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--anchors", type=int, help="anchor count m")
        sp.add_argument("--heads", type=int, help="attention heads l")
        sp.add_argument("--clusters", type=int, help="cluster count K")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--disable-L-a", dest="disable_L_a", action="store_true")
        sp.add_argument("--disable-L-s", dest="disable_L_s", action="store_true")

    sp = sub.add_parser("train", help="train a model on a bundle")
    sp.add_argument("--input", required=True, help="bundle file or preprocess output directory")
    sp.add_argument("--labels", help="truth labels for metrics")
    sp.add_argument("--out", required=True)
    sp.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    model_flags(sp)
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "labels and metrics from a trained model"),
                                 ("export-attention", cmd_export_attention, "per-head cell-to-anchor attention")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--input", required=True)
        sp.add_argument("--model", required=True, help="directory written by train")
        sp.add_argument("--labels")
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("bench", help="attention scaling benchmark")
    sp.add_argument("--sizes", default="1000,2000,4000,8000,16000,32000,64000")
    sp.add_argument("--genes", type=int, default=64)
    sp.add_argument("--anchors", type=int, default=64)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--d-k", dest="d_k", type=int, default=32)
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--full-cap", type=int, default=8192)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("theory", help="approximation experiments")
    sp.add_argument("experiment", choices=["jl", "equivalence"])
    sp.add_argument("--epsilon", type=float, default=0.5)
    sp.add_argument("--trials", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_theory)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc.args[0]}", file=sys.stderr)
        return EXIT_MISSING
    except InsufficientGenes as exc:
        print(f"error: InsufficientGenes: {exc}", file=sys.stderr)
        return EXIT_GENES
    except (BGFormerError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
