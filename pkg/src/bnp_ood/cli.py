"""``bnp-ood`` command line.

Subcommands: ``preprocess``, ``fit``, ``score``, ``eval``, ``synth`` and
``fm-analysis``.  Each writes its primary output plus a JSON manifest at
``<output>.manifest.json``.  Exit codes: 0 success, 2 bad input, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
import warnings
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError
from .evaluation import accuracy, auroc, fm_null_analysis
from .io import (
    fmt_float,
    load_dataset,
    load_labels,
    load_matrix,
    load_model,
    load_scores,
    load_whitener,
    save_model,
    save_scores,
    save_whitener,
    write_embeddings,
)
from .models import METHODS, Pipeline, fit_model
from .numerics import ConvergenceWarning, NumericalError
from .preprocess import fit_whitener
from .synthetic import SynthConfig, run_sweep, write_sweep_csv

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "BNP_OOD_THREADS"


class InputError(Exception):
    """Bad flag values or inconsistent input files."""


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out, args, inputs, seed, started):
    doc = {
        "command": args.command,
        "flags": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")},
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None},
        "seed": seed,
        "version": __version__,
        "wall_time_seconds": round(time.perf_counter() - started, 6),
    }
    Path(f"{out}.manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def _thread_limit(n):
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return nullcontext()
    if n < 1:
        raise InputError("--threads must be positive")
    from threadpoolctl import threadpool_info, threadpool_limits

    # growing an OpenBLAS pool past its start-up size can crash it, so only shrink
    sizes = [i["num_threads"] for i in threadpool_info()]
    return threadpool_limits(limits=min([n, *sizes]))


def _whitener_from(args, ds):
    if getattr(args, "whitener", None):
        w = load_whitener(args.whitener)
        if w.input_dim != ds.D:
            raise InputError(f"whitener expects {w.input_dim} dimensions, data has {ds.D}")
        return w
    if args.no_whiten:
        return None
    return fit_whitener(ds, args.eig_threshold, args.dims)


# ------------------------------------------------------------------ commands

def cmd_preprocess(args):
    ds = load_dataset(args.input, args.labels)
    w = fit_whitener(ds, args.eig_threshold, args.dims)
    save_whitener(w, args.out)
    if args.transformed:
        write_embeddings(args.transformed, w(ds.X))
    print(f"retained {w.retained} of {w.input_dim} dimensions")
    return [args.input, args.labels], None


def _fit_kwargs(args):
    kw = {}
    if args.model in ("full", "diag", "coupled"):
        kw.update(max_iters=args.max_iters, tol=args.tol)
        if args.nu0 is not None:
            kw["nu0"] = args.nu0
        if args.kappa0 is not None:
            kw["kappa0"] = args.kappa0
    if args.model == "coupled":
        kw.update(grid_size=args.gamma_grid_size, predictive_scale=args.predictive_scale)
        if args.alpha0 is not None:
            kw["alpha0"] = args.alpha0
    if args.model == "irmds":
        kw["include_logdet"] = not args.no_logdet
    return kw


def cmd_fit(args):
    ds = load_dataset(args.input, args.labels)
    w = _whitener_from(args, ds)
    data = ds if w is None else ds.transform(w)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        model = fit_model(args.model, data, **_fit_kwargs(args))
    for c in caught:
        print(f"warning: {c.message}", file=sys.stderr)
    save_model(Pipeline(model, w), args.out)
    return [args.input, args.labels, args.whitener], None


def cmd_score(args):
    model = load_model(args.model)
    X = load_matrix(args.input)
    width = model.whitener.input_dim if isinstance(model, Pipeline) and model.whitener is not None else None
    if width is not None and X.shape[1] != width:
        raise InputError(f"model expects {width} columns, input has {X.shape[1]}")
    if args.alpha is not None and not args.alpha > 0:
        raise InputError("--alpha must be positive")
    from .scoring import score_table

    table = score_table(model, X, alpha=args.alpha, weighted=not args.unweighted)
    if not np.all(np.isfinite(table.score)):
        raise NumericalError("non-finite scores")
    save_scores(table, args.out)
    return [args.model, args.input], None


def cmd_eval(args):
    t_in = load_scores(args.scores_in)
    t_out = load_scores(args.scores_out)
    rows = [("auroc", auroc(t_in.score, t_out.score)), ("n_in", len(t_in)), ("n_out", len(t_out))]
    if args.labels_in:
        if t_in.predicted_class is None:
            raise InputError("--labels-in needs a predicted_class column in --scores-in")
        rows.append(("accuracy", accuracy(t_in.predicted_class, load_labels(args.labels_in))))
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["metric", "value"])
        for k, v in rows:
            wr.writerow([k, fmt_float(v) if isinstance(v, float) else str(v)])
    for k, v in rows:
        print(f"{k}: {fmt_float(v) if isinstance(v, float) else v}")
    return [args.scores_in, args.scores_out, args.labels_in], None


def _parse_sweep(text):
    name, sep, vals = text.partition("=")
    name = {"nk": "N_k", "n_k": "N_k"}.get(name.strip().lower(), name.strip())
    if not sep or not vals:
        raise InputError(f"--sweep must look like nu0=2,4,8; got {text!r}")
    try:
        values = [float(v) for v in vals.split(",")]
    except ValueError:
        raise InputError(f"non-numeric sweep value in {text!r}") from None
    return name, values


def cmd_synth(args):
    param, values = _parse_sweep(args.sweep)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise InputError(f"unknown methods: {', '.join(bad)}")
    if args.seeds < 1:
        raise InputError("--seeds must be positive")
    try:
        nu0 = max(values) if param == "nu0" else args.nu0
        base = SynthConfig(D=args.D, K=args.K, N_k=args.nk, nu0=nu0, kappa0=args.kappa0)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    seeds = range(args.seed, args.seed + args.seeds)
    rows = run_sweep(param, values, methods, seeds, base, whiten=not args.no_whiten, fit_kwargs={"coupled": {"grid_size": args.gamma_grid_size}})
    write_sweep_csv(rows, args.out)
    for m in methods:
        for v in values:
            vals = [r["auroc"] for r in rows if r["method"] == m and r["value"] == type(r["value"])(v) and r["auroc"] is not None]
            shown = fmt_float(float(np.mean(vals))) if vals else "n/a"
            print(f"{param}={v:g} {m}: mean AUROC {shown} over {len(vals)} seeds")
    return [], args.seed


def cmd_fm(args):
    ds = load_dataset(args.input, args.labels)
    if args.dims is not None:
        ds = ds.transform(fit_whitener(ds, args.eig_threshold, args.dims))
    res = fm_null_analysis(ds, args.n_samples, args.seed)
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["kind", "distance"])
        for d in res.data_distances:
            wr.writerow(["data", fmt_float(d)])
        for d in res.null_distances:
            wr.writerow(["null", fmt_float(d)])
    md, mn = res.medians()
    print(f"median FM distance: data {fmt_float(md)}, Wishart null {fmt_float(mn)} (dof {res.dof})")
    return [args.input, args.labels], args.seed


# ------------------------------------------------------------------ parser

def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnp-ood", description="Dirichlet-process mixture OOD scoring for embeddings.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help=f"BLAS threads (overrides ${THREADS_ENV})")
    sub = p.add_subparsers(dest="command", required=True)

    def whiten_flags(sp, allow_disable=True):
        sp.add_argument("--dims", type=_pos_int, default=None, help="keep only the top principal components")
        sp.add_argument("--eig-threshold", type=float, default=1e-7, help="relative eigenvalue cutoff")
        if allow_disable:
            sp.add_argument("--no-whiten", action="store_true", help="fit on raw coordinates")

    sp = sub.add_parser("preprocess", help="fit the whitening transform")
    sp.add_argument("--input", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--out", required=True, help="whitener JSON")
    sp.add_argument("--transformed", help="also write the whitened embeddings here")
    whiten_flags(sp, allow_disable=False)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("fit", help="fit a model")
    sp.add_argument("--model", required=True, choices=METHODS)
    sp.add_argument("--input", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--out", required=True)
    sp.add_argument("--whitener", help="reuse a whitener written by 'preprocess'")
    whiten_flags(sp)
    sp.add_argument("--max-iters", type=int, default=200)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--nu0", type=float, default=None, help="initial nu0")
    sp.add_argument("--kappa0", type=float, default=None, help="initial kappa0")
    sp.add_argument("--alpha0", type=float, default=None, help="initial alpha0 (coupled)")
    sp.add_argument("--gamma-grid-size", type=_pos_int, default=100)
    sp.add_argument("--predictive-scale", choices=("printed", "conditional"), default="printed")
    sp.add_argument("--no-logdet", action="store_true", help="independent RMDS without log-determinants")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("score", help="score embeddings with a fitted model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--alpha", type=float, default=None, help="also report inlier probabilities")
    sp.add_argument("--out", "--output", dest="out", required=True)
    sp.add_argument("--unweighted", action="store_true", help="classify without class-size weights")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("eval", help="AUROC (and accuracy) from two score files")
    sp.add_argument("--scores-in", required=True)
    sp.add_argument("--scores-out", required=True)
    sp.add_argument("--labels-in", help="true labels of the inlier scores")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="synthetic AUROC sweep")
    sp.add_argument("--sweep", required=True, help="e.g. nu0=2,4,8,16,64 or nk=20,80,320")
    sp.add_argument("--nk", type=_pos_int, default=20)
    sp.add_argument("--nu0", type=float, default=4.0)
    sp.add_argument("--D", type=_pos_int, default=2)
    sp.add_argument("--K", type=_pos_int, default=10)
    sp.add_argument("--kappa0", type=float, default=0.05)
    sp.add_argument("--methods", default="tied,full,diag,coupled,rmds,irmds")
    sp.add_argument("--seeds", type=int, default=20, help="number of seeds")
    sp.add_argument("--seed", type=int, default=0, help="first seed")
    sp.add_argument("--gamma-grid-size", type=_pos_int, default=100)
    sp.add_argument("--no-whiten", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fm-analysis", help="covariance heterogeneity against a Wishart null")
    sp.add_argument("--input", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dims", type=_pos_int, default=None)
    sp.add_argument("--eig-threshold", type=float, default=1e-7)
    sp.add_argument("--n-samples", type=_pos_int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_fm)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.perf_counter()
    try:
        with _thread_limit(args.threads):
            inputs, seed = args.func(args)
        _write_manifest(args.out, args, inputs, seed, started)
    except (InputError, DataError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
