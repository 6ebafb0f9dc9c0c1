"""Command-line surface: forward analysis, model building, inverse
reconstruction, and a round-trip harness.

All artifacts are plain files: pencil and spectral-data records as JSON
with complex entries stored as [re, im] pairs, tables as CSV with
17-significant-digit scientific notation.  Exit codes: 0 success,
2 validation failure, 3 regime violation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from .core import (
    FormatError,
    NumericalError,
    PencilError,
    RegimeError,
    load_pencil,
    load_sd,
    save_pencil,
    save_sd,
    validate,
)
from .forward import forward_spectral_data
from .inverse import reconstruct_pencil
from .model import build_constant_model, build_frame_from_sd, extract_h1

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_REGIME = 3
EXIT_NUMERICAL = 4

NUM = "%.16e"                       # 17 significant digits

ROUNDTRIP_Q_TOL = 1e-2
ROUNDTRIP_BOUNDARY_TOL = 1e-3


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([NUM % v if isinstance(v, float) else v
                        for v in row])


def _fw_kwargs(args):
    kw = {"n_max": args.nmax, "tol": args.ode_tol, "root_tol": args.root_tol,
          "require_selfadjoint": args.require_selfadjoint}
    if args.quad_nodes is not None:
        kw["quad_nodes"] = args.quad_nodes
    return kw


def cmd_forward(args):
    spec = load_pencil(args.input)
    report = validate(spec, require_selfadjoint=args.require_selfadjoint)
    if not report.passed:
        print(report)
        return EXIT_VALIDATION
    res = forward_spectral_data(spec, **_fw_kwargs(args))
    os.makedirs(args.out_dir, exist_ok=True)
    save_sd(os.path.join(args.out_dir, "sd.json"), res.sd)

    rows = []
    for e in res.sd.entries:
        sv = np.linalg.svd(e.alpha, compute_uv=False)
        rank = int(np.sum(sv > 1e-8 * max(sv[0], 1e-300)))
        rows.append([e.signed_index, e.q, float(e.rho.real),
                     float(e.rho.imag), e.mult, float(sv[0]), rank])
    _write_csv(os.path.join(args.out_dir, "eigenvalues.csv"),
               ["n", "q", "re_rho", "im_rho", "mult", "alpha_norm",
                "alpha_rank"], rows)

    fr = res.frame
    rows = []
    for e in res.sd.entries:
        w = fr.omegas[e.q - 1]
        n = e.signed_index
        if n != 0:
            rows.append([n, e.q, float((e.rho.real - n - w) * n)])
    _write_csv(os.path.join(args.out_dir, "asymptotics.csv"),
               ["n", "q", "scaled_shift_defect"], rows)

    with open(os.path.join(args.out_dir, "frame.txt"), "w") as f:
        f.write("asymptotic frame\n")
        f.write("shifts: %s\n" % np.array2string(fr.omegas, precision=12))
        f.write("groups: %s\n" % (fr.groups,))
        f.write("A:\n%s\n" % np.array2string(fr.A, precision=12))
    for note in res.notes:
        print("note: %s" % note)
    print("forward: %d entries written to %s" %
          (len(res.sd.entries), args.out_dir))
    return EXIT_OK


def cmd_model(args):
    sd = load_sd(args.input)
    frame = build_frame_from_sd(sd)
    h1, defect = extract_h1(sd, frame)
    model, recipe = build_constant_model(frame, h1_tilde=h1)
    os.makedirs(args.out_dir, exist_ok=True)
    save_pencil(os.path.join(args.out_dir, "model_pencil.json"), model)
    with open(os.path.join(args.out_dir, "model_recipe.txt"), "w") as f:
        f.write("model kind: %s\n" % recipe.kind)
        f.write("h1 estimate Hermitian defect: %.3e\n" % defect)
        f.write("T:\n%s\n" % np.array2string(recipe.T, precision=12))
    print("model: constant model written to %s" % args.out_dir)
    return EXIT_OK


def cmd_inverse(args):
    sd = load_sd(args.input)
    rec, log = reconstruct_pencil(
        sd, n_max=args.nmax, grid_nodes=args.grid, tol=args.ode_tol,
        root_tol=args.root_tol, quad_nodes=args.quad_nodes)
    os.makedirs(args.out_dir, exist_ok=True)
    save_pencil(os.path.join(args.out_dir, "recovered_pencil.json"), rec)
    with open(os.path.join(args.out_dir, "runlog.txt"), "w") as f:
        f.write(log.to_text() + "\n")
    _write_csv(os.path.join(args.out_dir, "diagnostics.csv"),
               ["x", "cond", "residual", "step"],
               [[float(x), float(c), float(r), k]
                for x, c, r, k in log.diagnostics])
    print("inverse: recovered pencil written to %s" % args.out_dir)
    return EXIT_OK


def cmd_roundtrip(args):
    spec = load_pencil(args.input)
    report = validate(spec, require_selfadjoint=args.require_selfadjoint)
    if not report.passed:
        print(report)
        return EXIT_VALIDATION
    res = forward_spectral_data(spec, **_fw_kwargs(args))
    rec, log = reconstruct_pencil(
        res.sd, n_max=args.nmax, grid_nodes=args.grid, tol=args.ode_tol,
        root_tol=args.root_tol, quad_nodes=args.quad_nodes)
    xs = np.linspace(0.0, math.pi, args.grid)
    errs = {
        "Q1": float(np.max(np.abs(rec.Q1(xs) - spec.Q1(xs)))),
        "Q0": float(np.max(np.abs(rec.Q0(xs) - spec.Q0(xs)))),
        "h1": float(np.max(np.abs(rec.h1 - spec.h1))),
        "h0": float(np.max(np.abs(rec.h0 - spec.h0))),
        "H1": float(np.max(np.abs(rec.H1 - spec.H1))),
        "H0": float(np.max(np.abs(rec.H0 - spec.H0))),
    }
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        save_pencil(os.path.join(args.out_dir, "recovered_pencil.json"), rec)
        with open(os.path.join(args.out_dir, "runlog.txt"), "w") as f:
            f.write(log.to_text() + "\n")
    ok = True
    for name in ("Q1", "Q0"):
        passed = errs[name] <= ROUNDTRIP_Q_TOL
        ok = ok and passed
        print("roundtrip %s sup error %.3e (tol %.1e) %s" %
              (name, errs[name], ROUNDTRIP_Q_TOL,
               "ok" if passed else "FAIL"))
    for name in ("h1", "h0", "H1", "H0"):
        passed = errs[name] <= ROUNDTRIP_BOUNDARY_TOL
        ok = ok and passed
        print("roundtrip %s error %.3e (tol %.1e) %s" %
              (name, errs[name], ROUNDTRIP_BOUNDARY_TOL,
               "ok" if passed else "FAIL"))
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_check(args):
    with open(args.input) as f:
        try:
            kind = json.load(f).get("kind")
        except json.JSONDecodeError as exc:
            raise FormatError("cannot parse %s: %s" % (args.input, exc))
    if kind == "pencil":
        spec = load_pencil(args.input)
        report = validate(spec,
                          require_selfadjoint=args.require_selfadjoint)
        print(report)
        return EXIT_OK if report.passed else EXIT_VALIDATION
    if kind == "spectral_data":
        sd = load_sd(args.input)        # regime check runs on load
        bad = sd.rank_defects()
        for e, rank in bad:
            print("rank defect at (%+d, q=%d): rank %d != mult %d" %
                  (e.signed_index, e.q, rank, e.mult))
        print("check: %d entries, %d rank defects" % (len(sd.entries),
                                                      len(bad)))
        return EXIT_OK if not bad else EXIT_VALIDATION
    raise FormatError("%s: unknown record kind %r" % (args.input, kind))


def build_parser():
    p = argparse.ArgumentParser(
        prog="slpencil",
        description="Forward and inverse spectral solver for matrix "
                    "quadratic Sturm-Liouville pencils on [0, pi].")
    sub = p.add_subparsers(dest="command", required=True)
    handlers = {
        "forward": (cmd_forward, "compute spectral data of a pencil"),
        "model": (cmd_model, "build a constant model pencil from data"),
        "inverse": (cmd_inverse, "reconstruct a pencil from spectral data"),
        "roundtrip": (cmd_roundtrip, "forward then inverse, report errors"),
        "check": (cmd_check, "validate a pencil or spectral-data file"),
    }
    for name, (fn, help_text) in handlers.items():
        q = sub.add_parser(name, help=help_text)
        q.add_argument("--input", required=True)
        q.add_argument("--out-dir", default=None if name in
                       ("roundtrip", "check") else "out")
        q.add_argument("--nmax", type=int, default=20)
        q.add_argument("--ode-tol", type=float, default=1e-10)
        q.add_argument("--root-tol", type=float, default=1e-11)
        q.add_argument("--quad-nodes", type=int, default=None)
        q.add_argument("--grid", type=int, default=257)
        q.add_argument("--threads", type=int, default=None)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--require-selfadjoint", action="store_true",
                       default=True)
        q.add_argument("--no-require-selfadjoint", action="store_false",
                       dest="require_selfadjoint")
        q.set_defaults(func=fn)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except FormatError as exc:
        print("validation failure: %s" % exc, file=sys.stderr)
        return EXIT_VALIDATION
    except RegimeError as exc:
        print("regime violation: %s" % exc, file=sys.stderr)
        return EXIT_REGIME
    except (NumericalError, PencilError) as exc:
        print("numerical failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
