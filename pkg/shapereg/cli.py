"""Command-line entry point: `python -m shapereg <command> ...`.

Results go to stdout as JSON (CSV for predict/smooth without --out); logs go to
stderr or --log-file. Exit codes: 0 success, 2 usage or input errors, 3 solver failure.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

from app.settings import LOG_LEVELS, Settings
from shapereg import __version__
from shapereg.bench import FUNCTION_IDS, BenchGrid, generate, report_csv, run_benchmark, write_report
from shapereg.cgm import cgm_solve
from shapereg.config import ADMMConfig, CGMConfig, Engine, FitConfig, ProxALMConfig
from shapereg.errors import ParameterError, ShapeRegError, SolverError
from shapereg.estimator import data_driven_shape, fit
from shapereg.finance import BasketSpec, bs_call, fdm_basket_2d, mc_basket
from shapereg.io import (
    TraceWriter, dumps, predictions_csv, read_dataset_csv, read_json_model, read_model, read_points_csv,
    read_shape_json, write_dataset_csv, write_model, write_text_atomic,
)
from shapereg.logs import configure_logging
from shapereg.model import MaxAffineModel
from shapereg.problem import NoShape, build_instance

log = logging.getLogger("shapereg.cli")

EXIT_OK, EXIT_USAGE, EXIT_SOLVER = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def exit(self, status=0, message=None):
        if message:
            self._print_message(message, sys.stderr)
        raise _ParserExit(status)


class _ParserExit(Exception):
    def __init__(self, status: int):
        super().__init__(status)
        self.status = status


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser(env: Settings) -> argparse.ArgumentParser:
    p = _Parser(prog="shapereg", description="Shape-constrained convex regression")
    p.add_argument("--version", action="version", version=f"shapereg {__version__}")
    p.add_argument("--threads", type=int, default=env.threads, help="worker threads for n^2 scans")
    p.add_argument("--blocks", type=int, default=env.SHAPEREG_BLOCKS, help="block count for n^2 scans")
    p.add_argument("--trace", type=Path, help="JSON-lines solver trace")
    p.add_argument("--log-file", type=Path, default=None)
    p.add_argument("--log-level", type=str.upper, choices=LOG_LEVELS, default=None)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def solver_flags(sp, engines=True):
        sp.add_argument("--data", type=Path, required=True, help="CSV with header x1,...,xd,y")
        sp.add_argument("--shape", type=Path, help="gradient-set JSON (default: none)")
        sp.add_argument("--knn", type=int, help="data-driven per-point Lipschitz radii from k neighbours")
        sp.add_argument("--knn-p", type=float, default=2.0, help="norm used for the neighbour slopes")
        if engines:
            sp.add_argument("--engine", choices=[e.value for e in Engine], default=Engine.PROXALM.value)
        sp.add_argument("--tol", type=float, default=1e-6)
        sp.add_argument("--seed", type=int, default=env.SHAPEREG_SEED)
        sp.add_argument("--no-standardize", action="store_true")
        sp.add_argument("--out", type=Path, help="model JSON")

    sp = sub.add_parser("fit", help="fit a max-affine model")
    solver_flags(sp)
    sp.add_argument("--concave", action="store_true")

    sp = sub.add_parser("cgm", help="constraint generation run with per-round reports")
    solver_flags(sp, engines=False)
    sp.add_argument("--inner", choices=[Engine.PROXALM.value, Engine.ADMM.value], default=Engine.PROXALM.value)
    sp.add_argument("--initial-factor", type=float)
    sp.add_argument("--max-rounds", type=int, default=30)
    sp.add_argument("--rounds-out", type=Path, help="CSV of round reports")

    sp = sub.add_parser("predict", help="values and subgradients of a fitted model")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--points", type=Path, required=True)
    sp.add_argument("--out", type=Path)

    sp = sub.add_parser("smooth", help="Moreau envelope of a fitted model")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--points", type=Path, required=True)
    sp.add_argument("--tau", type=float, required=True)
    sp.add_argument("--out", type=Path)

    sp = sub.add_parser("gen-data", help="synthetic dataset from a test function")
    sp.add_argument("--function", choices=FUNCTION_IDS, required=True)
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--snr", type=float, default=3.0)
    sp.add_argument("--seed", type=int, default=env.SHAPEREG_SEED)
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("bench", help="benchmark grid")
    sp.add_argument("--grid", type=Path, required=True)
    sp.add_argument("--out", type=Path, help="report CSV (stdout when omitted)")
    sp.add_argument("--timing", action="store_true", help="include wall-clock seconds")

    sp = sub.add_parser("price-call", help="Black-Scholes call price")
    sp.add_argument("--S", type=float, required=True)
    sp.add_argument("--K", type=float, required=True)
    sp.add_argument("--r", type=float, default=0.0)
    sp.add_argument("--sigma", type=float, required=True)
    sp.add_argument("--tau", type=float, required=True)

    sp = sub.add_parser("price-basket", help="Monte-Carlo basket call price")
    sp.add_argument("--spec", type=Path, required=True)
    sp.add_argument("--x0", type=_floats, required=True)
    sp.add_argument("--samples", type=int, default=100_000)
    sp.add_argument("--seed", type=int, default=env.SHAPEREG_SEED)

    sp = sub.add_parser("fdm-basket", help="two-asset basket call by finite differences")
    sp.add_argument("--spec", type=Path, required=True)
    sp.add_argument("--nx", type=int, default=200)
    sp.add_argument("--ny", type=int, default=200)
    sp.add_argument("--nt", type=int, default=200)
    sp.add_argument("--x-max", type=float)
    sp.add_argument("--y-max", type=float)
    sp.add_argument("--points", type=Path, help="CSV x1,x2 of spots to report")
    sp.add_argument("--out", type=Path, help="CSV of the final price surface")
    return p


def _shape_of(args, dataset):
    if args.knn is not None:
        if args.shape is not None:
            raise ParameterError("--shape and --knn are mutually exclusive")
        return data_driven_shape(dataset, args.knn, args.knn_p)
    return read_shape_json(args.shape) if args.shape is not None else NoShape()


def _engine_configs(args) -> dict:
    kw = dict(block_count=args.blocks, threads=args.threads)
    return dict(proxalm=ProxALMConfig(**kw), admm=ADMMConfig(**kw), cgm=CGMConfig(seed=args.seed, **kw))


def _fit_summary(model: MaxAffineModel, out: Path | None) -> dict:
    if out is not None:
        write_model(model, out)
    return {"model": str(out) if out else None, "n": model.n, "d": model.d, "shape": model.shape.kind, **model.meta}


def _cmd_fit(args, trace) -> dict:
    dataset = read_dataset_csv(args.data)
    shape = _shape_of(args, dataset)
    config = FitConfig(engine=Engine(args.engine), tol=args.tol, standardize=not args.no_standardize,
                       concave=args.concave, **_engine_configs(args))
    return _fit_summary(fit(dataset, shape, config, trace=trace), args.out)


def _cmd_cgm(args, trace) -> dict:
    dataset = read_dataset_csv(args.data)
    shape = _shape_of(args, dataset)
    instance = build_instance(dataset, shape, standardize_data=not args.no_standardize)
    configs = _engine_configs(args)
    cgm_cfg = CGMConfig(tol=args.tol, seed=args.seed, initial_factor=args.initial_factor,
                        max_rounds=args.max_rounds, block_count=args.blocks, threads=args.threads)
    inner = Engine(args.inner)
    result = cgm_solve(instance, cgm_cfg, inner, configs[inner.value], trace=trace)
    if args.rounds_out is not None:
        fields = list(result.rounds[0].model_dump()) if result.rounds else []
        lines = [",".join(fields)] + [",".join(str(v) for v in r.model_dump().values()) for r in result.rounds]
        write_text_atomic(args.rounds_out, "\n".join(lines) + "\n")
    summary = _fit_summary(result.model, args.out)
    summary["rounds"] = [r.model_dump() for r in result.rounds]
    return summary


def _write_or_print(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        write_text_atomic(out, text)


def _cmd_predict(args, trace) -> None:
    model = read_model(args.model)
    _write_or_print(predictions_csv(model, read_points_csv(args.points)), args.out)


def _cmd_smooth(args, trace) -> None:
    model = read_model(args.model)
    points = read_points_csv(args.points)
    d = model.d
    header = [f"x{i + 1}" for i in range(d)] + ["value"] + [f"g{i + 1}" for i in range(d)] + ["gap"]
    lines = [",".join(header)]
    for x in points:
        res = model.moreau_evaluate(x, args.tau)
        lines.append(",".join(repr(float(v)) for v in [*x, res.value, *res.gradient, res.gap]))
    _write_or_print("\n".join(lines) + "\n", args.out)


def _cmd_gen_data(args, trace) -> dict:
    dataset, f = generate(args.function, args.d, args.n, args.snr, args.seed)
    write_dataset_csv(dataset, args.out)
    return {"data": str(args.out), "function": f.id, "d": f.d, "n": dataset.n, "shape": f.shape.model_dump(mode="json")}


def _cmd_bench(args, trace) -> dict | None:
    grid = read_json_model(args.grid, BenchGrid)
    rows = run_benchmark(grid, threads=args.threads)
    if args.out is None:
        sys.stdout.write(report_csv(rows, timing=args.timing))
        return None
    write_report(rows, args.out, timing=args.timing)
    return {"report": str(args.out), "cells": len(rows), "failed": sum(r.status != "ok" for r in rows)}


def _cmd_price_call(args, trace) -> dict:
    return {"price": bs_call(args.S, args.K, args.r, args.sigma, args.tau)}


def _cmd_price_basket(args, trace) -> dict:
    spec = read_json_model(args.spec, BasketSpec)
    price, stderr = mc_basket(spec, args.x0, args.samples, args.seed, threads=args.threads)
    return {"price": price, "stderr": stderr, "samples": args.samples}


def _cmd_fdm_basket(args, trace) -> dict:
    spec = read_json_model(args.spec, BasketSpec)
    sol = fdm_basket_2d(spec, args.x_max, args.y_max, args.nx, args.ny, args.nt, keep_history=False)
    result: dict = {"nx": args.nx, "ny": args.ny, "nt": args.nt, "x_max": float(sol.x[-1]), "y_max": float(sol.y[-1])}
    if args.points is not None:
        P = read_points_csv(args.points)
        result["values"] = np.atleast_1d(sol.value(P[:, 0], P[:, 1])).tolist()
    if args.out is not None:
        X, Y = np.meshgrid(sol.x, sol.y, indexing="ij")
        lines = ["x,y,u"] + [f"{a!r},{b!r},{c!r}" for a, b, c in zip(X.ravel().tolist(), Y.ravel().tolist(), sol.final.ravel().tolist())]
        write_text_atomic(args.out, "\n".join(lines) + "\n")
        result["surface"] = str(args.out)
    return result


COMMANDS = {
    "fit": _cmd_fit,
    "cgm": _cmd_cgm,
    "predict": _cmd_predict,
    "smooth": _cmd_smooth,
    "gen-data": _cmd_gen_data,
    "bench": _cmd_bench,
    "price-call": _cmd_price_call,
    "price-basket": _cmd_price_basket,
    "fdm-basket": _cmd_fdm_basket,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    load_dotenv(dotenv_path=Path.cwd() / ".env", override=False)
    try:
        env = Settings()
    except ValidationError as exc:
        print(f"shapereg: invalid environment: {exc}", file=sys.stderr)
        return EXIT_USAGE
    parser = build_parser(env)
    try:
        args = parser.parse_args(argv)
    except _ParserExit as exc:
        return EXIT_OK if exc.status == 0 else EXIT_USAGE
    try:
        configure_logging(env, args.log_level, str(args.log_file) if args.log_file else None)
    except (OSError, ValueError) as exc:
        print(f"shapereg: cannot set up logging: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.threads < 1 or args.blocks < 1:
        parser.print_usage(sys.stderr)
        print("shapereg: --threads and --blocks must be positive", file=sys.stderr)
        return EXIT_USAGE

    with contextlib.ExitStack() as stack:
        trace = stack.enter_context(TraceWriter(args.trace)) if args.trace is not None else None
        try:
            result = COMMANDS[args.command](args, trace)
        except SolverError as exc:
            log.error("solver_failed", extra={"command": args.command, "reason": str(exc)})
            report = exc.report.model_dump() if exc.report is not None and hasattr(exc.report, "model_dump") else None
            sys.stdout.write(dumps({"error": type(exc).__name__, "message": str(exc), "report": report}) + "\n")
            return EXIT_SOLVER
        except (ShapeRegError, ValidationError, OSError) as exc:
            print(f"shapereg {args.command}: {exc}", file=sys.stderr)
            return EXIT_USAGE
    if result is not None:
        sys.stdout.write(dumps(result) + "\n")
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())
