"""Command-line front end.

Every subcommand writes a JSON result (to ``--out`` or stdout).  Wall-clock
figures never enter that JSON; ``--timing`` sends them to a separate file so
that identical invocations give byte-identical results.

Exit codes: 0 success, 2 solver failure, 3 verification failure, 64 usage.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys

from .bench import ExperimentConfig, default_portfolio, load_catalog, mse, rmse, run_benchmark
from .exprcore import Dataset, EvalBounds, NodeSet, ParseError, TreeError, parse, render
from .lemmalab import verify_all
from .model import ConfigError, FormulationConfig, ModelInstance, export_model
from .search import InstanceError, SearchParams, res_minlp
from .strech import StrechParams, strech

EXIT_OK = 0
EXIT_SOLVER = 2
EXIT_VERIFY = 3
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ops(text: str) -> tuple[str, ...]:
    ops = tuple(o.strip() for o in text.split(",") if o.strip())
    if not ops:
        raise argparse.ArgumentTypeError("empty operator list")
    return ops


def _add_model_args(p, depth: int):
    p.add_argument("--data", required=True, help="CSV with header x1,...,xd,z")
    p.add_argument("--depth", type=int, default=depth, help="maximum tree depth (default: %(default)s)")
    p.add_argument("--ops", type=_ops, default=("+", "-", "*", "/"),
                   help="comma-separated operators from +,-,*,/,sqrt,exp,log (default: +,-,*,/)")
    p.add_argument("--no-constants", action="store_true", help="leave the constant operand out")
    p.add_argument("--formulation", default="Imp-F",
                   help="Imp-F/R/S/N or Coz-F/R/S/N (default: %(default)s)")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help="weight of the node-count regularizer (default: %(default)s)")
    _add_bounds_args(p)


def _add_bounds_args(p):
    p.add_argument("--c-lo", type=float, default=-2.0, help="constant lower bound (default: %(default)s)")
    p.add_argument("--c-up", type=float, default=2.0, help="constant upper bound (default: %(default)s)")
    p.add_argument("--v-lo", type=float, default=-10.0, help="node value lower bound (default: %(default)s)")
    p.add_argument("--v-up", type=float, default=10.0, help="node value upper bound (default: %(default)s)")
    p.add_argument("--domain-eps", type=float, default=0.01,
                   help="division, sqrt and log margin (default: %(default)s)")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--out", help="result JSON path (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="srminlp", description="Symbolic regression by exact structure search and local branching.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("solve", help="exact restricted solve on a dataset")
    _add_model_args(p, depth=2)
    _add_common(p)
    p.add_argument("--node-limit", type=int, default=None, help="node budget gamma (default: unlimited)")
    p.add_argument("--time-limit", type=float, default=None, help="seconds (default: unlimited)")
    p.add_argument("--anchor", help="anchor expression, or a file holding one, for the distance window")
    p.add_argument("--k1", type=int, default=0, help="lower distance from the anchor (default: %(default)s)")
    p.add_argument("--k2", type=int, default=None, help="upper distance from the anchor (default: unrestricted)")
    p.add_argument("--beta", type=int, default=None, help="fix level relative to the anchor (default: none)")
    p.add_argument("--epsilon", type=float, default=0.0, help="stop once the error drops below this (default: %(default)s)")
    p.add_argument("--integer-constants", action="store_true", help="round fitted constants to integers")

    p = sub.add_parser("strech", help="sequential tree construction heuristic")
    _add_model_args(p, depth=3)
    _add_common(p)
    p.add_argument("--init-depth", type=int, default=2, help="depth of the initial exact solve (default: %(default)s)")
    p.add_argument("--k-init", type=int, default=2, help="initial neighborhood size (default: %(default)s)")
    p.add_argument("--k-max", type=int, default=6, help="largest neighborhood size (default: %(default)s)")
    p.add_argument("--beta-init", type=int, default=1, help="initial fix level (default: %(default)s)")
    p.add_argument("--beta-max", type=int, default=3, help="largest fix level (default: %(default)s)")
    p.add_argument("--gamma-init", type=int, default=10**3, help="initial node limit (default: %(default)s)")
    p.add_argument("--gamma-max", type=int, default=10**5, help="largest node limit (default: %(default)s)")
    p.add_argument("--epsilon", type=float, default=0.0, help="stop once the error drops below this (default: %(default)s)")
    p.add_argument("--improve-factor", type=float, default=0.999,
                   help="relative decrease that ends a neighborhood solve (default: %(default)s)")
    p.add_argument("--time-limit", type=float, default=None, help="seconds (default: unlimited)")
    p.add_argument("--integer-constants", action="store_true", help="round fitted constants to integers")
    p.add_argument("--trace", help="also write the timed trace as JSON lines here")

    p = sub.add_parser("export", help="write the formulation as .srmodel.json")
    _add_model_args(p, depth=2)
    p.add_argument("--out", help="output path (default: stdout)")

    p = sub.add_parser("bench", help="portfolio protocol over the formula catalog")
    _add_common(p)
    p.add_argument("--catalog", help="catalog JSON (default: the bundled one)")
    p.add_argument("--formulas", help="comma-separated formula names (default: all)")
    p.add_argument("--max-depth", type=int, default=None, help="skip formulas deeper than this")
    p.add_argument("--n-train", type=int, default=10, help="training points (default: %(default)s)")
    p.add_argument("--n-valid", type=int, default=30, help="validation points (default: %(default)s)")
    p.add_argument("--n-test", type=int, default=100, help="testing points (default: %(default)s)")
    p.add_argument("--noise", type=float, default=1e-4, help="relative noise level (default: %(default)s)")
    p.add_argument("--exact-depth", type=int, default=2, help="deepest exact portfolio item (default: %(default)s)")
    p.add_argument("--strech-depth", type=int, default=3, help="depth of strech items, 0 for none (default: %(default)s)")
    p.add_argument("--workers", type=int, default=1, help="parallel processes (default: %(default)s)")
    p.add_argument("--csv", help="write the discovery-rate table here")
    p.add_argument("--timing", help="write the report with wall times here")

    p = sub.add_parser("verify", help="check the formulation lemmas")
    _add_common(p)
    p.add_argument("--bigm-instances", type=int, default=20, help="random big-M instances (default: %(default)s)")

    p = sub.add_parser("eval", help="RMSE of an expression on a dataset")
    p.add_argument("--data", required=True, help="CSV with header x1,...,xd,z")
    p.add_argument("--expr", required=True, help="infix expression over x1..xd")
    p.add_argument("--out", help="result JSON path (default: none)")
    _add_bounds_args(p)
    return ap


# ------------------------------------------------------------------ helpers

def _read_data(path) -> Dataset:
    try:
        return Dataset.from_csv(path)
    except OSError as err:
        raise UsageError(f"cannot read {path}: {err.strerror}") from None
    except (ValueError, IndexError) as err:
        raise UsageError(f"bad dataset {path}: {err}") from None


def _bounds(a) -> EvalBounds:
    try:
        return EvalBounds(a.v_lo, a.v_up, a.c_lo, a.c_up, a.domain_eps)
    except ValueError as err:
        raise UsageError(str(err)) from None


def _instance(a, data: Dataset) -> ModelInstance:
    if a.depth < 0:
        raise UsageError("depth must be nonnegative")
    try:
        cfg = FormulationConfig.named(a.formulation, lam=a.lam)
        return ModelInstance.create(data, a.ops, depth=a.depth, bounds=_bounds(a), config=cfg,
                                    constants=not a.no_constants)
    except ConfigError as err:
        raise UsageError(str(err)) from None


def _expression_arg(text: str) -> str:
    if os.path.isfile(text):
        with open(text) as fh:
            return fh.read().strip()
    return text


def _emit(text: str, path) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _finite(x):
    return x if x is not None and math.isfinite(x) else None


# ---------------------------------------------------------------- commands

def cmd_solve(a) -> int:
    data = _read_data(a.data)
    inst = _instance(a, data)
    window = None
    if a.anchor is not None:
        try:
            anchor = parse(_expression_arg(a.anchor), data.d, inst.shape)
        except (ParseError, TreeError) as err:
            raise UsageError(f"bad anchor: {err}") from None
        k2 = a.k2 if a.k2 is not None else 2 * len(inst.shape)
        window = (anchor, a.k1, k2)
    elif a.k2 is not None or a.beta is not None:
        raise UsageError("--k2 and --beta need --anchor")
    try:
        params = SearchParams(node_limit=a.node_limit, time_limit=a.time_limit, epsilon_opt=a.epsilon,
                              distance=window, fix_level=a.beta, seed=a.seed,
                              integer_constants=a.integer_constants)
        res = res_minlp(inst, params)
    except ValueError as err:
        if isinstance(err, InstanceError):
            _emit(_dump({"expression": None, "status": "InstanceError", "error": str(err)}), a.out)
            return EXIT_SOLVER
        raise UsageError(str(err)) from None
    out = res.to_dict()
    out["formulation"] = inst.config.name
    out["train_error"] = _finite(res.train_error)
    _emit(_dump(out), a.out)
    return EXIT_OK if res.tree is not None else EXIT_SOLVER


def cmd_strech(a) -> int:
    data = _read_data(a.data)
    inst = _instance(a, data)
    if not 0 <= a.init_depth <= a.depth:
        raise UsageError("need 0 <= --init-depth <= --depth")
    try:
        params = StrechParams(k_init=a.k_init, k_max=a.k_max, beta_init=a.beta_init, beta_max=a.beta_max,
                              gamma_init=a.gamma_init, gamma_max=a.gamma_max, epsilon_opt=a.epsilon,
                              time_limit=a.time_limit, init_shape=NodeSet.perfect_tree(a.init_depth),
                              full_shape=NodeSet.perfect_tree(a.depth), improve_factor=a.improve_factor,
                              seed=a.seed, integer_constants=a.integer_constants)
    except ValueError as err:
        raise UsageError(str(err)) from None
    try:
        res, trace = strech(inst, params)
    except InstanceError as err:
        _emit(_dump({"expression": None, "status": "InstanceError", "error": str(err)}), a.out)
        return EXIT_SOLVER
    if a.trace:
        with open(a.trace, "w") as fh:
            fh.write(trace.to_jsonl())
    out = {"expression": render(res.tree) if res.tree is not None else None,
           "status": res.status,
           "errors": {"train_mse": _finite(res.train_error),
                      "train_rmse": _finite(math.sqrt(res.train_error)) if res.tree is not None else None},
           "trace": [e.to_dict(with_time=False) for e in trace.entries]}
    _emit(_dump(out), a.out)
    return EXIT_OK if res.tree is not None else EXIT_SOLVER


def cmd_export(a) -> int:
    inst = _instance(a, _read_data(a.data))
    _emit(export_model(inst), a.out)
    return EXIT_OK


def cmd_bench(a) -> int:
    try:
        catalog = load_catalog(a.catalog)
    except OSError as err:
        raise UsageError(f"cannot read catalog: {err}") from None
    except ValueError as err:
        raise UsageError(f"bad catalog: {err}") from None
    if a.formulas:
        wanted = [n.strip() for n in a.formulas.split(",") if n.strip()]
        known = {f.name: f for f in catalog}
        missing = [n for n in wanted if n not in known]
        if missing:
            raise UsageError("unknown formulas: " + ", ".join(missing))
        catalog = [known[n] for n in wanted]
    if a.max_depth is not None:
        catalog = [f for f in catalog if f.depth <= a.max_depth]
    if a.workers < 1:
        raise UsageError("--workers must be >= 1")
    config = ExperimentConfig(n_train=a.n_train, n_valid=a.n_valid, n_test=a.n_test, noise_level=a.noise,
                              portfolio=default_portfolio(a.exact_depth, a.strech_depth),
                              seed=a.seed, workers=a.workers)
    report = run_benchmark(catalog, config)
    _emit(report.to_json(with_time=False) + "\n", a.out)
    if a.csv:
        with open(a.csv, "w") as fh:
            fh.write(report.to_csv())
    if a.timing:
        with open(a.timing, "w") as fh:
            fh.write(report.to_json(with_time=True) + "\n")
    sys.stderr.write(report.to_csv())
    return EXIT_OK


def cmd_verify(a) -> int:
    reports = verify_all(seed=a.seed, bigm_instances=a.bigm_instances)
    for r in reports:
        sys.stderr.write(f"{'PASS' if r.passed else 'FAIL'}  {r.claim}\n")
    _emit(_dump([r.to_dict() for r in reports]), a.out)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


def cmd_eval(a) -> int:
    data = _read_data(a.data)
    bounds = _bounds(a)
    try:
        tree = parse(_expression_arg(a.expr), data.d)
    except (ParseError, TreeError) as err:
        raise UsageError(f"bad expression: {err}") from None
    err = rmse(tree, data, bounds)
    print(f"{err:.12g}")
    if a.out:
        _emit(_dump({"expression": render(tree), "rmse": err, "mse": mse(tree, data, bounds)}), a.out)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "strech": cmd_strech, "export": cmd_export,
            "bench": cmd_bench, "verify": cmd_verify, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("srminlp: a subcommand is required (" + ", ".join(COMMANDS) + ")")
        return COMMANDS[args.command](args)
    except UsageError as err:
        sys.stderr.write(f"{err}\n")
        return EXIT_USAGE
    except SystemExit as ex:  # --help
        return ex.code if isinstance(ex.code, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
