"""Rediscovery benchmark: data generation, solver portfolios and reports."""
from __future__ import annotations

import csv
import io
import json
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exprcore import (
    Dataset,
    DomainError,
    EvalBounds,
    ExpressionTree,
    NodeSet,
    ParseError,
    RangeError,
    compile_tree,
    evaluate,
    parse,
    render,
)
from .model import FormulationConfig, ModelInstance
from .search import SearchParams, res_minlp
from .strech import StrechParams, strech

DEFAULT_OPERATORS = ("+", "-", "*", "/", "sqrt")


class CatalogError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BenchmarkFormula:
    name: str
    expression: str
    tree: ExpressionTree
    ranges: tuple
    depth: int

    @property
    def d(self) -> int:
        return len(self.ranges)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo = np.array([r[0] for r in self.ranges])
        hi = np.array([r[1] for r in self.ranges])
        return rng.uniform(lo, hi, size=(n, self.d))


def formula_from_dict(rec: dict) -> BenchmarkFormula:
    ranges = tuple((float(a), float(b)) for a, b in rec["ranges"])
    try:
        tree = parse(rec["expression"], len(ranges))
    except ParseError as err:
        raise CatalogError(f"{rec['name']}: {err}") from err
    if tree.depth != rec["depth"]:
        raise CatalogError(f"{rec['name']}: declared depth {rec['depth']} but the expression has depth {tree.depth}")
    f = BenchmarkFormula(rec["name"], rec["expression"], tree, ranges, int(rec["depth"]))
    rng = np.random.default_rng(_stable_seed(0, f.name))
    bounds = EvalBounds()
    for row in f.sample(rng, 200):
        try:
            evaluate(tree, bounds, row)
        except (DomainError, RangeError) as err:
            raise CatalogError(f"{rec['name']}: not evaluable on its ranges ({err})") from err
    return f


def load_catalog(path=None) -> list[BenchmarkFormula]:
    if path is None:
        text = resources.files("srminlp").joinpath("data/catalog.json").read_text()
    else:
        text = Path(path).read_text()
    return [formula_from_dict(rec) for rec in json.loads(text)]


def _stable_seed(seed: int, name: str) -> list[int]:
    return [int(seed), zlib.crc32(name.encode())]


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class PortfolioItem:
    mode: str = "exact"  # "exact" or "strech"
    formulation: str = "Imp-F"
    depth: int = 2
    constants: str = "fractional"  # or "integer"
    c_bounds: tuple = (-2.0, 2.0)
    operators: tuple = DEFAULT_OPERATORS
    node_limit: int | None = None
    init_depth: int = 2

    @property
    def label(self) -> str:
        lo, up = self.c_bounds
        return f"{self.mode}:{self.formulation}:d{self.depth}:{self.constants}:[{lo:g},{up:g}]"

    @property
    def approach(self) -> str:
        return "STreCH" if self.mode == "strech" else "MINLP"


def default_portfolio(max_exact_depth: int = 2, strech_depth: int = 3) -> tuple[PortfolioItem, ...]:
    items = []
    for depth in range(1, max_exact_depth + 1):
        for kind in ("fractional", "integer"):
            for cb in ((-2.0, 2.0), (-10.0, 10.0)):
                items.append(PortfolioItem("exact", "Imp-F", depth, kind, cb))
    if strech_depth:
        for kind in ("fractional", "integer"):
            items.append(PortfolioItem("strech", "Imp-F", strech_depth, kind, (-10.0, 10.0)))
    return tuple(items)


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 10
    n_valid: int = 30
    n_test: int = 100
    noise_level: float = 1e-4
    portfolio: tuple = field(default_factory=default_portfolio)
    seed: int = 0
    workers: int = 1
    strech_params: dict = field(default_factory=dict)


# -------------------------------------------------------------- generation

def _draw(formula: BenchmarkFormula, rng, n: int):
    bounds = EvalBounds()
    xs, zs = [], []
    for _ in range(n):
        for attempt in range(100):
            row = formula.sample(rng, 1)[0]
            try:
                z = evaluate(formula.tree, bounds, row)
            except (DomainError, RangeError) as err:
                if attempt == 99:
                    raise DomainError(getattr(err, "node", 1), "sample") from err
                continue
            xs.append(row)
            zs.append(z)
            break
    return np.array(xs), np.array(zs)


def generate(formula: BenchmarkFormula, config: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded train/validation/test sets; only the training targets are noisy."""
    rng = np.random.default_rng(_stable_seed(config.seed, formula.name))
    x, z = _draw(formula, rng, config.n_train)
    z = z * (1.0 + rng.normal(0.0, config.noise_level, size=z.shape)) if config.noise_level else z
    train = Dataset(x, z)
    valid = Dataset(*_draw(formula, rng, config.n_valid))
    test = Dataset(*_draw(formula, rng, config.n_test))
    return train, valid, test


# ----------------------------------------------------------------- metrics

def mse(tree: ExpressionTree, data: Dataset, bounds: EvalBounds | None = None) -> float:
    """Mean squared error; undefined rows count ``(v_up - v_lo)**2``."""
    bounds = bounds or EvalBounds()
    consts = np.array([[tree.consts[n] for n in tree.const_nodes]])
    v, bad = compile_tree(tree, bounds)(data.x, consts.reshape(1, -1))
    r = np.where(bad[0], bounds.v_up - bounds.v_lo, v[0] - data.z)
    return float(np.mean(r * r))


def rmse(tree: ExpressionTree, data: Dataset, bounds: EvalBounds | None = None) -> float:
    return math.sqrt(mse(tree, data, bounds))


_WIDE = EvalBounds(v_lo=-1e300, v_up=1e300, c_lo=-1e300, c_up=1e300, epsilon=1e-300)


def is_discovered(candidate: ExpressionTree, truth: BenchmarkFormula, seed: int = 0, tol: float = 1e-6) -> bool:
    """Max relative deviation below ``tol`` on 1000 seeded points of the ranges."""
    rng = np.random.default_rng(_stable_seed(seed, "grid:" + truth.name))
    X = truth.sample(rng, 1000)
    if candidate.n_vars > truth.d:
        return False

    def values(t):
        c = np.array([[t.consts[n] for n in t.const_nodes]])
        return compile_tree(t, _WIDE)(X, c.reshape(1, -1))

    vt, bt = values(truth.tree)
    vc, bc = values(candidate)
    if bc.any() or bt.any():
        return False
    dev = np.abs(vc[0] - vt[0]) / np.maximum(np.abs(vt[0]), 1e-300)
    return bool(dev.max() < tol)


# --------------------------------------------------------------- portfolio

@dataclass
class Candidate:
    item: str
    approach: str
    expression: str | None
    train_error: float | None
    valid_error: float | None
    seconds: float
    error: str | None = None
    tree: ExpressionTree | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"item": self.item, "approach": self.approach, "expression": self.expression,
                "train_error": self.train_error, "valid_error": self.valid_error,
                "seconds": self.seconds, "error": self.error}


@dataclass
class BenchEntry:
    formula: str
    depth: int
    best: Candidate | None
    test_rmse: float | None
    discovered: bool
    discovered_by: dict
    candidates: list
    seconds: float

    def to_dict(self) -> dict:
        return {"formula": self.formula, "depth": self.depth,
                "best": None if self.best is None else self.best.to_dict(),
                "test_rmse": self.test_rmse, "discovered": self.discovered,
                "discovered_by": self.discovered_by,
                "candidates": [c.to_dict() for c in self.candidates], "seconds": self.seconds}


def run_item(item: PortfolioItem, train: Dataset, valid: Dataset, seed: int, strech_params: dict | None = None) -> Candidate:
    t0 = time.monotonic()
    try:
        lo, up = item.c_bounds
        bounds = EvalBounds(c_lo=lo, c_up=up)
        cfg = FormulationConfig.named(item.formulation)
        integer = item.constants == "integer"
        if item.mode == "exact":
            inst = ModelInstance.create(train, item.operators, depth=item.depth, bounds=bounds, config=cfg)
            res = res_minlp(inst, SearchParams(node_limit=item.node_limit, seed=seed, integer_constants=integer))
        elif item.mode == "strech":
            inst = ModelInstance.create(train, item.operators, depth=item.depth, bounds=bounds, config=cfg)
            sp = StrechParams(init_shape=NodeSet.perfect_tree(min(item.init_depth, item.depth)),
                              full_shape=NodeSet.perfect_tree(item.depth), seed=seed,
                              integer_constants=integer, **(strech_params or {}))
            res, _ = strech(inst, sp)
        else:
            raise ValueError(f"unknown portfolio mode {item.mode!r}")
        if res.tree is None:
            return Candidate(item.label, item.approach, None, None, None, time.monotonic() - t0, res.status)
        return Candidate(item.label, item.approach, render(res.tree), res.train_error, mse(res.tree, valid),
                         time.monotonic() - t0, None, res.tree)
    except Exception as err:  # recorded, never fatal for the portfolio
        return Candidate(item.label, item.approach, None, None, None, time.monotonic() - t0, f"{type(err).__name__}: {err}")


def select(candidates: list) -> Candidate | None:
    """Lowest validation error; earlier portfolio items win ties."""
    ok = [c for c in candidates if c.tree is not None]
    return min(ok, key=lambda c: c.valid_error) if ok else None


def _entry(formula: BenchmarkFormula, candidates: list, test: Dataset, seconds: float, seed: int) -> BenchEntry:
    best = select(candidates)
    by = {}
    for approach in sorted({c.approach for c in candidates}):
        pick = select([c for c in candidates if c.approach == approach])
        by[approach] = bool(pick is not None and is_discovered(pick.tree, formula, seed))
    if best is None:
        return BenchEntry(formula.name, formula.depth, None, None, False, by, candidates, seconds)
    return BenchEntry(formula.name, formula.depth, best, rmse(best.tree, test),
                      is_discovered(best.tree, formula, seed), by, candidates, seconds)


def run_portfolio(formula: BenchmarkFormula, config: ExperimentConfig) -> BenchEntry:
    t0 = time.monotonic()
    train, valid, test = generate(formula, config)
    cands = [run_item(it, train, valid, config.seed, config.strech_params) for it in config.portfolio]
    return _entry(formula, cands, test, time.monotonic() - t0, config.seed)


def _job(args):
    formula, item, config = args
    train, valid, _ = generate(formula, config)
    return run_item(item, train, valid, config.seed, config.strech_params)


def run_benchmark(formulas: list, config: ExperimentConfig) -> "BenchReport":
    """All (formula, item) pairs, in parallel when ``workers > 1``."""
    t0 = time.monotonic()
    jobs = [(f, it, config) for f in formulas for it in config.portfolio]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    entries, p = [], len(config.portfolio)
    for i, f in enumerate(formulas):
        cands = results[i * p:(i + 1) * p]
        _, _, test = generate(f, config)
        entries.append(_entry(f, cands, test, sum(c.seconds for c in cands), config.seed))
    return BenchReport(entries, time.monotonic() - t0)


def depth_bucket(depth: int) -> str:
    if depth <= 2:
        return "<=2"
    if depth == 3:
        return "3"
    return ">=4"


@dataclass
class BenchReport:
    entries: list
    seconds: float = 0.0

    def rates(self) -> list[dict]:
        rows = []
        for bucket in ("<=2", "3", ">=4"):
            group = [e for e in self.entries if depth_bucket(e.depth) == bucket]
            if not group:
                continue
            row = {"depth": bucket, "formulas": len(group)}
            for approach in ("STreCH", "MINLP"):
                have = [e for e in group if approach in e.discovered_by]
                row[approach] = 100.0 * sum(e.discovered_by[approach] for e in have) / len(have) if have else None
            row["overall"] = 100.0 * sum(e.discovered for e in group) / len(group)
            rows.append(row)
        return rows

    def to_dict(self, with_time: bool = True) -> dict:
        entries = []
        for e in self.entries:
            d = e.to_dict()
            if not with_time:
                d.pop("seconds")
                for c in d["candidates"]:
                    c.pop("seconds")
                if d["best"]:
                    d["best"].pop("seconds")
            entries.append(d)
        return {"entries": entries, "discovery_rate": self.rates()}

    def to_json(self, with_time: bool = True) -> str:
        return json.dumps(self.to_dict(with_time), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["depth", "formulas", "STreCH", "MINLP", "overall"])
        for r in self.rates():
            w.writerow([r["depth"], r["formulas"]] + ["" if r[k] is None else f"{r[k]:.1f}" for k in ("STreCH", "MINLP", "overall")])
        return buf.getvalue()
