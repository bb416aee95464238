"""Executable checks of the formulation's tightness claims.

Set relations are decided by exhaustive enumeration of binary points (one
operator or none per node) or by sampling, never by assertion.  Relaxation
strictness is shown with explicit fractional witness points.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exprcore import CONST, Dataset, EvalBounds, NodeSet, is_var, var_index
from .model import (
    BASELINE,
    BINARY,
    IMPROVED,
    RELAXED,
    FormulationConfig,
    ModelInstance,
    ModelPoint,
    build,
    check_point,
    satisfied_mask,
)

TOL = 1e-9
MAX_UNIVERSE = 2**24


class UniverseTooLarge(ValueError):
    pass


@dataclass
class LemmaReport:
    claim: str
    universe: int = 0
    counts: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    witnesses: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    passed: bool = False

    def to_dict(self) -> dict:
        return {"claim": self.claim, "universe": self.universe, "counts": self.counts,
                "verdicts": self.verdicts, "witnesses": self.witnesses, "notes": self.notes,
                "passed": self.passed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class BigMInstance:
    """Merge of k big-M rows ``x <= w_i y_i + M (1 - y_i)`` over m choices."""

    m: int
    k: int
    w: tuple
    M: float

    def __post_init__(self):
        if self.m < 1 or not 1 <= self.k <= self.m:
            raise ValueError("need m >= 1 and 1 <= k <= m")
        if len(self.w) != self.k:
            raise ValueError("w must have k entries")
        if not self.M > max(self.w):
            raise ValueError("M must exceed every w_i")

    def in_s(self, x: float, y: Sequence[float]) -> bool:
        rhs = sum(wi * yi for wi, yi in zip(self.w, y)) + self.M * (1 - sum(y[: self.k]))
        return x <= rhs + TOL

    def in_t(self, x: float, y: Sequence[float]) -> bool:
        return all(x <= wi * y[i] + self.M * (1 - y[i]) + TOL for i, wi in enumerate(self.w))

    def witness(self) -> tuple[float, tuple]:
        j = int(np.argmin(self.w))
        x = self.w[j] / self.m + (self.m - 1) * self.M / self.m
        return x, tuple([1.0 / self.m] * self.m)


# ------------------------------------------------------------ enumeration

def _dummy_data(ops: Iterable[str]) -> Dataset:
    d = max([var_index(o) for o in ops if is_var(o)], default=1)
    return Dataset(np.ones((1, d)), np.ones(1))


def _instance(ops, shape: NodeSet, variant: str, redundancy=False) -> ModelInstance:
    cfg = FormulationConfig(variant, include_redundancy=redundancy, include_symmetry=False, include_implication=False)
    return ModelInstance(_dummy_data(ops), tuple(ops), shape, EvalBounds(), cfg)


def binary_universe(instance: ModelInstance) -> np.ndarray:
    """All 0/1 points with at most one operator per node, columns as ``instance.pairs``."""
    pairs = instance.pairs
    col = {p: j for j, p in enumerate(pairs)}
    per_node = [[None] + [(n, o) for o in instance.admissible(n)] for n in instance.shape]
    size = math.prod(len(c) for c in per_node)
    if size > MAX_UNIVERSE:
        raise UniverseTooLarge(f"{size} points exceed the enumeration cap {MAX_UNIVERSE}")
    Y = np.zeros((size, len(pairs)), dtype=np.int8)
    for r, combo in enumerate(itertools.product(*per_node)):
        for p in combo:
            if p is not None:
                Y[r, col[p]] = 1
    return Y


def _mask(system, Y, labels=None) -> np.ndarray:
    sub = system if labels is None else system.select(labels=labels)
    A, const, senses, _ = sub.y_matrix()
    return satisfied_mask(Y.astype(float), A, const, senses, TOL)


def _describe(instance: ModelInstance, row) -> dict:
    return {f"{n}": o for (n, o), v in zip(instance.pairs, row) if v}


IMPROVED_TREE = ("grammar1", "grammar2", "cozad:grammar1", "cozad:grammar2")
BASELINE_TREE = tuple(f"cozad:grammar{i}" for i in range(1, 7))
PAPER_FIG_B = {1: "x1", 2: "x2", 7: "x3"}
# same picture with the stray left operand one level lower
SHIFTED_FIG_B = {1: "x1", 4: "x2", 7: "x3"}


def verify_tree_lemma(ops: Iterable[str], shape: NodeSet) -> LemmaReport:
    """Improved tree rows (S) against the baseline rows (T) on every binary y."""
    ops = tuple(ops)
    imp = _instance(ops, shape, IMPROVED)
    base = _instance(ops, shape, BASELINE)
    Y = binary_universe(imp)
    s = _mask(build(imp), Y, IMPROVED_TREE)
    t = _mask(build(base), Y, BASELINE_TREE)
    rep = LemmaReport("tree-defining", universe=len(Y))
    rep.counts = {"S": int(s.sum()), "T": int(t.sum()), "T_minus_S": int((t & ~s).sum())}
    subset = bool(not (s & ~t).any())
    strict = subset and bool((t & ~s).any())
    rep.verdicts = {"S_subset_T": subset, "strict": strict}
    diff = np.flatnonzero(t & ~s)
    root_cols = [j for j, (n, _) in enumerate(imp.pairs) if n == 1]
    rooted = [r for r in diff if Y[r, root_cols].any()]
    rep.witnesses = [_describe(imp, Y[r]) for r in (rooted or list(diff))[:3]]
    bsys = build(base).select(labels=BASELINE_TREE)
    isys = build(imp).select(labels=IMPROVED_TREE)
    for name, assign in (("fig_b", PAPER_FIG_B), ("fig_b_shifted", SHIFTED_FIG_B)):
        if not all(n in shape and o in ops for n, o in assign.items()):
            continue
        yp = ModelPoint(y={(n, o): 1.0 for n, o in assign.items()})
        in_t = check_point(bsys, yp, BINARY, TOL)
        rep.verdicts[f"{name}_in_T"] = in_t.feasible
        rep.verdicts[f"{name}_in_S"] = check_point(isys, yp, BINARY, TOL).feasible
        if not in_t.feasible:
            desc = ", ".join(f"y{n}^{o}" for n, o in assign.items())
            rep.notes.append(f"{desc} = 1 violates " + ", ".join(sorted(in_t.labels())) + " of the baseline rows")
    if not strict and subset:
        rep.notes.append("S equals T on this universe")
    rep.passed = strict
    return rep


def verify_bigm_lemma(inst: BigMInstance, samples: int = 1000, seed: int = 0) -> LemmaReport:
    """Binary equality, sampled inclusion and the explicit fractional witness."""
    rep = LemmaReport("big-M merge", universe=inst.m)
    lo, hi = min(inst.w) - 1.0, inst.M + 1.0
    grid = sorted(set(np.linspace(lo, hi, 201).tolist()) | set(inst.w) | {inst.M})
    equal = True
    for i in range(inst.m):
        e = [0.0] * inst.m
        e[i] = 1.0
        for x in grid:
            if inst.in_s(x, e) != inst.in_t(x, e):
                equal = False
    rng = np.random.default_rng(seed)
    subset, in_s = True, 0
    for _ in range(samples):
        y = rng.exponential(size=inst.m)
        y = y / y.sum()
        x = float(rng.uniform(lo, hi))
        if inst.in_s(x, y):
            in_s += 1
            if not inst.in_t(x, y):
                subset = False
    xw, yw = inst.witness()
    gap_s = xw - (sum(w * yi for w, yi in zip(inst.w, yw)) + inst.M * (1 - sum(yw[: inst.k])))
    witness_t = inst.in_t(xw, yw)
    separates = witness_t and gap_s > TOL
    rep.counts = {"grid_points": len(grid) * inst.m, "samples": samples, "samples_in_S": in_s}
    rep.verdicts = {"binary_equal": equal, "sampled_subset": subset, "witness_in_T": witness_t,
                    "witness_outside_S": gap_s > TOL, "strict": separates}
    rep.witnesses = [{"x": xw, "y": list(yw), "S_violation": gap_s}]
    if inst.k == 1:
        rep.notes.append("k = 1: the merged row equals the single row, so the sets coincide")
    rep.passed = equal and subset and separates
    return rep


def random_bigm_instances(count: int, seed: int = 0, max_m: int = 5) -> list[BigMInstance]:
    """Random instances with at least two merged rows (strictness needs k >= 2)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        m = int(rng.integers(2, max_m + 1))
        k = int(rng.integers(2, m + 1))
        w = tuple(float(v) for v in np.round(rng.uniform(-5, 5, size=k), 6))
        M = float(max(w) + rng.uniform(0.5, 10))
        out.append(BigMInstance(m, k, w, M))
    return out


REDUN_MERGED = ("redun1",)
REDUN_SEPARATE = ("cozad:redun1", "cozad:redun2", "cozad:redun3")


def verify_redundancy_lemma(ops: Iterable[str], shape: NodeSet) -> LemmaReport:
    """Merged right-constant row against the three separate baseline rows."""
    ops = tuple(ops)
    imp = _instance(ops, shape, IMPROVED, redundancy=True)
    base = _instance(ops, shape, BASELINE, redundancy=True)
    Y = binary_universe(imp)
    isys, bsys = build(imp), build(base)
    fb = _mask(isys, Y, IMPROVED_TREE)
    merged = _mask(isys, Y, REDUN_MERGED) & fb
    separate = _mask(bsys, Y, REDUN_SEPARATE) & fb
    rep = LemmaReport("redundancy merge", universe=len(Y))
    rep.counts = {"F_B": int(fb.sum()), "merged": int(merged.sum()), "separate": int(separate.sum())}
    equal = bool((merged == separate).all())
    rep.verdicts = {"binary_equal": equal}
    if CONST not in ops:
        rep.notes.append("no constant operand: both systems are empty")
        rep.verdicts["strict"] = False
        rep.passed = equal
        return rep
    point = _redundancy_witness(imp)
    if point is None:
        rep.verdicts["strict"] = False
        rep.notes.append("no fractional separator exists for this operator set")
        rep.passed = False
        return rep
    tree_sys = isys.select(labels=IMPROVED_TREE)
    in_fc = check_point(tree_sys, point, RELAXED, TOL).feasible
    sep_ok = check_point(bsys.select(labels=REDUN_SEPARATE), point, RELAXED, TOL).feasible
    merged_rep = check_point(isys.select(labels=REDUN_MERGED), point, RELAXED, TOL)
    strict = in_fc and sep_ok and not merged_rep.feasible
    rep.verdicts.update({"witness_in_F_C": in_fc, "witness_satisfies_separate": sep_ok,
                         "witness_violates_merged": not merged_rep.feasible, "strict": strict})
    rep.witnesses = [{"y": {f"{n}:{o}": v for (n, o), v in sorted(point.y.items()) if v},
                      "merged_violation": max((v.residual for v in merged_rep.violations), default=0.0)}]
    rep.passed = equal and strict
    return rep


def _redundancy_witness(inst: ModelInstance) -> ModelPoint | None:
    """Uniform mass at the root over its operators plus one variable.

    The right child takes the largest constant mass that keeps the
    variable total at one and the separate rows satisfied.
    """
    shape = inst.shape
    if shape.is_terminal(1) or 2 not in shape or 3 not in shape:
        return None
    variables = inst.variables
    if not variables:
        return None
    x = variables[0]
    ops = [o for o in inst.ops if o in inst.binary or o in inst.unary]
    choices = ops + [x]
    m = len(choices)
    y = {(1, o): 1.0 / m for o in choices}
    b_mass = len(inst.binary) / m
    r_mass = len(ops) / m
    var_mass = 1.0 / m + b_mass + r_mass
    # cap from the separate rows: cst <= 1 - sum_U, 1 - y(-), 1 - y(/)
    caps = [r_mass, var_mass - 1.0]
    if inst.unary:
        caps.append(1.0 - len(inst.unary) / m)
    caps += [1.0 - 1.0 / m for o in ("-", "/") if o in inst.ops]
    t = min(caps)
    if t <= TOL:
        return None
    if b_mass:
        y[(2, x)] = b_mass
    y[(3, CONST)] = t
    if r_mass - t > 0:
        y[(3, x)] = r_mass - t
    return ModelPoint(y=y)


def example_instance(implication: bool = False) -> ModelInstance:
    data = Dataset(np.array([[-1.0]]), np.array([5.0]))
    cfg = FormulationConfig(IMPROVED, include_redundancy=True, include_symmetry=True, include_implication=implication)
    return ModelInstance(data, ("sqrt", "x1"), NodeSet([1, 3], full=False), EvalBounds(), cfg)


def example_point(y_sqrt=0.9, y1_x1=0.1, y3_x1=0.9, v11=0.0, v13=-0.9) -> ModelPoint:
    return ModelPoint(
        y={(1, "sqrt"): y_sqrt, (1, "x1"): y1_x1, (3, "x1"): y3_x1},
        v={(0, 1): v11, (0, 3): v13},
    )


def verify_implication_example() -> LemmaReport:
    """The relaxed point that only the implication cut removes."""
    rep = LemmaReport("implication example", universe=1)
    plain = build(example_instance(False))
    cut = build(example_instance(True))
    point = example_point()
    relaxed = check_point(plain, point, RELAXED, TOL)
    cut_rows = cut.select(families=["implication"])
    cut_rep = check_point(cut_rows, point, RELAXED, TOL)
    residual = max((v.residual for v in cut_rep.violations), default=0.0)
    rep.counts = {"constraints": len(plain), "implication_cuts": len(cut_rows)}
    rep.verdicts = {"relaxed_feasible": relaxed.feasible, "cut_violated": not cut_rep.feasible,
                    "cut_residual": residual}
    rep.witnesses = [{"y_sqrt_1": 0.9, "y_x1_1": 0.1, "y_x1_3": 0.9, "v_1_1": 0.0, "v_1_3": -0.9}]
    rep.passed = relaxed.feasible and abs(residual - 0.8) <= 1e-12
    return rep


def verify_all(seed: int = 0, bigm_instances: int = 20) -> list[LemmaReport]:
    reports = [verify_tree_lemma(("+", "sqrt", "x1", "x2", "x3"), NodeSet.perfect_tree(2))]
    for inst in random_bigm_instances(bigm_instances, seed):
        reports.append(verify_bigm_lemma(inst, samples=500, seed=seed))
    reports.append(verify_redundancy_lemma(("+", "-", "sqrt", "x1", CONST), NodeSet.perfect_tree(1)))
    reports.append(verify_redundancy_lemma(("+", "/", "x1", CONST), NodeSet.perfect_tree(2)))
    reports.append(verify_implication_example())
    return reports
