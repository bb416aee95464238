"""Point-evaluable MINLP formulation of expression-tree search.

Every constraint is stored as ``body sense 0`` where ``body`` is a constant
plus a sum of terms over the decision variables.  A term is linear in one
variable, a product of two variables (a square when both keys agree), or the
exponential of one variable.  That covers every family of the formulation.

Variable keys are tuples: ``("y", n, op)``, ``("c", n)`` and ``("v", i, n)``
with a 0-based data index ``i``.
"""
from __future__ import annotations

import ast
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exprcore import (
    BINARY_OPS,
    CONST,
    UNARY_OPS,
    Dataset,
    EvalBounds,
    ExpressionTree,
    NodeSet,
    arity,
    is_var,
    node_values,
    operator_rank,
    var,
    var_index,
)

IMPROVED = "improved"
BASELINE = "baseline"

FAMILIES = ("tree", "value", "redundancy", "implication", "symmetry", "distance")

# inverse unary pairs available in this operator vocabulary
INVERSE_PAIRS = (("exp", "log"),)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FormulationConfig:
    variant: str = IMPROVED
    include_redundancy: bool = True
    include_symmetry: bool = True
    include_implication: bool = True
    lam: float = 0.0

    def __post_init__(self):
        if self.variant not in (IMPROVED, BASELINE):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.lam < 0:
            raise ConfigError("regularization weight must be nonnegative")

    @classmethod
    def named(cls, name: str, lam: float = 0.0) -> "FormulationConfig":
        """One of Imp-F/R/S/N or Coz-F/R/S/N."""
        try:
            method, kind = name.split("-")
            variant = {"Imp": IMPROVED, "Coz": BASELINE}[method]
            red, sym = {"F": (True, True), "R": (True, False), "S": (False, True), "N": (False, False)}[kind]
        except (ValueError, KeyError):
            raise ConfigError(f"unknown formulation name {name!r}") from None
        return cls(variant, red, sym, include_implication=(variant == IMPROVED and kind == "F"), lam=lam)

    @property
    def name(self) -> str:
        method = "Imp" if self.variant == IMPROVED else "Coz"
        kind = {(True, True): "F", (True, False): "R", (False, True): "S", (False, False): "N"}[
            (self.include_redundancy, self.include_symmetry)
        ]
        return f"{method}-{kind}"


@dataclass(frozen=True, eq=False)
class ModelInstance:
    data: Dataset
    ops: tuple[str, ...]
    shape: NodeSet
    bounds: EvalBounds = field(default_factory=EvalBounds)
    config: FormulationConfig = field(default_factory=FormulationConfig)

    def __post_init__(self):
        ops = tuple(sorted(set(self.ops), key=_rank_or_raise))
        for op in ops:
            if is_var(op) and var_index(op) > self.data.d:
                raise ConfigError(f"{op} exceeds the data dimension {self.data.d}")
        object.__setattr__(self, "ops", ops)

    @classmethod
    def create(
        cls,
        data: Dataset,
        operators: Iterable[str] = ("+", "-", "*", "/"),
        shape: NodeSet | None = None,
        depth: int | None = None,
        bounds: EvalBounds | None = None,
        config: FormulationConfig | None = None,
        constants: bool = True,
    ) -> "ModelInstance":
        if shape is None:
            shape = NodeSet.perfect_tree(2 if depth is None else depth)
        ops = list(operators) + [var(j) for j in range(1, data.d + 1)]
        if constants:
            ops.append(CONST)
        return cls(data, tuple(ops), shape, bounds or EvalBounds(), config or FormulationConfig())

    def replace(self, **kw) -> "ModelInstance":
        args = dict(data=self.data, ops=self.ops, shape=self.shape, bounds=self.bounds, config=self.config)
        args.update(kw)
        return ModelInstance(**args)

    @property
    def binary(self) -> tuple[str, ...]:
        return tuple(o for o in self.ops if o in BINARY_OPS)

    @property
    def unary(self) -> tuple[str, ...]:
        return tuple(o for o in self.ops if o in UNARY_OPS)

    @property
    def operands(self) -> tuple[str, ...]:
        return tuple(o for o in self.ops if arity(o) == 0)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(o for o in self.ops if is_var(o))

    @property
    def has_const(self) -> bool:
        return CONST in self.ops

    def admissible(self, n: int) -> tuple[str, ...]:
        return self.operands if self.shape.is_terminal(n) else self.ops

    @property
    def pairs(self) -> tuple[tuple[int, str], ...]:
        """The admissible (node, operator) pairs, i.e. the y variables."""
        return tuple((n, o) for n in self.shape for o in self.admissible(n))


def _rank_or_raise(op: str):
    try:
        return operator_rank(op)
    except ValueError:
        raise ConfigError(f"operator {op!r} has no constraint template") from None


# ------------------------------------------------------------------ records

def yk(n: int, op: str) -> tuple:
    return ("y", n, op)


def ck(n: int) -> tuple:
    return ("c", n)


def vk(i: int, n: int) -> tuple:
    return ("v", i, n)


@dataclass(frozen=True)
class Term:
    coef: float
    kind: str  # "lin", "prod" or "exp"
    keys: tuple


@dataclass(frozen=True)
class Constraint:
    family: str
    label: str
    node: int | None
    row: int | None
    terms: tuple[Term, ...]
    const: float
    sense: str  # "<=", ">=" or "=="

    @property
    def linear(self) -> bool:
        return all(t.kind == "lin" for t in self.terms)

    @property
    def y_only(self) -> bool:
        return all(t.kind == "lin" and t.keys[0][0] == "y" for t in self.terms)

    def body(self, point: "ModelPoint") -> float:
        total = self.const
        for t in self.terms:
            if t.kind == "lin":
                total += t.coef * point.value(t.keys[0])
            elif t.kind == "prod":
                total += t.coef * point.value(t.keys[0]) * point.value(t.keys[1])
            else:
                total += t.coef * math.exp(point.value(t.keys[0]))
        return total

    def residual(self, point: "ModelPoint") -> float:
        b = self.body(point)
        if self.sense == "<=":
            return max(0.0, b)
        if self.sense == ">=":
            return max(0.0, -b)
        return abs(b)

    def expression(self) -> str:
        return _format_terms(self.terms, self.const)


def _format_terms(terms: Sequence[Term], const: float) -> str:
    parts = []
    for t in terms:
        if t.kind == "lin":
            parts.append(f"{t.coef!r}*{var_name(t.keys[0])}")
        elif t.kind == "prod":
            parts.append(f"{t.coef!r}*{var_name(t.keys[0])}*{var_name(t.keys[1])}")
        else:
            parts.append(f"{t.coef!r}*exp({var_name(t.keys[0])})")
    if const != 0.0 or not parts:
        parts.append(repr(float(const)))
    return " + ".join(parts)


_TAG = {"+": "plus", "-": "minus", "*": "times", "/": "div"}
_UNTAG = {v: k for k, v in _TAG.items()}


def var_name(key: tuple) -> str:
    if key[0] == "y":
        return f"y_{key[1]}_{_TAG.get(key[2], key[2])}"
    if key[0] == "c":
        return f"c_{key[1]}"
    return f"v_{key[1] + 1}_{key[2]}"


def var_key(name: str) -> tuple:
    kind, *rest = name.split("_")
    if kind == "y":
        return ("y", int(rest[0]), _UNTAG.get(rest[1], rest[1]))
    if kind == "c":
        return ("c", int(rest[0]))
    if kind == "v":
        return ("v", int(rest[0]) - 1, int(rest[1]))
    raise ValueError(f"bad variable name {name!r}")


@dataclass
class ModelPoint:
    y: dict = field(default_factory=dict)  # (n, op) -> [0, 1]
    c: dict = field(default_factory=dict)  # n -> real
    v: dict = field(default_factory=dict)  # (i, n) -> real

    def value(self, key: tuple) -> float:
        if key[0] == "y":
            return self.y.get((key[1], key[2]), 0.0)
        if key[0] == "c":
            return self.c.get(key[1], 0.0)
        return self.v.get((key[1], key[2]), 0.0)


@dataclass(frozen=True)
class Violation:
    index: int
    family: str
    label: str
    node: int | None
    row: int | None
    residual: float

    def to_dict(self) -> dict:
        return {"constraint": self.index, "family": self.family, "label": self.label,
                "node": self.node, "row": self.row, "residual": self.residual}


@dataclass(frozen=True)
class FeasibilityReport:
    violations: tuple[Violation, ...]

    @property
    def feasible(self) -> bool:
        return not self.violations

    def labels(self) -> set[str]:
        return {v.label for v in self.violations}

    def families(self) -> set[str]:
        return {v.family for v in self.violations}

    def to_json(self) -> str:
        return json.dumps([v.to_dict() for v in self.violations], indent=2)


@dataclass(frozen=True, eq=False)
class ConstraintSystem:
    instance: ModelInstance
    constraints: tuple[Constraint, ...]

    def __len__(self) -> int:
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    def count(self, family: str | None = None, labels: Iterable[str] | None = None) -> int:
        labels = None if labels is None else set(labels)
        return sum(
            1
            for c in self.constraints
            if (family is None or c.family == family) and (labels is None or c.label in labels)
        )

    def label_counts(self) -> Counter:
        return Counter(c.label for c in self.constraints)

    def select(self, families: Iterable[str] | None = None, labels: Iterable[str] | None = None) -> "ConstraintSystem":
        fam = None if families is None else set(families)
        lab = None if labels is None else set(labels)
        kept = tuple(
            c for c in self.constraints
            if (fam is None or c.family in fam) and (lab is None or c.label in lab)
        )
        return ConstraintSystem(self.instance, kept)

    def extend(self, extra: Iterable[Constraint]) -> "ConstraintSystem":
        return ConstraintSystem(self.instance, self.constraints + tuple(extra))

    def y_matrix(self, pairs: Sequence[tuple[int, str]] | None = None):
        """Dense form ``(A, const, senses)`` of the y-only linear constraints.

        Row ``r`` evaluates as ``Y @ A[r] + const[r]`` for 0/1 or fractional
        rows ``Y`` ordered like ``pairs``.
        """
        pairs = list(pairs if pairs is not None else self.instance.pairs)
        col = {yk(n, o): j for j, (n, o) in enumerate(pairs)}
        rows = [c for c in self.constraints if c.y_only]
        A = np.zeros((len(rows), len(pairs)))
        const = np.zeros(len(rows))
        for r, c in enumerate(rows):
            const[r] = c.const
            for t in c.terms:
                A[r, col[t.keys[0]]] += t.coef
        return A, const, [c.sense for c in rows], rows


def satisfied_mask(Y: np.ndarray, A: np.ndarray, const: np.ndarray, senses, tol: float = 1e-9) -> np.ndarray:
    """Per-row feasibility of the points ``Y`` against a dense y system."""
    if A.shape[0] == 0:
        return np.ones(Y.shape[0], dtype=bool)
    body = Y @ A.T + const
    ok = np.ones(Y.shape[0], dtype=bool)
    senses = np.array(senses)
    le, ge, eq = senses == "<=", senses == ">=", senses == "=="
    if le.any():
        ok &= (body[:, le] <= tol).all(axis=1)
    if ge.any():
        ok &= (body[:, ge] >= -tol).all(axis=1)
    if eq.any():
        ok &= (np.abs(body[:, eq]) <= tol).all(axis=1)
    return ok


# ------------------------------------------------------------------- build

def _lin(coefs: Iterable[tuple[float, tuple]]) -> tuple[Term, ...]:
    return tuple(Term(float(a), "lin", (k,)) for a, k in coefs)


def _big_m(label, node, row, g_terms, y_key, M, sense) -> Constraint:
    """``g - M (1 - y) sense 0`` rewritten as ``g + M y - M``."""
    return Constraint("value", label, node, row, tuple(g_terms) + (Term(float(M), "lin", (y_key,)),), -float(M), sense)


def build(instance: ModelInstance) -> ConstraintSystem:
    """Materialise every constraint family of the configured formulation."""
    cfg = instance.config
    out: list[Constraint] = []
    out += _tree_constraints(instance)
    out += _value_constraints(instance)
    if cfg.include_redundancy:
        out += _redundancy_constraints(instance)
    if cfg.include_implication:
        out += _implication_constraints(instance)
    if cfg.include_symmetry:
        out += _symmetry_constraints(instance)
    return ConstraintSystem(instance, tuple(out))


def _tree_constraints(inst: ModelInstance) -> list[Constraint]:
    N = inst.shape
    B, U, L, O = inst.binary, inst.unary, inst.operands, inst.ops
    out = []

    def ys(n, ops, coef=1.0):
        if n not in N:
            return []
        adm = set(inst.admissible(n))
        return [(coef, yk(n, o)) for o in ops if o in adm]

    def add(label, node, coefs, const, sense):
        coefs = list(coefs)
        if coefs:
            out.append(Constraint("tree", label, node, None, _lin(coefs), float(const), sense))

    nonterm = [n for n in N if not N.is_terminal(n)]
    if inst.config.variant == IMPROVED:
        for n in nonterm:
            add("grammar1", n, ys(n, B + U) + ys(2 * n + 1, O, -1.0), 0.0, "==")
            add("grammar2", n, ys(n, B) + ys(2 * n, O, -1.0), 0.0, "==")
    for n in N:
        add("cozad:grammar1", n, ys(n, O), -1.0, "<=")
    add("cozad:grammar2", None, [c for n in N for c in ys(n, inst.variables)], -1.0, ">=")
    if inst.config.variant == BASELINE:
        for n in nonterm:
            add("cozad:grammar3", n, ys(n, B + U) + ys(2 * n + 1, O, -1.0), 0.0, "<=")
            add("cozad:grammar4", n, ys(n, B) + ys(2 * n, O, -1.0), 0.0, "<=")
            add("cozad:grammar5", n, ys(n, U + L) + ys(2 * n, O), -1.0, "<=")
            add("cozad:grammar6", n, ys(n, L) + ys(2 * n + 1, O), -1.0, "<=")
    return out


def _value_constraints(inst: ModelInstance) -> list[Constraint]:
    N, b, x = inst.shape, inst.bounds, inst.data.x
    lo, up, eps = b.v_lo, b.v_up, b.epsilon
    out = []
    improved = inst.config.variant == IMPROVED
    for i in range(inst.data.n_data):
        for n in N:
            adm = inst.admissible(n)
            v = vk(i, n)
            vt = Term(1.0, "lin", (v,))
            if improved:
                xs = [(-x[i, var_index(o) - 1], yk(n, o)) for o in adm if is_var(o)]
                rest = [o for o in adm if not is_var(o)]
                out.append(Constraint("value", "varub", n, i, (vt,) + _lin(xs + [(-up, yk(n, o)) for o in rest]), 0.0, "<="))
                out.append(Constraint("value", "varlb", n, i, (vt,) + _lin(xs + [(-lo, yk(n, o)) for o in rest]), 0.0, ">="))
            else:
                # v <= v_up * sum(y) and v >= v_lo * sum(y): an empty node has value 0
                out.append(Constraint("value", "noneub", n, i, (vt,) + _lin([(-up, yk(n, o)) for o in adm]), 0.0, "<="))
                out.append(Constraint("value", "nonelb", n, i, (vt,) + _lin([(-lo, yk(n, o)) for o in adm]), 0.0, ">="))
                for o in adm:
                    if is_var(o):
                        xv = x[i, var_index(o) - 1]
                        out.append(Constraint("value", "indepub", n, i, (vt,) + _lin([(up - xv, yk(n, o))]), -up, "<="))
                        out.append(Constraint("value", "indeplb", n, i, (vt,) + _lin([(lo - xv, yk(n, o))]), -lo, ">="))
            if inst.has_const:
                g = (vt, Term(-1.0, "lin", (ck(n),)))
                out.append(_big_m("cstub", n, i, g, yk(n, CONST), up - b.c_lo, "<="))
                out.append(_big_m("cstlb", n, i, g, yk(n, CONST), lo - b.c_up, ">="))
            if N.is_terminal(n):
                continue
            l, r = 2 * n, 2 * n + 1
            vl, vr = vk(i, l), vk(i, r)
            sq_max = max(lo * lo, up * up)
            sq_min = min(lo * lo, lo * up, up * up)
            for o in inst.binary:
                if l not in N or r not in N:
                    continue
                y = yk(n, o)
                if o == "+":
                    g = (vt, Term(-1.0, "lin", (vl,)), Term(-1.0, "lin", (vr,)))
                    out.append(_big_m("+ub", n, i, g, y, up - 2 * lo, "<="))
                    out.append(_big_m("+lb", n, i, g, y, lo - 2 * up, ">="))
                elif o == "-":
                    g = (vt, Term(-1.0, "lin", (vl,)), Term(1.0, "lin", (vr,)))
                    out.append(_big_m("-ub", n, i, g, y, 2 * up - lo, "<="))
                    out.append(_big_m("-lb", n, i, g, y, 2 * lo - up, ">="))
                elif o == "*":
                    g = (vt, Term(-1.0, "prod", (vl, vr)))
                    out.append(_big_m("*ub", n, i, g, y, up - sq_min, "<="))
                    out.append(_big_m("*lb", n, i, g, y, lo - sq_max, ">="))
                else:
                    g = (Term(1.0, "prod", (v, vr)), Term(-1.0, "lin", (vl,)))
                    out.append(_big_m("/ub", n, i, g, y, sq_max - lo, "<="))
                    out.append(_big_m("/lb", n, i, g, y, sq_min - up, ">="))
                    out.append(Constraint("value", "/domain_lch", n, i,
                                          (Term(eps, "lin", (y,)), Term(-1.0, "prod", (vl, vl))), 0.0, "<="))
                    out.append(Constraint("value", "/domain_rch", n, i,
                                          (Term(eps, "lin", (y,)), Term(-1.0, "prod", (vr, vr))), 0.0, "<="))
            if r not in N:
                continue
            for o in inst.unary:
                y = yk(n, o)
                dom = (Term(-1.0, "lin", (vr,)),)
                if o == "sqrt":
                    g = (Term(1.0, "prod", (v, v)), Term(-1.0, "lin", (vr,)))
                    out.append(_big_m("sqrtub", n, i, g, y, sq_max - lo, "<="))
                    out.append(_big_m("sqrtlb", n, i, g, y, -up, ">="))
                    out.append(_domain("sqrtdomain", n, i, dom, y, eps, lo))
                elif o == "exp":
                    g = (vt, Term(-1.0, "exp", (vr,)))
                    out.append(_big_m("expub", n, i, g, y, up, "<="))
                    out.append(_big_m("explb", n, i, g, y, lo - math.exp(up), ">="))
                else:
                    g = (Term(1.0, "exp", (v,)), Term(-1.0, "lin", (vr,)))
                    out.append(_big_m("logub", n, i, g, y, math.exp(up) - lo, "<="))
                    out.append(_big_m("loglb", n, i, g, y, -up, ">="))
                    out.append(_domain("logdomain", n, i, dom, y, eps, lo))
    return out


def _domain(label, n, i, g_terms, y, eps, lo) -> Constraint:
    # eps - v <= (eps - v_lo)(1 - y)
    c = _big_m(label, n, i, g_terms, y, eps - lo, "<=")
    return Constraint(c.family, c.label, c.node, c.row, c.terms, c.const + eps, c.sense)


def _redundancy_constraints(inst: ModelInstance) -> list[Constraint]:
    N = inst.shape
    ops = set(inst.ops)
    out = []

    def has(n, o):
        return n in N and o in inst.admissible(n)

    def add(label, n, coefs, const):
        coefs = [(a, yk(m, o)) for a, m, o in coefs if has(m, o)]
        if coefs:
            out.append(Constraint("redundancy", label, n, None, _lin(coefs), float(const), "<="))

    for n in N:
        if N.is_terminal(n):
            continue
        l, r = 2 * n, 2 * n + 1
        if inst.config.variant == IMPROVED:
            if n not in N.perfect:
                if {"+", "-"} <= ops and has(r, "-"):
                    add("redun2", n, [(1, n, "+"), (1, r, "-")], -1)
                if {"*", "/"} <= ops and has(r, "/"):
                    add("redun3", n, [(1, n, "*"), (1, r, "/")], -1)
            if has(r, CONST):
                add("redun1", n, [(1, r, CONST), (-1, n, "+"), (-1, n, "*")], 0)
        else:
            if has(r, CONST):
                if inst.unary:
                    add("cozad:redun1", n, [(1, r, CONST)] + [(1, n, o) for o in inst.unary], -1)
                if "-" in ops:
                    add("cozad:redun2", n, [(1, r, CONST), (1, n, "-")], -1)
                if "/" in ops:
                    add("cozad:redun3", n, [(1, r, CONST), (1, n, "/")], -1)
        if has(l, CONST) and has(r, CONST):
            add("cozad:redun4", n, [(1, l, CONST), (1, r, CONST)], -1)
        for o, o2 in INVERSE_PAIRS:
            if o in ops and o2 in ops:
                if has(r, o2):
                    add("cozad:redun5", n, [(1, n, o), (1, r, o2)], -1)
                if has(r, o):
                    add("cozad:redun6", n, [(1, n, o2), (1, r, o)], -1)
    return out


def _implication_constraints(inst: ModelInstance) -> list[Constraint]:
    N, data = inst.shape, inst.data
    ops = set(inst.ops)
    out = []

    def add(label, n, pairs):
        if all(m in N and o in inst.admissible(m) for m, o in pairs):
            out.append(Constraint("implication", label, n, None,
                                  _lin([(1.0, yk(m, o)) for m, o in pairs]), -float(len(pairs) - 1), "<="))

    for n in N:
        if N.is_terminal(n):
            continue
        r = 2 * n + 1
        if "/" in ops:
            for j in sorted(data.zero):
                add("impl1", n, [(n, "/"), (r, var(j))])
        if "sqrt" in ops:
            for j in sorted(data.nega):
                add("impl2", n, [(n, "sqrt"), (r, var(j))])
        if "log" in ops:
            for j in sorted(data.nega | data.zero):
                add("impl4", n, [(n, "log"), (r, var(j))])
        if "sqrt" in ops and "*" in ops and 4 * n + 2 in N and 4 * n + 3 in N:
            for j in sorted(data.posi):
                for k in sorted(data.nega):
                    if j != k:
                        add("impl_depth2", n, [(n, "sqrt"), (r, "*"), (4 * n + 2, var(j)), (4 * n + 3, var(k))])
    return out


def _symmetry_constraints(inst: ModelInstance) -> list[Constraint]:
    N, b = inst.shape, inst.bounds
    out = []
    sym_ops = [o for o in ("+", "*") if o in inst.ops]
    if not sym_ops:
        return out
    gap = b.v_lo - b.v_up
    for n in sorted(N.perfect):
        if N.is_terminal(n):
            continue
        # v_{1,2n} - v_{1,2n+1} - gap (1 - y+ - y*) >= 0
        terms = (Term(1.0, "lin", (vk(0, 2 * n),)), Term(-1.0, "lin", (vk(0, 2 * n + 1),))) + _lin(
            [(gap, yk(n, o)) for o in sym_ops]
        )
        out.append(Constraint("symmetry", "sym", n, 0, terms, -gap, ">="))
    return out


def distance_constraints(instance: ModelInstance, anchor: ExpressionTree, k1: int, k2: int) -> list[Constraint]:
    if not 0 <= k1 <= k2:
        raise ValueError("need 0 <= k1 <= k2")
    pairs = set(instance.pairs)
    coefs, const = [], 0.0
    for n in instance.shape:
        if n in anchor.assign:
            const += 1.0
            if (n, anchor.assign[n]) in pairs:
                coefs.append((-1.0, yk(n, anchor.assign[n])))
        else:
            coefs += [(1.0, yk(n, o)) for o in instance.admissible(n)]
    terms = _lin(coefs)
    return [
        Constraint("distance", "dist_lo", None, None, terms, const - k1, ">="),
        Constraint("distance", "dist_up", None, None, terms, const - k2, "<="),
    ]


def add_distance_restriction(system: ConstraintSystem, anchor: ExpressionTree, k1: int, k2: int) -> ConstraintSystem:
    """Append ``k1 <= distance(anchor, y) <= k2`` as two linear rows."""
    return system.extend(distance_constraints(system.instance, anchor, k1, k2))


# ------------------------------------------------------------ point checks

BINARY = "binary"
RELAXED = "relaxed"


def check_point(system: ConstraintSystem, point: ModelPoint, integrality: str = BINARY, tol: float = 1e-9) -> FeasibilityReport:
    out = []
    for idx, c in enumerate(system.constraints):
        res = c.residual(point)
        if res > tol:
            out.append(Violation(idx, c.family, c.label, c.node, c.row, res))
    if integrality == BINARY:
        for (n, o) in system.instance.pairs:
            y = point.y.get((n, o), 0.0)
            gap = min(abs(y), abs(1.0 - y))
            if gap > tol:
                out.append(Violation(-1, "integrality", "binary", n, None, gap))
    return FeasibilityReport(tuple(out))


def objective(instance: ModelInstance, point: ModelPoint) -> float:
    z = instance.data.z
    mse = sum((z[i] - point.v.get((i, 1), 0.0)) ** 2 for i in range(len(z))) / len(z)
    return mse + instance.config.lam * sum(point.y.get(p, 0.0) for p in instance.pairs)


def embed_tree(tree: ExpressionTree, instance: ModelInstance) -> ModelPoint:
    """Binary point (y, c, v) representing ``tree`` on every data row."""
    pairs = set(instance.pairs)
    for n, op in tree.assign.items():
        if (n, op) not in pairs:
            raise ValueError(f"({n}, {op}) is not an admissible assignment of this instance")
    y = {p: 0.0 for p in instance.pairs}
    for n, op in tree.assign.items():
        y[(n, op)] = 1.0
    c = {n: 0.0 for n in instance.shape} if instance.has_const else {}
    c.update(tree.consts)
    v = {}
    for i, row in enumerate(instance.data.x):
        try:
            vals = node_values(tree, instance.bounds, row)
        except ArithmeticError as err:
            err.row = i
            raise
        for n in instance.shape:
            v[(i, n)] = vals.get(n, 0.0)
    return ModelPoint(y, c, v)


# ------------------------------------------------------------------ export

FORMAT_VERSION = 1


def export_model(instance: ModelInstance, system: ConstraintSystem | None = None) -> str:
    """Deterministic JSON document of the instance and its formulation."""
    system = system or build(instance)
    b = instance.bounds
    variables = [{"name": var_name(yk(n, o)), "type": "binary", "lb": 0, "ub": 1} for n, o in instance.pairs]
    if instance.has_const:
        variables += [{"name": var_name(ck(n)), "type": "continuous", "lb": b.c_lo, "ub": b.c_up} for n in instance.shape]
    variables += [
        {"name": var_name(vk(i, n)), "type": "continuous", "lb": b.v_lo, "ub": b.v_up}
        for i in range(instance.data.n_data) for n in instance.shape
    ]
    nd = instance.data.n_data
    obj = " + ".join(f"({float(z)!r} - {var_name(vk(i, 1))})**2" for i, z in enumerate(instance.data.z))
    obj = f"({obj})/{nd}"
    if instance.config.lam:
        obj += f" + {instance.config.lam!r}*(" + " + ".join(var_name(yk(n, o)) for n, o in instance.pairs) + ")"
    doc = {
        "format": "srmodel",
        "version": FORMAT_VERSION,
        "instance": {
            "x": instance.data.x.tolist(),
            "z": instance.data.z.tolist(),
            "ops": list(instance.ops),
            "nodes": list(instance.shape.nodes),
            "bounds": {"v_lo": b.v_lo, "v_up": b.v_up, "c_lo": b.c_lo, "c_up": b.c_up, "epsilon": b.epsilon},
            "config": {
                "variant": instance.config.variant,
                "include_redundancy": instance.config.include_redundancy,
                "include_symmetry": instance.config.include_symmetry,
                "include_implication": instance.config.include_implication,
                "lambda": instance.config.lam,
            },
        },
        "variables": variables,
        "objective": {"sense": "minimize", "expression": obj},
        "constraints": [
            {
                "id": idx,
                "family": c.family,
                "label": c.label,
                "node": c.node,
                "row": c.row,
                "linear": c.linear,
                "expression": c.expression(),
                "sense": c.sense,
                "rhs": 0,
            }
            for idx, c in enumerate(system.constraints)
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_model(path, instance: ModelInstance) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(export_model(instance))
    except OSError as err:
        raise IOError(f"cannot write model to {path}: {err}") from err


def read_model(text: str) -> tuple[ModelInstance, ConstraintSystem]:
    """Inverse of :func:`export_model`: rebuild the instance and the rows."""
    doc = json.loads(text)
    if doc.get("format") != "srmodel":
        raise ValueError("not a srmodel document")
    spec = doc["instance"]
    cfg = spec["config"]
    nodes = spec["nodes"]
    try:
        shape = NodeSet(nodes)
    except ValueError:
        shape = NodeSet(nodes, full=False)
    instance = ModelInstance(
        Dataset(np.array(spec["x"], dtype=float), np.array(spec["z"], dtype=float)),
        tuple(spec["ops"]),
        shape,
        EvalBounds(**spec["bounds"]),
        FormulationConfig(cfg["variant"], cfg["include_redundancy"], cfg["include_symmetry"],
                          cfg["include_implication"], cfg["lambda"]),
    )
    rows = []
    for rec in doc["constraints"]:
        terms, const = parse_terms(rec["expression"])
        rows.append(Constraint(rec["family"], rec["label"], rec["node"], rec["row"], terms, const - rec["rhs"], rec["sense"]))
    return instance, ConstraintSystem(instance, tuple(rows))


def parse_terms(text: str) -> tuple[tuple[Term, ...], float]:
    """Parse an expression string written by :meth:`Constraint.expression`."""
    tree = ast.parse(text, mode="eval").body
    summands = []

    def flatten(node):
        if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Add):
            flatten(node.left)
            flatten(node.right)
        else:
            summands.append(node)

    flatten(tree)
    terms, const = [], 0.0
    for s in summands:
        factors = []

        def mul(node):
            if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Mult):
                mul(node.left)
                mul(node.right)
            else:
                factors.append(node)

        mul(s)
        coef, keys, kind = 1.0, [], "lin"
        for f in factors:
            if isinstance(f, (ast.Constant, ast.UnaryOp)):
                coef *= float(ast.literal_eval(f))
            elif isinstance(f, ast.Name):
                keys.append(var_key(f.id))
            elif isinstance(f, ast.Call) and getattr(f.func, "id", None) == "exp":
                keys.append(var_key(f.args[0].id))
                kind = "exp"
            else:
                raise ValueError(f"unsupported term in {text!r}")
        if not keys:
            const += coef
        elif kind == "exp":
            terms.append(Term(coef, "exp", tuple(keys)))
        elif len(keys) == 1:
            terms.append(Term(coef, "lin", tuple(keys)))
        else:
            terms.append(Term(coef, "prod", tuple(keys)))
    return tuple(terms), const
