"""Restricted solves: depth-first branch-and-prune over operator assignments.

Nodes are decided in ascending id order.  Each node takes an admissible
operator (binary, unary, variables, constant) or stays empty.  Linear rows
over y from the formulation are checked as soon as their last node is
decided, so a partial assignment is cut the moment it cannot be completed.
Every complete assignment is a structure; its constants are then fitted by
multi-start damped Gauss-Newton.
"""
from __future__ import annotations

import itertools
import json
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .exprcore import CONST, ExpressionTree, arity, compile_tree, distance, node_values, render
from .model import ModelInstance, build

OPTIMAL = "Optimal"
IMPROVED_STOP = "ImprovedStop"
NODE_LIMIT = "NodeLimit"
TIME_LIMIT = "TimeLimit"
INFEASIBLE = "Infeasible"

STRUCTURAL_FAMILIES = ("tree", "redundancy", "implication")


class InstanceError(ValueError):
    pass


class AllStartsFailed(ArithmeticError):
    pass


@dataclass(frozen=True)
class SearchParams:
    node_limit: int | None = None
    time_limit: float | None = None
    improve_factor: float = 0.999
    epsilon_opt: float = 0.0
    distance: tuple | None = None  # (anchor, k1, k2)
    fix_level: int | None = None
    seed: int = 0
    integer_constants: bool = False
    stop: threading.Event | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.distance is not None:
            _, k1, k2 = self.distance
            if not 0 <= k1 <= k2:
                raise ValueError("need 0 <= k1 <= k2")
        if self.fix_level is not None and self.fix_level < 1:
            raise ValueError("fix level must be >= 1")
        if not 0 < self.improve_factor <= 1:
            raise ValueError("improve_factor must lie in (0, 1]")
        if self.node_limit is not None and self.node_limit < 1:
            raise ValueError("node limit must be positive")


@dataclass
class SolveResult:
    tree: ExpressionTree | None
    train_error: float
    status: str
    nodes_explored: int

    def to_dict(self) -> dict:
        return {
            "expression": None if self.tree is None else render(self.tree),
            "train_error": self.train_error,
            "status": self.status,
            "nodes_explored": self.nodes_explored,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def apply_fix_level(anchor: ExpressionTree, beta: int) -> frozenset[tuple[int, str]]:
    """Anchor assignments at nodes with an assigned descendant ``beta`` levels down."""
    if beta < 1:
        raise ValueError("fix level must be >= 1")
    fixed = {m >> beta for m in anchor.assign if m >> beta >= 1}
    return frozenset((n, anchor.assign[n]) for n in fixed)


# ------------------------------------------------------------- enumeration

class StructureEnumerator:
    """Depth-first generator of the complete assignments of an instance."""

    def __init__(self, instance: ModelInstance, frozen=(), distance=None, families=STRUCTURAL_FAMILIES):
        self.instance = instance
        self.nodes = list(instance.shape.nodes)
        self.choices = {n: list(instance.admissible(n)) + [None] for n in self.nodes}
        for n, op in frozen:
            if n in self.choices:
                self.choices[n] = [op]
        system = build(instance).select(families=families)
        self.buckets: dict[int, list] = {n: [] for n in self.nodes}
        for c in system:
            if not c.y_only:
                continue
            terms = [(t.coef, t.keys[0][1], t.keys[0][2]) for t in c.terms]
            last = max(n for _, n, _ in terms)
            self.buckets[last].append((terms, c.const, c.sense))
        self.distance = distance
        if distance is not None:
            anchor, self.k1, self.k2 = distance
            self.anchor = dict(anchor.assign)
        self.explored = 0

    def _ok(self, assign: dict, n: int) -> bool:
        for terms, const, sense in self.buckets[n]:
            body = const
            for coef, m, op in terms:
                if assign[m] == op:
                    body += coef
            if sense == "<=" and body > 1e-9:
                return False
            if sense == ">=" and body < -1e-9:
                return False
            if sense == "==" and abs(body) > 1e-9:
                return False
        return True

    def _contrib(self, n: int, op) -> int:
        if n in self.anchor:
            return int(op != self.anchor[n])
        return int(op is not None)

    def run(self, should_stop=lambda: False) -> Iterator[dict]:
        """Yield complete assignments ``{node: op or None}``.

        ``explored`` counts accepted partial assignments; the generator ends
        early once ``should_stop()`` is true.
        """
        nodes, total = self.nodes, len(self.nodes)
        assign: dict = {}
        self.stopped = False

        def rec(i: int, dist: int):
            if i == total:
                yield dict(assign)
                return
            n = nodes[i]
            for op in self.choices[n]:
                if should_stop():
                    self.stopped = True
                    return
                assign[n] = op
                d = dist
                if self.distance is not None:
                    d += self._contrib(n, op)
                    if d > self.k2 or d + (total - i - 1) < self.k1:
                        continue
                if not self._ok(assign, n):
                    continue
                self.explored += 1
                yield from rec(i + 1, d)
                if self.stopped:
                    return
            assign.pop(n, None)

        yield from rec(0, 0)


def strip_ghosts(assign: dict) -> dict:
    """Nodes reachable from the root through assigned operators."""
    out = {}
    if assign.get(1) is None:
        return out
    stack = [1]
    while stack:
        n = stack.pop()
        op = assign.get(n)
        if op is None:
            continue
        out[n] = op
        a = arity(op)
        if a == 2:
            stack.append(2 * n)
        if a >= 1:
            stack.append(2 * n + 1)
    return out


def iter_structures(instance: ModelInstance, frozen=(), distance=None, families=STRUCTURAL_FAMILIES) -> Iterator[dict]:
    """Every complete assignment that survives structural pruning, once each."""
    yield from StructureEnumerator(instance, frozen, distance, families).run()


# ---------------------------------------------------------- constant fitting

_H = 1e-6


def _penalty(instance: ModelInstance) -> float:
    return instance.bounds.v_up - instance.bounds.v_lo


def _residuals(run, X, z, C, pen):
    V, bad = run(X, C)
    R = np.where(bad, pen, V - z)
    return R, bad


def _batched_solve(A: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve ``A[i] x = g[i]``; closed form for one and two unknowns."""
    k = g.shape[1]
    with np.errstate(all="ignore"):
        if k == 1:
            return g / A[:, :, 0]
        if k == 2:
            a, b, c, d = A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1]
            det = a * d - b * c
            return np.stack([(d * g[:, 0] - b * g[:, 1]) / det, (a * g[:, 1] - c * g[:, 0]) / det], axis=1)
    try:
        return np.linalg.solve(A, g[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        return np.stack([np.linalg.lstsq(a, gg, rcond=None)[0] for a, gg in zip(A, g)])


def fit_constants(structure: ExpressionTree, instance: ModelInstance, seed: int = 0, integer: bool = False):
    """Least-squares constants within [c_lo, c_up]; returns ``(consts, mse)``.

    Rows that fail a domain or range check contribute ``(v_up - v_lo)**2``.
    """
    run = compile_tree(structure, instance.bounds)
    consts, err, _ = _fit(run, structure.const_nodes, instance, seed, integer)
    return consts, err


def _fit(run, nodes, instance: ModelInstance, seed: int, integer: bool):
    """Core of :func:`fit_constants`; also reports whether every row is defined."""
    b = instance.bounds
    X, z = instance.data.x, instance.data.z
    pen = _penalty(instance)
    k = len(nodes)
    if k == 0:
        R, bad = _residuals(run, X, z, np.zeros((1, 0)), pen)
        if bad.all():
            raise AllStartsFailed("structure is undefined on every row")
        return {}, float(np.mean(R[0] ** 2)), not bad.any()

    lo, up = b.c_lo, b.c_up
    rng = np.random.default_rng(seed)
    starts = [np.full(k, s) for s in (0.0, lo, up, lo / 2, up / 2)] + list(rng.uniform(lo, up, size=(5, k)))
    uniq: dict = {}
    for s in starts:
        uniq.setdefault(tuple(s), s)
    C = np.array(list(uniq.values()), dtype=float)
    S, n = C.shape[0], len(z)
    eye = np.eye(k)

    def stencil(Cs):
        """Residuals at ``Cs`` plus the central-difference Jacobian there."""
        m = Cs.shape[0]
        P = np.repeat(Cs[:, None, :], 2 * k + 1, axis=1)
        for j in range(k):
            P[:, 2 * j + 1, j] += _H
            P[:, 2 * j + 2, j] -= _H
        Rp, badp = _residuals(run, X, z, P.reshape(-1, k), pen)
        Rp = Rp.reshape(m, 2 * k + 1, n)
        badp = badp.reshape(m, 2 * k + 1, n)
        J = (Rp[:, 1::2, :] - Rp[:, 2::2, :]) / (2 * _H)  # (m, k, n)
        dead = badp[:, :1, :] | badp[:, 1::2, :] | badp[:, 2::2, :]
        J = np.where(dead, 0.0, J)
        return Rp[:, 0, :], badp[:, 0, :], J

    R, bad, J = stencil(C)
    loss = (R * R).sum(axis=1) / n
    mu = np.full(S, 1e-3)
    active = np.ones(S, dtype=bool)
    for _ in range(200):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Ja = J[idx]
        JtJ = Ja @ Ja.transpose(0, 2, 1)
        g = np.einsum("mkn,mn->mk", Ja, R[idx])
        diag = np.einsum("mkk->mk", JtJ)
        A = JtJ + mu[idx, None, None] * (diag[:, :, None] * eye + eye)
        step = -_batched_solve(A, g)
        Ca = C[idx]
        Cn = np.clip(Ca + np.where(np.isfinite(step), step, 0.0), lo, up)
        Rn, badn, Jn = stencil(Cn)
        ln = (Rn * Rn).sum(axis=1) / n
        moved = np.abs(Cn - Ca).max(axis=1)
        gain = loss[idx] - ln
        better = gain > 0
        acc, rej = idx[better], idx[~better]
        C[acc], R[acc], bad[acc], J[acc], loss[acc] = Cn[better], Rn[better], badn[better], Jn[better], ln[better]
        mu[acc] = np.maximum(mu[acc] / 3, 1e-12)
        mu[rej] *= 4
        # tiny steps or a stalled loss both count as converged
        done = moved < 1e-10
        done |= better & ((ln < 1e-30) | (gain <= 1e-9 * ln))
        done |= ~better & (mu[idx] > 1e12)
        active[idx[done]] = False

    if bad.all():
        raise AllStartsFailed("every start is undefined on every row")
    best = int(np.argmin(loss))
    c_best, err, ok = C[best], float(loss[best]), not bad[best].any()
    if integer:
        options = [sorted({math.floor(c), math.ceil(c)}) for c in c_best]
        cands = np.clip(np.array(list(itertools.product(*options)), dtype=float), math.ceil(lo), math.floor(up))
        Ri, badi = _residuals(run, X, z, cands, pen)
        li = np.mean(Ri * Ri, axis=1)
        t = int(np.argmin(li))
        c_best, err, ok = cands[t], float(li[t]), not badi[t].any()
    return {nd: float(c) for nd, c in zip(nodes, c_best)}, err, ok


# ------------------------------------------------------------------- solve

def tree_error(tree: ExpressionTree, instance: ModelInstance) -> tuple[float, bool]:
    """Mean squared error of ``tree`` and whether every row evaluated."""
    run = compile_tree(tree, instance.bounds)
    c = np.array([[tree.consts[n] for n in tree.const_nodes]])
    R, bad = _residuals(run, instance.data.x, instance.data.z, c.reshape(1, -1), _penalty(instance))
    return float(np.mean(R[0] ** 2)), not bad.any()


def objective_value(tree: ExpressionTree, instance: ModelInstance, mse: float) -> float:
    return mse + instance.config.lam * len(tree.assign)


def symmetry_ok(tree: ExpressionTree, instance: ModelInstance) -> bool:
    """The first-row ordering rule at perfect nodes holding + or *."""
    if not instance.config.include_symmetry:
        return True
    perfect = instance.shape.perfect
    todo = [n for n, op in tree.assign.items() if op in ("+", "*") and n in perfect]
    if not todo:
        return True
    vals = node_values(tree, instance.bounds, instance.data.x[0])
    return all(vals[2 * n] >= vals[2 * n + 1] - 1e-12 for n in todo)


def _constant_free_symmetry_ok(structure: ExpressionTree, instance: ModelInstance) -> bool:
    # the ordering rule needs no fit where both children are free of constants
    if not instance.config.include_symmetry:
        return True
    tainted = set()
    for n in structure.const_nodes:
        while n and n not in tainted:
            tainted.add(n)
            n //= 2
    perfect = instance.shape.perfect
    todo = [n for n, op in structure.assign.items()
            if op in ("+", "*") and n in perfect and 2 * n not in tainted and 2 * n + 1 not in tainted]
    if not todo:
        return True
    try:
        vals = node_values(structure, instance.bounds, instance.data.x[0])
    except ArithmeticError:
        return True
    return all(vals[2 * n] >= vals[2 * n + 1] - 1e-12 for n in todo)


def res_minlp(instance: ModelInstance, params: SearchParams | None = None, start: ExpressionTree | None = None) -> SolveResult:
    """Approximately solve the restricted problem; see :class:`SearchParams`."""
    params = params or SearchParams()
    t0 = time.monotonic()
    anchor = params.distance[0] if params.distance is not None else start
    frozen = apply_fix_level(anchor, params.fix_level) if params.fix_level and anchor is not None else frozenset()
    enum = StructureEnumerator(instance, frozen, params.distance)
    limit = params.node_limit

    best_tree, best_err = None, math.inf
    start_err = math.inf
    if start is not None:
        mse, ok = tree_error(start, instance)
        start_err = objective_value(start, instance, mse)
        if ok and _in_window(start, frozen, params) and symmetry_ok(start, instance):
            best_tree, best_err = start, start_err

    state = {"status": None}

    def should_stop():
        if limit is not None and enum.explored >= limit:
            state["status"] = NODE_LIMIT
            return True
        if params.time_limit is not None and time.monotonic() - t0 >= params.time_limit:
            state["status"] = TIME_LIMIT
            return True
        if params.stop is not None and params.stop.is_set():
            state["status"] = TIME_LIMIT
            return True
        return False

    cache: dict = {}
    seen = 0
    for assign in enum.run(should_stop):
        active = strip_ghosts(assign)
        if not active:
            continue
        seen += 1
        key = tuple(sorted(active.items()))
        if key in cache:
            continue
        cache[key] = None
        placeholder = {n: 0.0 for n, op in active.items() if op == CONST}
        try:
            structure = ExpressionTree(active, placeholder, instance.shape)
            if not _constant_free_symmetry_ok(structure, instance):
                continue
            run = compile_tree(structure, instance.bounds)
            consts, mse, ok = _fit(run, structure.const_nodes, instance, params.seed, params.integer_constants)
        except (AllStartsFailed, ValueError):
            continue
        tree = structure.with_consts(consts)
        if not ok or not symmetry_ok(tree, instance):
            continue
        err = objective_value(tree, instance, mse)
        if err < best_err:
            best_tree, best_err = tree, err
            if start is not None and err < params.improve_factor * start_err:
                return SolveResult(best_tree, best_err, IMPROVED_STOP, enum.explored)
            if err < params.epsilon_opt:
                return SolveResult(best_tree, best_err, OPTIMAL, enum.explored)

    if state["status"] is not None:
        return SolveResult(best_tree, best_err if best_tree else math.inf, state["status"], enum.explored)
    if best_tree is None:
        if seen == 0 and params.distance is None and not frozen:
            raise InstanceError("no admissible structure")
        return SolveResult(None, math.inf, INFEASIBLE, enum.explored)
    return SolveResult(best_tree, best_err, OPTIMAL, enum.explored)


def _in_window(tree: ExpressionTree, frozen, params: SearchParams) -> bool:
    if any(tree.assign.get(n) != op for n, op in frozen):
        return False
    if params.distance is not None:
        anchor, k1, k2 = params.distance
        return k1 <= distance(anchor, tree) <= k2
    return True
