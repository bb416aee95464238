"""Sequential tree construction heuristic (local branching over k-neighbors).

``improve`` searches distance windows around an incumbent, widening the
window, raising the node budget and loosening the frozen top part of the
tree on a fixed schedule.  ``strech`` repeats it from a small initial solve.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field

from .exprcore import ExpressionTree, NodeSet, render
from .model import ModelInstance
from .search import NODE_LIMIT, SearchParams, SolveResult, res_minlp


@dataclass(frozen=True)
class StrechParams:
    k_init: int = 2
    k_max: int = 6
    beta_init: int = 1
    beta_max: int = 3
    gamma_init: int = 10**3
    gamma_max: int = 10**5
    epsilon_opt: float = 0.0
    time_limit: float | None = None
    init_shape: NodeSet = field(default_factory=lambda: NodeSet.perfect_tree(2))
    full_shape: NodeSet = field(default_factory=lambda: NodeSet.perfect_tree(3))
    improve_factor: float = 0.999
    seed: int = 0
    integer_constants: bool = False

    def __post_init__(self):
        if not 0 <= self.k_init <= self.k_max:
            raise ValueError("need 0 <= k_init <= k_max")
        if not 1 <= self.beta_init <= self.beta_max:
            raise ValueError("need 1 <= beta_init <= beta_max")
        if not 1 <= self.gamma_init <= self.gamma_max:
            raise ValueError("need 1 <= gamma_init <= gamma_max")
        if not self.init_shape.issubset(self.full_shape):
            raise ValueError("init_shape must be a subset of full_shape")


@dataclass
class TraceEntry:
    iteration: int
    expression: str
    update: str
    train_error: float
    time_spent: float

    def to_dict(self, with_time: bool = True) -> dict:
        out = {"iteration": self.iteration, "incumbent": self.expression,
               "update": self.update, "train_error": self.train_error}
        if with_time:
            out["time_spent"] = self.time_spent
        return out


@dataclass
class Trace:
    entries: list[TraceEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def updates(self) -> list[str]:
        return [e.update for e in self.entries]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.entries)


def describe_update(old: ExpressionTree, new: ExpressionTree) -> str:
    """``"constant"`` or the smallest changed subtree as ``"old -> new"``."""
    diff = {n for n in set(old.assign) | set(new.assign) if old.assign.get(n) != new.assign.get(n)}
    if not diff:
        return "constant"
    nodes = set(diff)
    while len(nodes) > 1:
        deepest = max(nodes, key=lambda n: n.bit_length())
        nodes.discard(deepest)
        nodes.add(deepest // 2)
    top = nodes.pop()

    def side(t: ExpressionTree) -> str:
        return render(t.subtree(top)) if top in t.assign else "none"

    return f"{side(old)} -> {side(new)}"


# errors this far below the data scale are round-off, not fit
ROUNDOFF = 1e-24


class _Clock:
    def __init__(self, limit: float | None, stop: threading.Event | None):
        self.t0 = time.monotonic()
        self.limit, self.stop = limit, stop

    def elapsed(self) -> float:
        return time.monotonic() - self.t0

    def remaining(self) -> float | None:
        if self.limit is None:
            return None
        return max(0.0, self.limit - self.elapsed())

    def expired(self) -> bool:
        if self.stop is not None and self.stop.is_set():
            return True
        return self.limit is not None and self.elapsed() >= self.limit


def improve(instance: ModelInstance, incumbent: SolveResult, params: StrechParams,
            clock: _Clock | None = None, stop: threading.Event | None = None) -> SolveResult:
    """One pass of the neighborhood schedule; returns a better result or ``incumbent``."""
    if incumbent.tree is None:
        raise ValueError("incumbent has no tree")
    clock = clock or _Clock(params.time_limit, stop)
    tree = incumbent.tree.with_shape(instance.shape)
    target = params.improve_factor * incumbent.train_error
    k1, k2, beta, gamma = 0, params.k_init, params.beta_init, params.gamma_init
    refitted = False

    def solve(window, fix, limit):
        sp = SearchParams(node_limit=limit, time_limit=clock.remaining(), improve_factor=params.improve_factor,
                          distance=window, fix_level=fix, seed=params.seed,
                          integer_constants=params.integer_constants, stop=clock.stop)
        return res_minlp(instance, sp, start=tree)

    while beta <= params.beta_max and not clock.expired():
        res = solve((tree, k1, k2), beta, gamma)
        if res.tree is not None and res.train_error < target:
            return res
        if res.status == NODE_LIMIT and 10 * gamma <= params.gamma_max:
            gamma *= 10
            continue
        if not refitted:
            refitted = True
            res = solve((tree, 0, 0), None, None)
            if res.tree is not None and res.train_error < target:
                return res
        k1, k2 = k2, k2 + 2
        if k2 > params.k_max:
            k1, k2 = 0, params.k_init
            beta += 1
    return incumbent


def strech(instance: ModelInstance, params: StrechParams | None = None,
           stop: threading.Event | None = None, on_entry=None) -> tuple[SolveResult, Trace]:
    """Initial solve on ``init_shape`` followed by repeated improvement."""
    params = params or StrechParams()
    clock = _Clock(params.time_limit, stop)
    full = instance.replace(shape=params.full_shape)
    init = res_minlp(instance.replace(shape=params.init_shape),
                     SearchParams(seed=params.seed, integer_constants=params.integer_constants))
    trace = Trace()

    def record(res, kind):
        entry = TraceEntry(len(trace) + 1, render(res.tree), kind, res.train_error, clock.elapsed())
        trace.entries.append(entry)
        if on_entry is not None:
            on_entry(entry)

    if init.tree is None:
        return init, trace
    current = SolveResult(init.tree.with_shape(params.full_shape), init.train_error, init.status, init.nodes_explored)
    record(current, "initial")
    floor = max(params.epsilon_opt, ROUNDOFF * float((instance.data.z ** 2).mean()))
    while not clock.expired() and current.train_error > floor:
        nxt = improve(full, current, params, clock)
        if nxt is current or not nxt.train_error < current.train_error:
            break
        kind = describe_update(current.tree, nxt.tree)
        current = nxt
        record(current, kind)
    return current, trace
