"""Expression trees over a heap-indexed node set.

Nodes are positive integers; the children of ``n`` are ``2n`` (left) and
``2n + 1`` (right).  A unary operator keeps its argument in the right child.
Operators and operands are plain string tags::

    "+", "-", "*", "/"         binary
    "sqrt", "exp", "log"       unary
    "x1", "x2", ...            independent variables
    "cst"                      constant operand
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

BINARY_OPS = ("+", "-", "*", "/")
UNARY_OPS = ("sqrt", "exp", "log")
CONST = "cst"

# node ids stay below 2**(MAX_DEPTH + 1)
MAX_DEPTH = 8

_VAR_RE = re.compile(r"x([1-9][0-9]*)$")


class DomainError(ArithmeticError):
    """An epsilon domain guard failed at ``node`` (operator ``op``)."""

    def __init__(self, node: int, op: str, row: int | None = None):
        self.node, self.op, self.row = node, op, row
        where = f" row {row}" if row is not None else ""
        super().__init__(f"domain guard violated at node {node} ({op}){where}")


class RangeError(ArithmeticError):
    def __init__(self, node: int, value: float, row: int | None = None):
        self.node, self.value, self.row = node, value, row
        where = f" row {row}" if row is not None else ""
        super().__init__(f"value {value!r} at node {node} outside [v_lo, v_up]{where}")


class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at position {position}")


class TreeError(ValueError):
    pass


def var(j: int) -> str:
    return f"x{j}"


def is_var(op: str) -> bool:
    return _VAR_RE.match(op) is not None


def var_index(op: str) -> int:
    m = _VAR_RE.match(op)
    if m is None:
        raise TreeError(f"{op!r} is not a variable")
    return int(m.group(1))


def arity(op: str) -> int:
    if op in BINARY_OPS:
        return 2
    if op in UNARY_OPS:
        return 1
    if op == CONST or is_var(op):
        return 0
    raise TreeError(f"unknown operator {op!r}")


def operator_rank(op: str) -> tuple[int, int]:
    """Sort key giving binary, unary, variables, then the constant."""
    if op in BINARY_OPS:
        return (0, BINARY_OPS.index(op))
    if op in UNARY_OPS:
        return (1, UNARY_OPS.index(op))
    if is_var(op):
        return (2, var_index(op))
    if op == CONST:
        return (3, 0)
    raise TreeError(f"unknown operator {op!r}")


def depth_of(node: int) -> int:
    return node.bit_length() - 1


class NodeSet:
    """Ambient node set of a formulation; immutable."""

    __slots__ = ("nodes", "_set", "terminal", "perfect")

    def __init__(self, nodes: Iterable[int], *, full: bool = True):
        ids = sorted(set(int(n) for n in nodes))
        if not ids or ids[0] != 1:
            raise TreeError("node set must contain the root 1")
        if ids[0] < 1 or ids[-1] >= 2 ** (MAX_DEPTH + 1):
            raise TreeError(f"node ids must lie in [1, {2 ** (MAX_DEPTH + 1) - 1}]")
        s = frozenset(ids)
        for n in ids:
            if n > 1 and n // 2 not in s:
                raise TreeError(f"node {n} has no parent in the set")
            if full and ((2 * n in s) != (2 * n + 1 in s)):
                raise TreeError(f"node {n} has exactly one child; not a full binary tree")
        self.nodes: tuple[int, ...] = tuple(ids)
        self._set = s
        self.terminal = frozenset(n for n in ids if 2 * n not in s and 2 * n + 1 not in s)
        self.perfect = frozenset(n for n in ids if self._is_perfect(n))

    @classmethod
    def perfect_tree(cls, depth: int) -> "NodeSet":
        if not 0 <= depth <= MAX_DEPTH:
            raise TreeError(f"depth must lie in [0, {MAX_DEPTH}]")
        return cls(range(1, 2 ** (depth + 1)))

    def _is_perfect(self, n: int) -> bool:
        leaves = []
        stack = [n]
        while stack:
            m = stack.pop()
            kids = [k for k in (2 * m, 2 * m + 1) if k in self._set]
            if not kids:
                leaves.append(depth_of(m))
            elif len(kids) == 1:
                return False
            else:
                stack.extend(kids)
        return len(set(leaves)) == 1

    def __contains__(self, n: object) -> bool:
        return n in self._set

    def __iter__(self) -> Iterator[int]:
        return iter(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, NodeSet) and self._set == other._set

    def __hash__(self) -> int:
        return hash(self._set)

    def __repr__(self) -> str:
        return f"NodeSet({list(self.nodes)})"

    @property
    def depth(self) -> int:
        return depth_of(self.nodes[-1])

    def issubset(self, other: "NodeSet") -> bool:
        return self._set <= other._set

    def is_terminal(self, n: int) -> bool:
        return n in self.terminal


@dataclass(frozen=True)
class EvalBounds:
    v_lo: float = -10.0
    v_up: float = 10.0
    c_lo: float = -2.0
    c_up: float = 2.0
    epsilon: float = 0.01

    def __post_init__(self):
        if not (self.v_lo <= self.c_lo <= 0 <= self.c_up <= self.v_up):
            raise ValueError("bounds must satisfy v_lo <= c_lo <= 0 <= c_up <= v_up")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float, ndmin=2)
        z = np.array(self.z, dtype=float).reshape(-1)
        if x.shape[0] != z.shape[0] or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"incompatible data shapes {x.shape} and {z.shape}")
        x.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @property
    def n_data(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    # sign profiles, variable indices are 1-based
    @property
    def posi(self) -> frozenset[int]:
        return frozenset(int(j) + 1 for j in np.flatnonzero((self.x > 0).any(axis=0)))

    @property
    def nega(self) -> frozenset[int]:
        return frozenset(int(j) + 1 for j in np.flatnonzero((self.x < 0).any(axis=0)))

    @property
    def zero(self) -> frozenset[int]:
        return frozenset(int(j) + 1 for j in np.flatnonzero((self.x == 0).any(axis=0)))

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = [h.strip() for h in rows[0]]
        d = len(header) - 1
        if header != [f"x{j}" for j in range(1, d + 1)] + ["z"]:
            raise ValueError(f"expected header x1,...,xd,z; got {','.join(header)}")
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        return cls(body[:, :d], body[:, d])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text())

    def to_csv_text(self) -> str:
        lines = [",".join([f"x{j}" for j in range(1, self.d + 1)] + ["z"])]
        for xi, zi in zip(self.x, self.z):
            lines.append(",".join(repr(float(v)) for v in (*xi, zi)))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class ExpressionTree:
    """Operator assignment ``assign`` (node -> tag) plus constant values.

    The structural rules are checked on construction: a binary/unary operator
    at ``n`` iff ``2n+1`` is assigned, a binary operator iff ``2n`` is
    assigned, and ``consts`` keyed exactly by the constant nodes.  A tree
    without any variable is representable (the formulation forbids it, the
    data model does not).
    """

    assign: Mapping[int, str]
    consts: Mapping[int, float] = field(default_factory=dict)
    shape: NodeSet | None = None

    def __post_init__(self):
        assign = {int(n): op for n, op in self.assign.items()}
        consts = {int(n): float(c) for n, c in self.consts.items()}
        if 1 not in assign:
            raise TreeError("the root must be assigned")
        for n, op in assign.items():
            a = arity(op)
            if (a >= 1) != (2 * n + 1 in assign):
                raise TreeError(f"node {n} ({op}): right child presence does not match arity")
            if (a == 2) != (2 * n in assign):
                raise TreeError(f"node {n} ({op}): left child presence does not match arity")
            if n > 1 and n // 2 not in assign:
                raise TreeError(f"node {n} is detached from the root")
        const_nodes = {n for n, op in assign.items() if op == CONST}
        if set(consts) != const_nodes:
            raise TreeError("consts must be defined exactly on the constant nodes")
        if max(assign).bit_length() - 1 > MAX_DEPTH:
            raise TreeError(f"tree deeper than {MAX_DEPTH}")
        shape = self.shape or NodeSet.perfect_tree(max(assign).bit_length() - 1)
        missing = [n for n in assign if n not in shape]
        if missing:
            raise TreeError(f"nodes {missing} are not in the ambient node set")
        object.__setattr__(self, "assign", dict(sorted(assign.items())))
        object.__setattr__(self, "consts", dict(sorted(consts.items())))
        object.__setattr__(self, "shape", shape)

    @property
    def active(self) -> frozenset[int]:
        return frozenset(self.assign)

    @property
    def depth(self) -> int:
        return max(self.assign).bit_length() - 1

    @property
    def const_nodes(self) -> tuple[int, ...]:
        return tuple(n for n, op in self.assign.items() if op == CONST)

    @property
    def has_variable(self) -> bool:
        return any(is_var(op) for op in self.assign.values())

    @property
    def n_vars(self) -> int:
        return max((var_index(op) for op in self.assign.values() if is_var(op)), default=0)

    def structure_key(self) -> tuple:
        return tuple(self.assign.items())

    def with_consts(self, consts: Mapping[int, float]) -> "ExpressionTree":
        return ExpressionTree(self.assign, consts, self.shape)

    def with_shape(self, shape: NodeSet) -> "ExpressionTree":
        return ExpressionTree(self.assign, self.consts, shape)

    def subtree(self, n: int) -> "ExpressionTree":
        """The subtree rooted at ``n``, renumbered so that ``n`` becomes 1."""
        out_a, out_c = {}, {}
        stack = [(n, 1)]
        while stack:
            src, dst = stack.pop()
            op = self.assign[src]
            out_a[dst] = op
            if op == CONST:
                out_c[dst] = self.consts[src]
            if arity(op) == 2:
                stack.append((2 * src, 2 * dst))
            if arity(op) >= 1:
                stack.append((2 * src + 1, 2 * dst + 1))
        return ExpressionTree(out_a, out_c)

    def same_structure(self, other: "ExpressionTree") -> bool:
        return self.assign == other.assign

    def equals(self, other: "ExpressionTree", tol: float = 1e-12) -> bool:
        return self.same_structure(other) and all(
            abs(self.consts[n] - other.consts[n]) <= tol for n in self.consts
        )

    def __str__(self) -> str:
        return render(self)


# ---------------------------------------------------------------- evaluation

def evaluate(tree: ExpressionTree, bounds: EvalBounds, row) -> float:
    """Value of ``tree`` at one data row, computed bottom-up.

    Raises DomainError when an epsilon guard fails and RangeError when any
    node value leaves [v_lo, v_up].
    """
    return _node_values(tree, bounds, row)[1]


def node_values(tree: ExpressionTree, bounds: EvalBounds, row) -> dict[int, float]:
    return _node_values(tree, bounds, row)


def _node_values(tree: ExpressionTree, bounds: EvalBounds, row) -> dict[int, float]:
    eps = bounds.epsilon
    vals: dict[int, float] = {}
    for n in sorted(tree.assign, reverse=True):
        op = tree.assign[n]
        if op == CONST:
            v = tree.consts[n]
        elif op in BINARY_OPS:
            a, b = vals[2 * n], vals[2 * n + 1]
            if op == "+":
                v = a + b
            elif op == "-":
                v = a - b
            elif op == "*":
                v = a * b
            else:
                if a * a < eps or b * b < eps:
                    raise DomainError(n, op)
                v = a / b
        elif op in UNARY_OPS:
            u = vals[2 * n + 1]
            if op == "sqrt":
                if u < eps:
                    raise DomainError(n, op)
                v = math.sqrt(u)
            elif op == "log":
                if u < eps:
                    raise DomainError(n, op)
                v = math.log(u)
            else:
                v = math.exp(u) if u <= 700 else math.inf
        else:
            j = var_index(op)
            if j > len(row):
                raise TreeError(f"variable {op} out of range for a row of length {len(row)}")
            v = float(row[j - 1])
        if not bounds.v_lo <= v <= bounds.v_up:
            raise RangeError(n, v)
        vals[n] = v
    return vals


def compile_tree(tree: ExpressionTree, bounds: EvalBounds) -> Callable:
    """Vectorised evaluator ``f(X, C) -> (values, bad)``.

    ``X`` has shape (n_rows, d); ``C`` has shape (S, k) with one column per
    constant node in ascending node order.  ``values`` and ``bad`` have shape
    (S, n_rows); ``bad`` marks rows where a guard or range check failed at
    some node, using exactly the rules of :func:`evaluate`.
    """
    # straight-line numpy source, one statement group per node
    cidx = {n: i for i, n in enumerate(tree.const_nodes)}
    lines = ["def run_(X, C):", "    bad = False"]
    for n in sorted(tree.assign, reverse=True):
        op = tree.assign[n]
        a, b, v = f"v{2 * n}", f"v{2 * n + 1}", f"v{n}"
        if op == CONST:
            lines.append(f"    {v} = C[:, {cidx[n]}:{cidx[n] + 1}]")
        elif is_var(op):
            lines.append(f"    {v} = X[None, :, {var_index(op) - 1}]")
        elif op in ("+", "-", "*"):
            lines.append(f"    {v} = {a} {op} {b}")
        elif op == "/":
            lines.append(f"    g = ({a} * {a} < eps) | ({b} * {b} < eps)")
            lines.append("    bad = bad | g")
            lines.append(f"    {v} = {a} / where(g, 1.0, {b})")
        elif op in ("sqrt", "log"):
            lines.append(f"    g = ~({b} >= eps)")
            lines.append("    bad = bad | g")
            lines.append(f"    {v} = {op}(where(g, 1.0, {b}))")
        else:
            lines.append(f"    {v} = exp(minimum({b}, 700.0))")
        lines.append(f"    bad = bad | ~(({v} >= lo) & ({v} <= up))")
    lines.append("    return v1, bad")
    env = {"eps": bounds.epsilon, "lo": bounds.v_lo, "up": bounds.v_up, "where": np.where,
           "sqrt": np.sqrt, "log": np.log, "exp": np.exp, "minimum": np.minimum}
    exec("\n".join(lines), env)
    root = env["run_"]

    def run(X, C):
        X = np.asarray(X, dtype=float)
        C = np.asarray(C, dtype=float)
        if C.ndim < 2:
            C = C.reshape(1, -1)
        with np.errstate(all="ignore"):
            v, bad = root(X, C)
        shape = (C.shape[0], X.shape[0])
        if v.shape != shape:
            v = np.array(np.broadcast_to(v, shape), dtype=float)
        if getattr(bad, "shape", None) != shape:
            bad = np.array(np.broadcast_to(bad, shape))
        return v, bad

    return run


# ------------------------------------------------------------------ distance

def distance(a: ExpressionTree, b: ExpressionTree) -> int:
    """Number of nodes whose assignment differs; constant values are ignored."""
    changed = sum(1 for n, op in a.assign.items() if b.assign.get(n) != op)
    added = sum(1 for n in b.assign if n not in a.assign)
    return changed + added


# ------------------------------------------------------------ render / parse

def _fmt_const(c: float) -> str:
    s = repr(float(c))
    if s.endswith(".0"):
        s = s[:-2]
    return f"({s})" if c < 0 else s


def render(tree: ExpressionTree) -> str:
    def rec(n: int) -> str:
        op = tree.assign[n]
        if op == CONST:
            return _fmt_const(tree.consts[n])
        if is_var(op):
            return op
        if op in UNARY_OPS:
            return f"{op}({rec(2 * n + 1)})"
        return f"({rec(2 * n)}{op}{rec(2 * n + 1)})"

    return rec(1)


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<sym>[-+*/()]))"
)


def _tokenize(s: str) -> list[tuple[str, str, int]]:
    out, pos = [], 0
    while pos < len(s):
        if s[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(s, pos)
        if m is None or m.end() == pos:
            at = len(s) - len(s[pos:].lstrip())
            raise ParseError(f"unexpected character {s[at]!r}", at)
        kind = m.lastgroup
        start = m.start(kind)
        out.append((kind, m.group(kind), start))
        pos = m.end()
    out.append(("end", "", len(s)))
    return out


class _Parser:
    def __init__(self, text: str, d: int):
        self.toks = _tokenize(text)
        self.i = 0
        self.d = d

    def peek(self):
        return self.toks[self.i]

    def take(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, value: str):
        kind, v, pos = self.take()
        if v != value:
            raise ParseError(f"expected {value!r}, found {v or 'end of input'!r}", pos)

    # AST nodes: ("op", tag, left, right) | ("var", tag) | ("cst", value)
    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "sym":
            op = self.take()[1]
            node = ("op", op, node, self.term())
        return node

    def term(self):
        node = self.atom()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "sym":
            op = self.take()[1]
            node = ("op", op, node, self.atom())
        return node

    def atom(self):
        kind, v, pos = self.take()
        if kind == "num":
            return ("cst", float(v))
        if kind == "sym" and v == "-" and self.peek()[0] == "num":
            return ("cst", -float(self.take()[1]))
        if kind == "sym" and v == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            if v in UNARY_OPS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return ("op", v, None, arg)
            if is_var(v):
                if not 1 <= var_index(v) <= self.d:
                    raise ParseError(f"variable {v} outside x1..x{self.d}", pos)
                return ("var", v)
            raise ParseError(f"unknown name {v!r}", pos)
        raise ParseError(f"unexpected {v or 'end of input'!r}", pos)


def parse(text: str, d: int, shape: NodeSet | None = None) -> ExpressionTree:
    """Parse infix text (``+ - * /``, ``sqrt exp log``, ``x1..xd``, numbers)."""
    p = _Parser(text, d)
    ast = p.expr()
    kind, v, pos = p.peek()
    if kind != "end":
        raise ParseError(f"unexpected {v!r}", pos)
    assign: dict[int, str] = {}
    consts: dict[int, float] = {}
    stack = [(ast, 1)]
    while stack:
        node, n = stack.pop()
        if n >= 2 ** (MAX_DEPTH + 1):
            raise ParseError(f"expression deeper than {MAX_DEPTH}", 0)
        if node[0] == "cst":
            assign[n], consts[n] = CONST, node[1]
        elif node[0] == "var":
            assign[n] = node[1]
        else:
            assign[n] = node[1]
            if node[2] is not None:
                stack.append((node[2], 2 * n))
            stack.append((node[3], 2 * n + 1))
    return ExpressionTree(assign, consts, shape)


# ------------------------------------------------------------------ counting

def count_trees(d: int, n_binary_ops: int, depth: int) -> int:
    """Trees of depth <= ``depth`` built from ``d`` variables and binary operators."""
    t = d
    for _ in range(depth):
        t = d + n_binary_ops * t * t
    return t


def enumerate_binary_trees(d: int, ops: Iterable[str], depth: int) -> Iterator[ExpressionTree]:
    """All variable-leaf trees of depth <= ``depth`` with the given binary operators."""
    ops = tuple(ops)

    def rec(n: int, remaining: int) -> Iterator[dict[int, str]]:
        for j in range(1, d + 1):
            yield {n: var(j)}
        if remaining == 0:
            return
        for op in ops:
            for left in rec(2 * n, remaining - 1):
                for right in rec(2 * n + 1, remaining - 1):
                    yield {n: op, **left, **right}

    for a in rec(1, depth):
        yield ExpressionTree(a)
