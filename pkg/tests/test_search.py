import itertools
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srminlp.exprcore import CONST, Dataset, EvalBounds, ExpressionTree, NodeSet, distance, parse, render
from srminlp.model import BINARY, FormulationConfig, ModelInstance, build, check_point, embed_tree
from srminlp.search import (
    IMPROVED_STOP,
    INFEASIBLE,
    NODE_LIMIT,
    OPTIMAL,
    TIME_LIMIT,
    AllStartsFailed,
    InstanceError,
    SearchParams,
    apply_fix_level,
    fit_constants,
    iter_structures,
    res_minlp,
    strip_ghosts,
    tree_error,
)


def sample(f, n=10, d=2, lo=0.5, hi=2.0, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=(n, d))
    return Dataset(x, f(x))


def make(data, ops=("+",), depth=1, name="Imp-F", constants=True, **bounds):
    return ModelInstance.create(data, ops, depth=depth, bounds=EvalBounds(**bounds) if bounds else None,
                                config=FormulationConfig.named(name), constants=constants)


def test_sum_depth_one():
    data = sample(lambda x: x[:, 0] + x[:, 1], n=5)
    res = res_minlp(make(data, constants=False))
    assert res.status == OPTIMAL
    assert res.train_error == 0.0
    assert render(res.tree) == "(x1+x2)"


def test_brute_force_agrees_on_depth_one():
    data = sample(lambda x: x[:, 0] * x[:, 1] + 0.3, n=8)
    inst = make(data, ops=("+", "-", "*", "/"))
    res = res_minlp(inst)
    # independent oracle: every depth <= 1 tree over {+,-,*,/,x1,x2}
    leaves = ["x1", "x2"]
    best = min(
        tree_error(parse(f"{a}{op}{b}", 2, inst.shape), inst)[0]
        for op in "+-*/" for a, b in itertools.product(leaves, repeat=2)
    )
    assert res.train_error <= best + 1e-12


def test_single_point_fit_exactly():
    data = Dataset(np.array([[3.0]]), np.array([7.0]))
    res = res_minlp(make(data, c_lo=-10, c_up=10))
    assert res.tree is not None and res.train_error < 1e-20
    assert res.tree.has_variable


def test_anchor_pins_structure():
    data = sample(lambda x: 1.5 / (x[:, 0] * x[:, 1]))
    inst = make(data, ops=("+", "-", "*", "/"), depth=2, c_lo=-10, c_up=10)
    anchor = parse("2.0/x1", 2, inst.shape)
    res = res_minlp(inst, SearchParams(distance=(anchor, 0, 0)))
    assert res.tree.same_structure(anchor)
    assert res.tree.consts[2] != 2.0


def test_distance_window_respected():
    data = sample(lambda x: 1.5 / (x[:, 0] * x[:, 1]))
    inst = make(data, ops=("+", "-", "*", "/"), depth=2, c_lo=-10, c_up=10)
    anchor = parse("2.0/x1", 2, inst.shape)
    for k1, k2 in [(0, 1), (1, 2), (3, 3)]:
        res = res_minlp(inst, SearchParams(distance=(anchor, k1, k2)))
        if res.tree is not None:
            assert k1 <= distance(anchor, res.tree) <= k2
    res = res_minlp(inst, SearchParams(distance=(anchor, 3, 3)))
    assert res.train_error < 1e-20
    assert distance(anchor, res.tree) == 3


# ------------------------------------------------------------------ fitting

def test_fit_linear_constant_matches_closed_form():
    x = np.array([[0.5], [1.0], [1.5], [2.0]])
    z = 2.5 * x[:, 0]
    inst = make(Dataset(x, z), ops=("*",), c_lo=-10, c_up=10)
    tree = ExpressionTree({1: "*", 2: CONST, 3: "x1"}, {2: 0.0}, inst.shape)
    consts, err = fit_constants(tree, inst)
    oracle = float((x[:, 0] * z).sum() / (x[:, 0] ** 2).sum())
    assert consts[2] == pytest.approx(oracle, abs=1e-10)
    assert err < 1e-20


def test_fit_constant_on_zero_target():
    data = Dataset(np.array([[1.0], [2.0]]), np.zeros(2))
    inst = make(data)
    consts, err = fit_constants(ExpressionTree({1: CONST}, {1: 1.0}), inst)
    assert consts[1] == 0.0 and err == 0.0


def test_fit_all_starts_fail():
    data = Dataset(np.array([[-5.0], [-6.0]]), np.zeros(2))
    inst = make(data, ops=("+", "sqrt"), depth=2)
    tree = ExpressionTree({1: "sqrt", 3: "+", 6: CONST, 7: "x1"}, {6: 0.0}, inst.shape)
    with pytest.raises(AllStartsFailed):
        fit_constants(tree, inst)


def test_fit_is_deterministic():
    data = sample(lambda x: np.sqrt(x[:, 0] + 0.7) * 1.3)
    inst = make(data, ops=("+", "*", "sqrt"), depth=2)
    tree = ExpressionTree({1: "*", 2: CONST, 3: "sqrt", 7: "+", 14: "x1", 15: CONST}, {2: 0.0, 15: 0.0})
    assert fit_constants(tree, inst, seed=4) == fit_constants(tree, inst, seed=4)
    consts, err = fit_constants(tree, inst, seed=4)
    assert consts[2] == pytest.approx(1.3, abs=1e-6) and consts[15] == pytest.approx(0.7, abs=1e-6)


def test_fit_bad_rows_penalized():
    data = Dataset(np.array([[1.0], [0.0]]), np.array([1.0, 1.0]))
    inst = make(data, ops=("/",))
    tree = ExpressionTree({1: "/", 2: CONST, 3: "x1"}, {2: 0.0}, inst.shape)
    consts, err = fit_constants(tree, inst)
    assert err == pytest.approx((0.0 + 20.0 ** 2) / 2, rel=1e-9)


def test_integer_constants_rounded():
    data = sample(lambda x: x[:, 0] + 1.02, n=6, d=1)
    inst = make(data)
    tree = ExpressionTree({1: "+", 2: "x1", 3: CONST}, {3: 0.0}, inst.shape)
    from srminlp.search import _fit
    from srminlp.exprcore import compile_tree
    consts, err, ok = _fit(compile_tree(tree, inst.bounds), tree.const_nodes, inst, 0, True)
    assert consts[3] == 1.0 and ok


# ---------------------------------------------------------------- fix level

def test_fix_level_examples():
    t = parse("1.5/(x1*x2)", 2)
    assert apply_fix_level(t, 1) == {(1, "/"), (3, "*")}
    assert apply_fix_level(t, 2) == {(1, "/")}
    assert apply_fix_level(t, 5) == frozenset()
    with pytest.raises(ValueError):
        apply_fix_level(t, 0)


def test_frozen_nodes_kept():
    data = sample(lambda x: x[:, 0] * x[:, 1])
    inst = make(data, ops=("+", "-", "*", "/"), depth=2)
    anchor = parse("(x1+x2)-x1", 2, inst.shape)
    res = res_minlp(inst, SearchParams(distance=(anchor, 0, 4), fix_level=1))
    assert res.tree.assign[1] == "-" and res.tree.assign[2] == "+"


# ------------------------------------------------------------------- limits

def test_node_limit_and_status():
    data = sample(lambda x: x[:, 0] * x[:, 1] + x[:, 0])
    inst = make(data, ops=("+", "-", "*", "/"), depth=2, constants=False)
    res = res_minlp(inst, SearchParams(node_limit=5))
    assert res.status == NODE_LIMIT and res.nodes_explored <= 5
    full = res_minlp(inst)
    assert full.status == OPTIMAL and full.train_error < 1e-20


def test_time_limit_and_stop_flag():
    data = sample(lambda x: x[:, 0] * x[:, 1] + x[:, 0])
    inst = make(data, ops=("+", "-", "*", "/"), depth=2)
    assert res_minlp(inst, SearchParams(time_limit=0.0)).status == TIME_LIMIT
    ev = threading.Event()
    ev.set()
    assert res_minlp(inst, SearchParams(stop=ev)).status == TIME_LIMIT


def test_improved_stop_and_epsilon():
    data = sample(lambda x: x[:, 0] * x[:, 1])
    inst = make(data, ops=("+", "-", "*", "/"), depth=1, constants=False)
    start = parse("x1+x2", 2, inst.shape)
    res = res_minlp(inst, SearchParams(), start=start)
    assert res.status == IMPROVED_STOP
    assert res.train_error < 0.999 * tree_error(start, inst)[0]
    res = res_minlp(inst, SearchParams(epsilon_opt=1e-12))
    assert res.status == OPTIMAL and render(res.tree) == "(x1*x2)"


def test_infeasible_window_and_instance_error():
    data = sample(lambda x: x[:, 0])
    inst = make(data, ops=("+",), depth=1, constants=False)
    anchor = parse("x1", 2, inst.shape)
    assert res_minlp(inst, SearchParams(distance=(anchor, 9, 9))).status == INFEASIBLE
    empty = ModelInstance(data, ("+", "x1", "x2"), NodeSet.perfect_tree(1), config=FormulationConfig.named("Imp-N"))
    # x1 and x2 are all negative-free, so a structure exists; a shape with no operand does not
    with pytest.raises(InstanceError):
        res_minlp(ModelInstance(data, ("sqrt",), NodeSet.perfect_tree(1)))
    assert res_minlp(empty).tree is not None


def test_params_validation():
    t = parse("x1", 1)
    with pytest.raises(ValueError):
        SearchParams(distance=(t, 3, 1))
    with pytest.raises(ValueError):
        SearchParams(fix_level=0)
    with pytest.raises(ValueError):
        SearchParams(improve_factor=0.0)


def test_result_json_keys():
    data = sample(lambda x: x[:, 0] + x[:, 1], n=5)
    res = res_minlp(make(data, constants=False))
    assert set(__import__("json").loads(res.to_json())) == {"expression", "train_error", "status", "nodes_explored"}


# ------------------------------------------------------------- enumeration

def _recursive_trees(ops, leaves, depth):
    def rec(n, left):
        for leaf in leaves:
            yield {n: leaf}
        if left == 0:
            return
        for op in ops:
            for a in rec(2 * n, left - 1):
                for b in rec(2 * n + 1, left - 1):
                    yield {n: op, **a, **b}
    return rec(1, depth)


def test_enumerates_every_structure_once():
    data = sample(lambda x: x[:, 0])
    inst = make(data, ops=("+", "*"), depth=2, name="Imp-N", constants=False)
    seen = [tuple(sorted(strip_ghosts(a).items())) for a in iter_structures(inst)]
    assert len(seen) == len(set(seen))
    oracle = {tuple(sorted(t.items())) for t in _recursive_trees("+*", ["x1", "x2"], 2)}
    assert set(seen) == oracle


def test_results_are_formulation_feasible():
    data = sample(lambda x: x[:, 0] / (x[:, 1] + 1.0))
    inst = make(data, ops=("+", "-", "*", "/"), depth=2)
    res = res_minlp(inst)
    p = embed_tree(res.tree, inst)
    assert check_point(build(inst), p, BINARY, 1e-6).feasible


def test_deterministic():
    data = sample(lambda x: np.sqrt(x[:, 0]) * 0.7 + x[:, 1])
    inst = make(data, ops=("+", "*", "sqrt"), depth=2)
    a = res_minlp(inst, SearchParams(node_limit=300, seed=3))
    b = res_minlp(inst, SearchParams(node_limit=300, seed=3))
    assert a.to_json() == b.to_json()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 10_000))
def test_window_soundness(k1, dk, seed):
    data = sample(lambda x: x[:, 0] * x[:, 1], n=4, seed=seed)
    inst = make(data, ops=("+", "*"), depth=2, constants=False)
    anchor = parse("x1+x2", 2, inst.shape)
    k2 = k1 + dk
    res = res_minlp(inst, SearchParams(distance=(anchor, k1, k2)))
    if res.tree is not None:
        assert k1 <= distance(anchor, res.tree) <= k2
