import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srminlp.exprcore import CONST, NodeSet
from srminlp.lemmalab import (
    MAX_UNIVERSE,
    BigMInstance,
    UniverseTooLarge,
    _instance,
    binary_universe,
    random_bigm_instances,
    verify_all,
    verify_bigm_lemma,
    verify_implication_example,
    verify_redundancy_lemma,
    verify_tree_lemma,
)
from srminlp.model import IMPROVED


@pytest.fixture(scope="module")
def tree_report():
    return verify_tree_lemma(("+", "sqrt", "x1", "x2", "x3"), NodeSet.perfect_tree(2))


def test_tree_lemma_strict(tree_report):
    v = tree_report.verdicts
    assert v["S_subset_T"] and v["strict"] and tree_report.passed
    assert tree_report.counts["T_minus_S"] > 0


def test_tree_lemma_universe_size(tree_report):
    # five choices at every internal node (4 ops + empty), four at each leaf
    assert tree_report.universe == 6 ** 3 * 4 ** 4


def test_tree_lemma_figure_points(tree_report):
    v = tree_report.verdicts
    # the drawn assignment leaves x3 under an empty node, which a baseline row forbids
    assert v["fig_b_in_T"] is False and v["fig_b_in_S"] is False
    assert v["fig_b_shifted_in_T"] is True and v["fig_b_shifted_in_S"] is False
    assert any("cozad:grammar5" in n for n in tree_report.notes)


def test_tree_lemma_equal_on_tiny_universe():
    rep = verify_tree_lemma(("x1",), NodeSet([1]))
    assert rep.verdicts["S_subset_T"] and not rep.verdicts["strict"]
    assert not rep.passed


def test_tree_lemma_counts_small():
    rep = verify_tree_lemma(("+", "x1"), NodeSet.perfect_tree(1))
    # S: x1 at the root, or + over (x1, x1)
    assert rep.counts["S"] == 2
    assert rep.counts["T"] > rep.counts["S"]


def test_universe_cap():
    inst = _instance(("+", "-", "*", "/", "sqrt", "x1", "x2", "x3"), NodeSet.perfect_tree(3), IMPROVED)
    with pytest.raises(UniverseTooLarge):
        binary_universe(inst)
    assert MAX_UNIVERSE == 2 ** 24


def test_binary_universe_rows_unique():
    inst = _instance(("+", "x1"), NodeSet.perfect_tree(1), IMPROVED)
    Y = binary_universe(inst)
    assert len({tuple(r) for r in Y}) == len(Y) == 3 * 2 * 2
    assert (Y.sum(axis=1) <= 3).all()


# ------------------------------------------------------------------- big-M

def test_bigm_worked_instance():
    inst = BigMInstance(3, 2, (1.0, 2.0), 5.0)
    rep = verify_bigm_lemma(inst)
    assert rep.passed
    x, y = inst.witness()
    assert x == pytest.approx(1 / 3 + 2 * 5 / 3)
    assert rep.witnesses[0]["S_violation"] == pytest.approx(1.0)


def test_bigm_single_row_not_strict():
    rep = verify_bigm_lemma(BigMInstance(3, 1, (1.0,), 5.0))
    assert rep.verdicts["binary_equal"] and not rep.verdicts["strict"]
    assert not rep.passed


def test_bigm_instance_validation():
    with pytest.raises(ValueError):
        BigMInstance(2, 3, (1.0, 2.0, 3.0), 5.0)
    with pytest.raises(ValueError):
        BigMInstance(2, 2, (1.0,), 5.0)
    with pytest.raises(ValueError):
        BigMInstance(2, 1, (6.0,), 5.0)


def test_random_bigm_instances():
    insts = random_bigm_instances(20, seed=3)
    assert len(insts) == 20
    assert all(2 <= i.k <= i.m <= 5 for i in insts)
    assert all(verify_bigm_lemma(i, samples=200).passed for i in insts)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.data())
def test_bigm_merge_equal_on_binaries(m, data):
    k = data.draw(st.integers(1, m))
    w = tuple(data.draw(st.lists(st.floats(-5, 5, allow_nan=False), min_size=k, max_size=k)))
    M = max(w) + data.draw(st.floats(0.1, 10))
    inst = BigMInstance(m, k, w, M)
    for i in range(m):
        e = [0.0] * m
        e[i] = 1.0
        for x in np.linspace(min(w) - 1, M + 1, 41):
            assert inst.in_s(x, e) == inst.in_t(x, e)
    # the merged row is never weaker on the simplex
    for _ in range(20):
        y = np.array(data.draw(st.lists(st.floats(0, 1), min_size=m, max_size=m)))
        if y.sum() == 0:
            continue
        y = y / y.sum()
        x = data.draw(st.floats(min(w) - 1, M + 1))
        if inst.in_s(x, y):
            assert inst.in_t(x, y)


# -------------------------------------------------------------- redundancy

@pytest.mark.parametrize("ops,depth", [(("+", "-", "sqrt", "x1", CONST), 1), (("+", "/", "x1", CONST), 2)])
def test_redundancy_lemma(ops, depth):
    rep = verify_redundancy_lemma(ops, NodeSet.perfect_tree(depth))
    assert rep.verdicts["binary_equal"]
    assert rep.verdicts["strict"]
    assert rep.passed


def test_redundancy_without_constant():
    rep = verify_redundancy_lemma(("+", "x1"), NodeSet.perfect_tree(1))
    assert rep.verdicts["binary_equal"] and rep.passed
    assert not rep.verdicts["strict"]


# ------------------------------------------------------------- implication

def test_implication_example_exact():
    rep = verify_implication_example()
    assert rep.passed
    assert rep.verdicts["relaxed_feasible"] and rep.verdicts["cut_violated"]
    assert abs(rep.verdicts["cut_residual"] - 0.8) <= 1e-12
    assert rep.counts == {"constraints": 11, "implication_cuts": 1}


def test_verify_all_passes():
    reports = verify_all()
    assert len(reports) == 1 + 20 + 2 + 1
    assert all(r.passed for r in reports)
    assert all(r.to_json() for r in reports)
