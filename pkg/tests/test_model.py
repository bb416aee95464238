import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srminlp.exprcore import CONST, Dataset, EvalBounds, ExpressionTree, NodeSet, parse
from srminlp.lemmalab import example_instance, example_point
from srminlp.model import (
    BASELINE,
    BINARY,
    IMPROVED,
    RELAXED,
    ConfigError,
    FormulationConfig,
    ModelInstance,
    ModelPoint,
    add_distance_restriction,
    build,
    check_point,
    embed_tree,
    export_model,
    objective,
    read_model,
    var_key,
    var_name,
    write_model,
)

OPS5 = ("+", "-", "*", "/", "sqrt")


def data(n=10, d=2, seed=0, lo=0.5, hi=2.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=(n, d))
    return Dataset(x, x.sum(axis=1))


def inst(name="Imp-F", ops=OPS5, depth=2, d=2, n=10, **kw):
    return ModelInstance.create(data(n, d), ops, depth=depth, config=FormulationConfig.named(name), **kw)


# ------------------------------------------------------------------- config

@pytest.mark.parametrize("name", ["Imp-F", "Imp-R", "Imp-S", "Imp-N", "Coz-F", "Coz-R", "Coz-S", "Coz-N"])
def test_named_formulations_roundtrip(name):
    cfg = FormulationConfig.named(name)
    assert cfg.name == name
    assert cfg.variant == (IMPROVED if name.startswith("Imp") else BASELINE)
    assert cfg.include_implication == (name == "Imp-F")


def test_config_errors():
    with pytest.raises(ConfigError):
        FormulationConfig.named("Foo-F")
    with pytest.raises(ConfigError):
        FormulationConfig(lam=-1.0)
    with pytest.raises(ConfigError):
        ModelInstance.create(data(), ("+", "^"))
    with pytest.raises(ConfigError):
        ModelInstance(data(d=1), ("+", "x2"), NodeSet.perfect_tree(1))


def test_admissible_pairs():
    i = inst(depth=1)
    ops = set(i.ops)
    operands = {"x1", "x2", CONST}
    assert set(i.pairs) == {(1, o) for o in ops} | {(n, o) for n in (2, 3) for o in operands}


# ------------------------------------------------------------------- counts

def test_value_defining_counts():
    imp = build(inst("Imp-F"))
    base = build(inst("Coz-F"))
    assert imp.count(labels=["varub", "varlb"]) == 2 * 10 * 7 == 140
    assert base.count(labels=["noneub", "nonelb", "indepub", "indeplb"]) == 2 * 10 * 7 * 3 == 420


def test_improved_and_baseline_tree_labels():
    imp = build(inst("Imp-N"))
    base = build(inst("Coz-N"))
    assert set(imp.select(families=["tree"]).label_counts()) == {
        "grammar1", "grammar2", "cozad:grammar1", "cozad:grammar2"}
    assert set(base.select(families=["tree"]).label_counts()) == {f"cozad:grammar{i}" for i in range(1, 7)}


def test_no_implication_cuts_for_positive_data():
    sys_ = build(inst("Imp-F", ops=OPS5 + ("log",)))
    assert sys_.count(family="implication") == 0


def test_optional_families_follow_config():
    assert build(inst("Imp-N")).count(family="symmetry") == 0
    assert build(inst("Imp-N")).count(family="redundancy") == 0
    assert build(inst("Imp-S")).count(family="symmetry") > 0
    assert build(inst("Imp-R")).count(family="redundancy") > 0


# -------------------------------------------------------------- the example

def test_example_system_rows():
    sys_ = build(example_instance(False))
    labels = sorted(c.label for c in sys_)
    assert len(sys_) == 11
    assert labels.count("varub") == 2 and labels.count("varlb") == 2
    assert {"sqrtub", "sqrtlb", "sqrtdomain", "grammar1", "cozad:grammar1", "cozad:grammar2"} <= set(labels)
    dom = next(c for c in sys_ if c.label == "sqrtdomain")
    assert dom.expression() == "-1.0*v_1_3 + 10.01*y_1_sqrt + -10.0"
    sq_ub = next(c for c in sys_ if c.label == "sqrtub")
    # M = v_up - min(0, v_lo) + 0 after expanding the tangent bound
    assert any(t.coef == 110.0 for t in sq_ub.terms)


def test_example_point_relaxed_feasible_and_cut():
    point = example_point()
    assert check_point(build(example_instance(False)), point, RELAXED).feasible
    cut = build(example_instance(True)).select(families=["implication"])
    assert len(cut) == 1
    rep = check_point(cut, point, RELAXED)
    assert len(rep.violations) == 1
    assert rep.violations[0].residual == pytest.approx(0.8, abs=1e-12)
    # binary mode also flags the fractional y values
    assert "integrality" in check_point(build(example_instance(False)), point, BINARY).families()


def test_figure_b_assignment():
    i_imp = ModelInstance.create(data(d=3), ("+", "sqrt"), depth=2, config=FormulationConfig.named("Imp-N"),
                                 constants=False)
    i_base = i_imp.replace(config=FormulationConfig.named("Coz-N"))
    p = ModelPoint(y={(1, "x1"): 1.0, (2, "x2"): 1.0, (7, "x3"): 1.0})
    imp_rep = check_point(build(i_imp).select(families=["tree"]), p, BINARY)
    assert {"grammar1", "grammar2"} <= imp_rep.labels()
    base_rep = check_point(build(i_base).select(families=["tree"]), p, BINARY)
    # the detached x3 below an empty node breaks one of the baseline rows as well
    assert base_rep.labels() == {"cozad:grammar5"}
    shifted = ModelPoint(y={(1, "x1"): 1.0, (4, "x2"): 1.0, (7, "x3"): 1.0})
    assert check_point(build(i_base).select(families=["tree"]), shifted, BINARY).feasible
    assert not check_point(build(i_imp).select(families=["tree"]), shifted, BINARY).feasible


def test_all_zero_y_needs_a_variable():
    rep = check_point(build(inst("Coz-N")).select(families=["tree"]), ModelPoint(), BINARY)
    assert "cozad:grammar2" in rep.labels()


# ---------------------------------------------------------------- objective

def test_objective_values():
    i = ModelInstance.create(Dataset(np.array([[1.0], [2.0]]), np.array([1.0, 3.0])), ("+",), depth=1)
    p = ModelPoint(y={(1, "+"): 1.0, (2, "x1"): 1.0, (3, "x1"): 1.0}, v={(0, 1): 0.0, (1, 1): 0.0})
    assert objective(i, p) == 5.0
    i2 = i.replace(config=FormulationConfig(lam=0.1))
    assert objective(i2, p) == pytest.approx(5.3, abs=1e-12)


def test_embed_constant_tree_single_point():
    d = Dataset(np.array([[0.5]]), np.array([1.25]))
    i = ModelInstance.create(d, ("+",), depth=1, config=FormulationConfig.named("Imp-N"))
    t = ExpressionTree({1: CONST}, {1: 1.25}, i.shape)
    p = embed_tree(t, i)
    assert objective(i, p) == 0.0
    rep = check_point(build(i).select(families=["value"]), p, BINARY)
    assert rep.feasible


def test_embed_pendulum_value_rows():
    rng = np.random.default_rng(1)
    x = np.column_stack([rng.uniform(0.5, 2, 5), rng.uniform(9, 10, 5)])
    z = 2 * math.pi * np.sqrt(x[:, 0] / x[:, 1])
    i = ModelInstance.create(Dataset(x, z), OPS5, depth=3, bounds=EvalBounds(c_lo=-10, c_up=10),
                             config=FormulationConfig.named("Imp-N"))
    t = parse("(2*3.141592653589793)*sqrt(x1/x2)", 2, i.shape)
    p = embed_tree(t, i)
    rep = check_point(build(i), p, BINARY, tol=1e-9)
    assert rep.feasible, rep.to_json()
    assert objective(i, p) < 1e-20


def test_redun2_on_non_perfect_node():
    # node 1 is not perfect on this shape, so the subtraction pattern applies there
    shape = NodeSet([1, 2, 3, 6, 7])
    i = ModelInstance(data(d=3), ("+", "-", "x1", "x2", "x3"), shape, EvalBounds(), FormulationConfig.named("Imp-R"))
    sys_ = build(i).select(families=["redundancy"])
    bad = embed_tree(parse("x1+(x2-x3)", 3, shape), i)
    ok = embed_tree(parse("x1-(x2-x3)", 3, shape), i)
    assert "redun2" in check_point(sys_, bad, BINARY).labels()
    assert "redun2" not in check_point(sys_, ok, BINARY).labels()


# ----------------------------------------------------------------- distance

def test_distance_restriction_examples():
    i = inst(depth=2)
    anchor = parse("2.0/x1", 2, i.shape)
    cand = embed_tree(parse("1.5/(x1*x2)", 2, i.shape), i)
    base = build(i).select(families=["tree"])
    assert check_point(add_distance_restriction(base, anchor, 0, 0), embed_tree(anchor, i)).feasible
    assert not check_point(add_distance_restriction(base, anchor, 0, 2), cand).feasible
    assert check_point(add_distance_restriction(base, anchor, 3, 3), cand).feasible
    with pytest.raises(ValueError):
        add_distance_restriction(base, anchor, 2, 1)


# ------------------------------------------------------------------- export

def test_export_example_document():
    doc = __import__("json").loads(export_model(example_instance(False)))
    kinds = [v["type"] for v in doc["variables"]]
    assert kinds.count("binary") == 3
    assert kinds.count("continuous") == 2
    assert len(doc["constraints"]) == 11
    assert {c["family"] for c in doc["constraints"]} == {"tree", "value", "redundancy", "symmetry"} & {
        c["family"] for c in doc["constraints"]}


def test_export_without_optional_families():
    i = inst("Imp-N", depth=1)
    doc = __import__("json").loads(export_model(i))
    assert {c["family"] for c in doc["constraints"]} == {"tree", "value"}


def test_export_deterministic_and_roundtrip(tmp_path):
    i = inst("Imp-F", depth=2, n=3)
    text = export_model(i)
    assert text == export_model(i)
    back, system = read_model(text)
    assert export_model(back) == text
    assert export_model(back, system) == text
    path = tmp_path / "m.srmodel.json"
    write_model(path, i)
    assert path.read_text() == text


def test_variable_names_roundtrip():
    for key in [("y", 3, "+"), ("y", 5, "sqrt"), ("y", 2, "x2"), ("y", 7, CONST), ("c", 4), ("v", 0, 6)]:
        assert var_key(var_name(key)) == key
    assert var_name(("v", 0, 6)) == "v_1_6"
    assert var_name(("y", 1, "/")) == "y_1_div"


# --------------------------------------------------------------- properties

_tree_ops = ("+", "-", "*", "/", "sqrt")


@st.composite
def rooted_trees(draw):
    shape = NodeSet.perfect_tree(2)
    assign, consts = {}, {}

    def grow(n):
        terminal = shape.is_terminal(n)
        op = draw(st.sampled_from(("x1", "x2", CONST) if terminal else _tree_ops + ("x1", "x2", CONST)))
        assign[n] = op
        if op == CONST:
            consts[n] = draw(st.floats(-2, 2, allow_nan=False))
        if op in ("+", "-", "*", "/"):
            grow(2 * n)
        if op in _tree_ops:
            grow(2 * n + 1)

    grow(1)
    return ExpressionTree(assign, consts, shape)


_VALUE_INST = ModelInstance.create(data(n=4), _tree_ops, depth=2, config=FormulationConfig.named("Imp-N"))
_VALUE_ROWS = build(_VALUE_INST).select(families=["value"])
_BASE_INST = _VALUE_INST.replace(config=FormulationConfig.named("Coz-N"))
_BASE_ROWS = build(_BASE_INST).select(families=["value"])


@settings(max_examples=300, deadline=None)
@given(rooted_trees())
def test_big_m_rows_hold_at_embedded_trees(t):
    try:
        p = embed_tree(t, _VALUE_INST)
    except ArithmeticError:
        return
    assert check_point(_VALUE_ROWS, p, BINARY, 1e-9).feasible
    assert check_point(_BASE_ROWS, p, BINARY, 1e-9).feasible


@settings(max_examples=300, deadline=None)
@given(rooted_trees())
def test_symmetry_rows_match_first_row_order(t):
    i = _VALUE_INST.replace(config=FormulationConfig.named("Imp-S"))
    try:
        p = embed_tree(t, i)
    except ArithmeticError:
        return
    rows = build(i).select(families=["symmetry"])
    want = all(p.v[(0, 2 * n)] >= p.v[(0, 2 * n + 1)] - 1e-9
               for n, op in t.assign.items() if op in ("+", "*") and n in i.shape.perfect)
    assert check_point(rows, p, BINARY, 1e-9).feasible == want
