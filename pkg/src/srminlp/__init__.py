"""Symbolic regression by mixed-integer nonlinear programming.

Expression trees, the MINLP formulation evaluated point-wise, an exact
branch-and-prune search, the STreCH local-branching heuristic, lemma checks
and a small benchmark harness.
"""
from .exprcore import (
    Dataset,
    DomainError,
    EvalBounds,
    ExpressionTree,
    NodeSet,
    ParseError,
    RangeError,
    distance,
    evaluate,
    parse,
    render,
)
from .model import FormulationConfig, ModelInstance, build, check_point, embed_tree, export_model, objective
from .search import SearchParams, SolveResult, apply_fix_level, fit_constants, res_minlp

__version__ = "1.0.0"
