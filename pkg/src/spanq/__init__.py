"""Span queries: expression trees of inference calls with commutativity hints,
an optimizer for cache and attention locality, and a simulated serving stack."""

from .optimizer import optimize, reduce_for_attention
from .query import A, C, F, G, G1, GenParams, Node, Op, R, S, SpanQuery, U, join, plus, span, validate
from .sexpr import parse_sexpr, render

__version__ = "0.1.0"

__all__ = [
    "A", "C", "F", "G", "G1", "GenParams", "Node", "Op", "R", "S", "SpanQuery", "U", "join",
    "optimize", "parse_sexpr", "plus", "reduce_for_attention", "render", "span", "validate",
]
