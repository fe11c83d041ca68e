"""Payoff expressions over fixing vectors, written in prefix notation.

Grammar::

    expr   := NUMBER | ATOM | "(" OP expr* ")"
    ATOM   := "x" K            (coordinate 1 of fixing K)
            | "x" K "_" I      (coordinate I, 1-based, of fixing K)

Fixings are numbered from 0 (the spot at the start) to N (maturity).

Operators: ``+`` and ``*`` (any arity), ``-`` (unary or binary), ``neg``,
``abs``, ``max``/``min``/``avg`` (any arity), ``call e K`` = ``(e - K)+``,
``put e K`` = ``(K - e)+`` and ``step e`` = ``1{e > 0}``.  ``step`` makes the
payoff discontinuous; such payoffs are flagged, never rejected.

Example: ``(call (avg x1 x2) 100)`` is an arithmetic Asian call on two fixings.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np


class PayoffParseError(ValueError):
    pass


class PayoffValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Ref:
    fixing: int
    coord: int  # zero-based


@dataclass(frozen=True)
class Op:
    name: str
    args: tuple


Node = Union[Num, Ref, Op]

_ARITY = {
    "+": (1, None), "*": (1, None), "-": (1, 2), "neg": (1, 1), "abs": (1, 1),
    "max": (1, None), "min": (1, None), "avg": (1, None),
    "call": (2, 2), "put": (2, 2), "step": (1, 1),
}
_TOKEN = re.compile(r"\s*(\(|\)|[^\s()]+)")
_ATOM = re.compile(r"x(\d+)(?:_(\d+))?$")


def _tokenize(text: str) -> list[str]:
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise PayoffParseError(f"unexpected input at offset {pos}")
        out.append(m.group(1))
        pos = m.end()
    return out


def parse_expression(text: str) -> Node:
    tokens = _tokenize(text)
    if not tokens:
        raise PayoffParseError("empty payoff expression")
    node, pos = _parse(tokens, 0)
    if pos != len(tokens):
        raise PayoffParseError(f"trailing tokens after expression: {tokens[pos:]}")
    return node


def _parse(tokens: list[str], pos: int) -> tuple[Node, int]:
    if pos >= len(tokens):
        raise PayoffParseError("unexpected end of expression")
    tok = tokens[pos]
    if tok == ")":
        raise PayoffParseError("unexpected ')'")
    if tok != "(":
        return _atom(tok), pos + 1
    if pos + 1 >= len(tokens):
        raise PayoffParseError("unexpected end after '('")
    name = tokens[pos + 1]
    if name not in _ARITY:
        raise PayoffParseError(f"unknown operator {name!r}")
    pos += 2
    args = []
    while pos < len(tokens) and tokens[pos] != ")":
        node, pos = _parse(tokens, pos)
        args.append(node)
    if pos >= len(tokens):
        raise PayoffParseError("missing ')'")
    lo, hi = _ARITY[name]
    if len(args) < lo or (hi is not None and len(args) > hi):
        raise PayoffParseError(f"operator {name!r} got {len(args)} arguments")
    return Op(name, tuple(args)), pos + 1


def _atom(tok: str) -> Node:
    m = _ATOM.match(tok)
    if m:
        coord = int(m.group(2)) if m.group(2) else 1
        if coord < 1:
            raise PayoffParseError(f"coordinates are 1-based: {tok!r}")
        return Ref(int(m.group(1)), coord - 1)
    try:
        value = float(tok)
    except ValueError:
        raise PayoffParseError(f"bad token {tok!r}") from None
    if not np.isfinite(value):
        raise PayoffParseError(f"non-finite constant {tok!r}")
    return Num(value)


def _eval(node: Node, X: np.ndarray) -> np.ndarray:
    if isinstance(node, Num):
        return np.full(X.shape[:-2], node.value)
    if isinstance(node, Ref):
        return X[..., node.fixing, node.coord]
    a = [_eval(arg, X) for arg in node.args]
    name = node.name
    if name == "+":
        return sum(a[1:], a[0])
    if name == "*":
        out = a[0]
        for b in a[1:]:
            out = out * b
        return out
    if name == "-":
        return -a[0] if len(a) == 1 else a[0] - a[1]
    if name == "neg":
        return -a[0]
    if name == "abs":
        return np.abs(a[0])
    if name == "max":
        return np.maximum.reduce(np.broadcast_arrays(*a)) if len(a) > 1 else a[0]
    if name == "min":
        return np.minimum.reduce(np.broadcast_arrays(*a)) if len(a) > 1 else a[0]
    if name == "avg":
        return sum(a[1:], a[0]) / len(a)
    if name == "call":
        return np.maximum(a[0] - a[1], 0.0)
    if name == "put":
        return np.maximum(a[1] - a[0], 0.0)
    if name == "step":
        return (a[0] > 0).astype(float)
    raise PayoffParseError(f"unknown operator {name!r}")  # pragma: no cover


def _walk(node: Node):
    yield node
    if isinstance(node, Op):
        for arg in node.args:
            yield from _walk(arg)


@dataclass(frozen=True)
class LipschitzProbe:
    worst_ratio: float
    declared: float
    passed: bool
    pairs: int


@dataclass(frozen=True)
class PayoffSpec:
    """A parsed payoff ``h(x_0, ..., x_N)`` with its declared growth data.

    ``lipschitz_p`` and ``lipschitz_L`` are the user's ``(p, L)`` in
    ``|h(x) - h(y)| <= (1 + m**p) L sum_i |x_i - y_i|`` for ``|x_i|, |y_i| <= m``.
    """

    text: str
    n_fixings: int  # N, so fixings are 0..N
    dim: int = 1
    lipschitz_p: float = 0.0
    lipschitz_L: float | None = None
    tree: Node = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        tree = parse_expression(self.text) if self.tree is None else self.tree
        object.__setattr__(self, "tree", tree)
        if self.n_fixings < 1:
            raise PayoffValidationError("need at least one fixing after the start")
        for node in _walk(tree):
            if isinstance(node, Ref):
                if node.fixing > self.n_fixings:
                    raise PayoffValidationError(
                        f"x{node.fixing} refers past the last fixing {self.n_fixings}")
                if node.coord >= self.dim:
                    raise PayoffValidationError(
                        f"coordinate {node.coord + 1} exceeds dimension {self.dim}")

    @classmethod
    def parse(cls, text: str, n_fixings: int, dim: int = 1, lipschitz_p: float = 0.0,
              lipschitz_L: float | None = None) -> "PayoffSpec":
        return cls(text, n_fixings, dim, lipschitz_p, lipschitz_L)

    @property
    def discontinuous(self) -> bool:
        return any(isinstance(n, Op) and n.name == "step" for n in _walk(self.tree))

    @property
    def depends_on(self) -> frozenset[int]:
        """Fixing indices that occur in the expression."""
        return frozenset(n.fixing for n in _walk(self.tree) if isinstance(n, Ref))

    def evaluate(self, fixings) -> np.ndarray:
        """``h`` at fixings of shape ``(..., N + 1, d)`` (or ``(..., N + 1)`` if d = 1)."""
        X = np.asarray(fixings, dtype=float)
        if self.dim == 1 and (X.ndim == 1 or X.shape[-1] != 1):
            X = X[..., None]
        if X.shape[-2:] != (self.n_fixings + 1, self.dim):
            raise PayoffValidationError(
                f"fixings have shape {X.shape}, expected (..., {self.n_fixings + 1}, {self.dim})")
        out = np.asarray(_eval(self.tree, X), dtype=float)
        return np.broadcast_to(out, X.shape[:-2]).copy() if out.shape != X.shape[:-2] else out

    def __call__(self, fixings) -> np.ndarray:
        return self.evaluate(fixings)

    def scaled(self, c: float) -> "PayoffSpec":
        tree = Op("*", (Num(float(c)), self.tree))
        L = None if self.lipschitz_L is None else abs(c) * self.lipschitz_L
        return PayoffSpec(f"(* {float(c)!r} {self.text})", self.n_fixings, self.dim,
                          self.lipschitz_p, L, tree)

    def lipschitz_probe(self, center, radius: float, pairs: int = 1000, seed: int = 0,
                        step: float = 0.05) -> LipschitzProbe:
        """Spot-check the declared ``(p, L)`` on random nearby pairs.

        Points are drawn uniformly in the box ``center +- radius`` and each is
        paired with a perturbation of relative size ``step``.  With no
        declared ``L`` the worst observed ratio is reported and the probe passes.
        """
        rng = np.random.default_rng(seed)
        shape = (pairs, self.n_fixings + 1, self.dim)
        c = np.broadcast_to(np.asarray(center, float), shape[1:])
        X = c + rng.uniform(-radius, radius, shape)
        Y = X + rng.uniform(-step * radius, step * radius, shape)
        m = np.maximum(np.abs(X).max(axis=(1, 2)), np.abs(Y).max(axis=(1, 2)))
        dist = np.abs(X - Y).sum(axis=(1, 2))
        ratio = np.abs(self.evaluate(X) - self.evaluate(Y)) / ((1 + m**self.lipschitz_p) * dist)
        worst = float(np.max(ratio))
        if self.lipschitz_L is None:
            return LipschitzProbe(worst, worst, True, pairs)
        return LipschitzProbe(worst, self.lipschitz_L, worst <= self.lipschitz_L * (1 + 1e-9), pairs)
