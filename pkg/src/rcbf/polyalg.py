"""Sparse multivariate polynomials over named variable blocks.

Polynomials are the common currency of the package: dynamics, barrier
candidates, KKT rows, relaxation objectives and certificates are all
instances of :class:`Polynomial`. A polynomial is a coefficient map from
dense exponent tuples to floats, owned by a :class:`VariableSpace` that
fixes the scalar-variable order. Monomials compare under a graded
lexicographic order derived from that fixed order, so every basis built
downstream is deterministic.

All objects are immutable after construction and all operations are pure.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import ParseError, SpaceMismatchError

# Coefficients below this magnitude are dropped during canonicalization.
DROP_TOL = 1e-12


@dataclass(frozen=True)
class VariableSpace:
    """Ordered named blocks of scalar variables.

    Blocks are (name, dimension) pairs; a block of dimension one
    contributes a scalar variable named after the block itself, larger
    blocks contribute ``name1 .. namek``.
    """

    blocks: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [b[0] for b in self.blocks]
        if len(set(names)) != len(names):
            raise SpaceMismatchError(f"duplicate block names in {names}")
        for name, dim in self.blocks:
            if dim < 0:
                raise SpaceMismatchError(f"block {name} has negative dimension")

    @property
    def nvars(self) -> int:
        return sum(d for _, d in self.blocks)

    @property
    def names(self) -> tuple[str, ...]:
        """Scalar variable names in the fixed total order."""
        out = []
        for name, dim in self.blocks:
            if dim == 1:
                out.append(name)
            else:
                out.extend(f"{name}{i + 1}" for i in range(dim))
        return tuple(out)

    def block_dim(self, name: str) -> int:
        for bname, dim in self.blocks:
            if bname == name:
                return dim
        raise SpaceMismatchError(f"no block named {name!r}")

    def block_slice(self, name: str) -> slice:
        """Index range of a block within the scalar order."""
        start = 0
        for bname, dim in self.blocks:
            if bname == name:
                return slice(start, start + dim)
            start += dim
        raise SpaceMismatchError(f"no block named {name!r}")

    def index_of(self, varname: str) -> int:
        try:
            return self.names.index(varname)
        except ValueError:
            raise SpaceMismatchError(
                f"variable {varname!r} not in space {self.names}"
            ) from None

    def subspace(self, block_names: Sequence[str]) -> "VariableSpace":
        keep = {n for n in block_names}
        blocks = tuple(b for b in self.blocks if b[0] in keep)
        missing = keep - {b[0] for b in blocks}
        if missing:
            raise SpaceMismatchError(f"blocks {sorted(missing)} not in space")
        return VariableSpace(blocks)

    def __repr__(self):
        inner = ", ".join(f"{n}[{d}]" for n, d in self.blocks)
        return f"VariableSpace({inner})"


def grlex_key(exps: tuple[int, ...]) -> tuple:
    """Sort key realizing the graded lexicographic order (ascending)."""
    return (sum(exps), exps)


@dataclass(frozen=True)
class Monomial:
    """Dense exponent vector with graded-lex comparison."""

    exps: tuple[int, ...]

    @property
    def degree(self) -> int:
        return sum(self.exps)

    def powers(self) -> dict[int, int]:
        """Sparse view: variable index -> positive exponent."""
        return {i: e for i, e in enumerate(self.exps) if e > 0}

    def __mul__(self, other: "Monomial") -> "Monomial":
        return Monomial(tuple(a + b for a, b in zip(self.exps, other.exps)))

    def __lt__(self, other: "Monomial") -> bool:
        return grlex_key(self.exps) < grlex_key(other.exps)


class Polynomial:
    """Immutable sparse polynomial with real coefficients."""

    __slots__ = ("space", "_coeffs")

    def __init__(self, space: VariableSpace, coeffs: Mapping[tuple[int, ...], float]):
        canon: dict[tuple[int, ...], float] = {}
        n = space.nvars
        for exps, c in coeffs.items():
            if len(exps) != n:
                raise SpaceMismatchError(
                    f"exponent tuple {exps} does not match {n} variables"
                )
            if abs(c) >= DROP_TOL:
                canon[tuple(exps)] = float(c)
        self.space = space
        self._coeffs = canon

    # ---------------------------------------------------------------- basics
    @staticmethod
    def zero(space: VariableSpace) -> "Polynomial":
        return Polynomial(space, {})

    @staticmethod
    def constant(space: VariableSpace, value: float) -> "Polynomial":
        return Polynomial(space, {(0,) * space.nvars: value})

    @staticmethod
    def variable(space: VariableSpace, name: str) -> "Polynomial":
        i = space.index_of(name)
        exps = [0] * space.nvars
        exps[i] = 1
        return Polynomial(space, {tuple(exps): 1.0})

    def items(self):
        return self._coeffs.items()

    def coeff(self, exps: tuple[int, ...]) -> float:
        return self._coeffs.get(tuple(exps), 0.0)

    @property
    def is_zero(self) -> bool:
        return not self._coeffs

    def degree(self) -> int:
        """Total degree; zero polynomial reports degree 0."""
        return max((sum(e) for e in self._coeffs), default=0)

    def degree_in(self, var_indices: Iterable[int]) -> int:
        idx = list(var_indices)
        return max((sum(e[i] for i in idx) for e in self._coeffs), default=0)

    def support_vars(self) -> set[int]:
        out: set[int] = set()
        for e in self._coeffs:
            out.update(i for i, p in enumerate(e) if p > 0)
        return out

    def __len__(self):
        return len(self._coeffs)

    def __eq__(self, other):
        return (
            isinstance(other, Polynomial)
            and self.space == other.space
            and self._coeffs == other._coeffs
        )

    def __hash__(self):
        return hash((self.space, frozenset(self._coeffs.items())))

    # ------------------------------------------------------------ arithmetic
    def _check(self, other: "Polynomial"):
        if self.space != other.space:
            raise SpaceMismatchError(
                f"operands live in different spaces: {self.space} vs {other.space}"
            )

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.space, other)
        self._check(other)
        out = dict(self._coeffs)
        for e, c in other._coeffs.items():
            out[e] = out.get(e, 0.0) + c
        return Polynomial(self.space, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.space, {e: -c for e, c in self._coeffs.items()})

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.space, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(other)
        self._check(other)
        out: dict[tuple[int, ...], float] = {}
        for e1, c1 in self._coeffs.items():
            for e2, c2 in other._coeffs.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, 0.0) + c1 * c2
        return Polynomial(self.space, out)

    __rmul__ = __mul__

    def scale(self, s: float) -> "Polynomial":
        return Polynomial(self.space, {e: c * s for e, c in self._coeffs.items()})

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise ValueError("only nonnegative integer powers")
        result = Polynomial.constant(self.space, 1.0)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base if k > 1 else base
            k >>= 1
        return result

    # ------------------------------------------------------------- calculus
    def differentiate(self, var) -> "Polynomial":
        """Exact partial derivative w.r.t. a variable (index or name)."""
        i = var if isinstance(var, int) else self.space.index_of(var)
        if not 0 <= i < self.space.nvars:
            raise SpaceMismatchError(f"variable index {i} out of range")
        out: dict[tuple[int, ...], float] = {}
        for e, c in self._coeffs.items():
            if e[i] == 0:
                continue
            d = list(e)
            d[i] -= 1
            out[tuple(d)] = out.get(tuple(d), 0.0) + c * e[i]
        return Polynomial(self.space, out)

    # ------------------------------------------------------------ evaluation
    def _flatten_assignment(self, assignment: Mapping) -> list[float]:
        """Accept either block -> vector or scalar-name -> value maps."""
        vals: list[float | None] = [None] * self.space.nvars
        names = self.space.names
        for key, v in assignment.items():
            if any(key == b[0] and b[1] != 1 for b in self.space.blocks) or (
                isinstance(v, (list, tuple)) or hasattr(v, "__len__")
            ):
                sl = self.space.block_slice(key)
                vec = list(v) if hasattr(v, "__len__") else [v]
                if len(vec) != sl.stop - sl.start:
                    raise SpaceMismatchError(
                        f"block {key!r} expects {sl.stop - sl.start} values, got {len(vec)}"
                    )
                for j, x in enumerate(vec):
                    vals[sl.start + j] = float(x)
            else:
                vals[names.index(key)] = float(v)
        needed = self.support_vars()
        missing = [names[i] for i in needed if vals[i] is None]
        if missing:
            raise SpaceMismatchError(f"assignment missing variables {missing}")
        return [0.0 if v is None else v for v in vals]

    def evaluate(self, assignment: Mapping) -> float:
        """Evaluate at a point given as {block: vector} or {var: value}."""
        vals = self._flatten_assignment(assignment)
        total = 0.0
        for e, c in self._coeffs.items():
            term = c
            for i, p in enumerate(e):
                if p:
                    term *= vals[i] ** p
            total += term
        return total

    def evaluate_many(self, columns: Mapping) -> "object":
        """Vectorized evaluation; columns maps blocks/vars to equal-length arrays.

        Returns a numpy array of values, one per row of the column set.
        """
        import numpy as np

        names = self.space.names
        cols: list = [None] * self.space.nvars
        for key, v in columns.items():
            arr = np.asarray(v, dtype=float)
            if key in names and (arr.ndim == 1):
                cols[names.index(key)] = arr
            else:
                sl = self.space.block_slice(key)
                arr = np.atleast_2d(arr)
                for j in range(sl.stop - sl.start):
                    cols[sl.start + j] = arr[:, j]
        npoints = next(len(c) for c in cols if c is not None)
        out = np.zeros(npoints)
        for e, c in self._coeffs.items():
            term = np.full(npoints, c)
            for i, p in enumerate(e):
                if p:
                    if cols[i] is None:
                        raise SpaceMismatchError(
                            f"columns missing variable {names[i]!r}"
                        )
                    term = term * cols[i] ** p
            out += term
        return out

    # ----------------------------------------------------------- composition
    def substitute(self, bindings: Mapping) -> "Polynomial":
        """Replace scalar variables by polynomials or constants.

        Keys are scalar names or indices; values are Polynomial (same
        space) or numbers. Unbound variables pass through unchanged.
        """
        if not bindings:
            return self
        idx_bind: dict[int, Polynomial] = {}
        for key, v in bindings.items():
            i = key if isinstance(key, int) else self.space.index_of(key)
            if isinstance(v, (int, float)):
                v = Polynomial.constant(self.space, v)
            elif v.space != self.space:
                raise SpaceMismatchError("binding polynomial lives in another space")
            idx_bind[i] = v
        # cache powers of each binding as needed
        pow_cache: dict[tuple[int, int], Polynomial] = {}

        def bound_power(i: int, p: int) -> Polynomial:
            if (i, p) not in pow_cache:
                pow_cache[(i, p)] = idx_bind[i] ** p
            return pow_cache[(i, p)]

        total = Polynomial.zero(self.space)
        for e, c in self._coeffs.items():
            rest = list(e)
            term = None
            for i in idx_bind:
                if e[i]:
                    factor = bound_power(i, e[i])
                    rest[i] = 0
                    term = factor if term is None else term * factor
            mono = Polynomial(self.space, {tuple(rest): c})
            total = total + (mono if term is None else mono * term)
        return total

    def embed(self, target: VariableSpace) -> "Polynomial":
        """Re-express in a larger space, matching variables by name."""
        src_names = self.space.names
        tgt_names = target.names
        try:
            mapping = [tgt_names.index(n) for n in src_names]
        except ValueError as exc:
            raise SpaceMismatchError(f"target space lacks a variable: {exc}") from None
        out: dict[tuple[int, ...], float] = {}
        for e, c in self._coeffs.items():
            ne = [0] * target.nvars
            for i, p in enumerate(e):
                ne[mapping[i]] = p
            out[tuple(ne)] = c
        return Polynomial(target, out)

    def project(self, target: VariableSpace) -> "Polynomial":
        """Restrict to a smaller space; fails if support uses dropped variables."""
        src_names = self.space.names
        tgt_names = target.names
        keep = {}
        for i, n in enumerate(src_names):
            if n in tgt_names:
                keep[i] = tgt_names.index(n)
        out: dict[tuple[int, ...], float] = {}
        for e, c in self._coeffs.items():
            ne = [0] * target.nvars
            for i, p in enumerate(e):
                if p == 0:
                    continue
                if i not in keep:
                    raise SpaceMismatchError(
                        f"support uses {src_names[i]!r}, absent from target space"
                    )
                ne[keep[i]] = p
            out[tuple(ne)] = c
        return Polynomial(target, out)

    # ---------------------------------------------------------------- text
    def to_text(self) -> str:
        """Canonical term list, graded-lex sorted ascending."""
        if not self._coeffs:
            return "0"
        parts = []
        for e in sorted(self._coeffs, key=grlex_key):
            c = self._coeffs[e]
            factors = [
                f"{self.space.names[i]}^{p}" for i, p in enumerate(e) if p > 0
            ]
            if factors:
                parts.append(f"{c!r}*" + "*".join(factors))
            else:
                parts.append(f"{c!r}")
        return " + ".join(parts)

    def __repr__(self):
        return f"Polynomial({self.to_text()})"


# ------------------------------------------------------------------ parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[\^*+()-]))"
)


def parse_polynomial(text: str, space: VariableSpace) -> Polynomial:
    """Parse human or canonical polynomial text.

    Accepts forms like ``t - x1^2 - x2^2``, ``0.5*u**2``, ``2``,
    ``-1.0*x1^1*x2^1``. Parentheses are not supported; the canonical
    serialization never emits them.
    """
    tokens: list[tuple[str, str]] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            if text[pos:].strip() == "":
                break
            raise ParseError(f"bad token at {text[pos:pos + 10]!r}")
        pos = m.end()
        for kind in ("num", "name", "op"):
            if m.group(kind) is not None:
                tokens.append((kind, m.group(kind)))
                break
    if not tokens:
        raise ParseError("empty polynomial text")

    result = Polynomial.zero(space)
    i = 0
    n = len(tokens)
    while i < n:
        sign = 1.0
        while i < n and tokens[i] == ("op", "+") or i < n and tokens[i] == ("op", "-"):
            if tokens[i][1] == "-":
                sign = -sign
            i += 1
        if i >= n:
            raise ParseError("dangling sign at end of polynomial")
        coeff = sign
        exps = [0] * space.nvars
        expect_factor = True
        while i < n:
            kind, tok = tokens[i]
            if kind == "op" and tok in "+-":
                break
            if kind == "op" and tok == "*":
                i += 1
                expect_factor = True
                continue
            if not expect_factor:
                raise ParseError(f"unexpected token {tok!r}; missing '*'?")
            if kind == "num":
                coeff *= float(tok)
                i += 1
            elif kind == "name":
                vi = space.index_of(tok)
                power = 1
                if i + 1 < n and tokens[i + 1][0] == "op" and tokens[i + 1][1] in ("^", "**"):
                    if i + 2 >= n or tokens[i + 2][0] != "num":
                        raise ParseError(f"missing exponent after {tok!r}")
                    power = int(float(tokens[i + 2][1]))
                    i += 3
                else:
                    i += 1
                exps[vi] += power
            else:
                raise ParseError(f"unexpected token {tok!r}")
            expect_factor = False
        term = Polynomial(space, {tuple(exps): coeff})
        result = result + term
    return result


# ------------------------------------------------------------ basis helpers

def basis_exponents(
    nvars: int, max_degree: int, active: Sequence[int] | None = None
) -> list[tuple[int, ...]]:
    """All exponent tuples of total degree <= max_degree, grlex sorted.

    ``active`` restricts the support to a subset of variable indices;
    inactive positions stay zero.
    """
    act = list(range(nvars)) if active is None else list(active)
    out: list[tuple[int, ...]] = []

    def rec(pos: int, remaining: int, current: list[int]):
        if pos == len(act):
            out.append(tuple(current))
            return
        for p in range(remaining + 1):
            nxt = list(current)
            nxt[act[pos]] = p
            rec(pos + 1, remaining - p, nxt)

    rec(0, max_degree, [0] * nvars)
    out.sort(key=grlex_key)
    return out


def basis_size(nvars: int, degree: int) -> int:
    """Number of monomials of degree <= degree in nvars variables."""
    return math.comb(nvars + degree, degree)


def poly_arith(a: Polynomial, b, op: str) -> Polynomial:
    """Dispatch arithmetic by name: add, sub, mul, scale."""
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "scale":
        return a.scale(float(b))
    raise ValueError(f"unknown op {op!r}")
