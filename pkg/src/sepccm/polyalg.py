"""Sparse multivariate polynomials and polynomial matrices over global state indices.

Monomials are tuples of ``(var, exp)`` pairs sorted by variable index with
``exp > 0``; the empty tuple is the constant monomial.  All objects are
immutable.  Text syntax is ``coeff * v<i>^e * ...`` summed with ``+``/``-``.
"""

from __future__ import annotations

import re
from typing import Iterable, Mapping, Sequence

import numpy as np

ZERO_TOL = 1e-14

Monomial = tuple  # tuple[tuple[int, int], ...]


class DimensionError(ValueError):
    pass


class PolyParseError(ValueError):
    def __init__(self, msg: str, pos: int | None = None):
        self.pos = pos
        super().__init__(msg if pos is None else f"{msg} (at column {pos + 1})")


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    if not a:
        return b
    if not b:
        return a
    out = dict(a)
    for v, e in b:
        out[v] = out.get(v, 0) + e
    return tuple(sorted(out.items()))


def mono_degree(m: Monomial) -> int:
    return sum(e for _, e in m)


def mono_key(m: Monomial):
    """Sort key: graded, then lexicographic with lower variable indices dominating."""
    return (-mono_degree(m), tuple((v, -e) for v, e in m))


def _prune(terms: Mapping[Monomial, float]) -> dict:
    return {m: c for m, c in terms.items() if abs(c) >= ZERO_TOL}


class Polynomial:
    __slots__ = ("_terms", "_hash")

    def __init__(self, terms: Mapping[Monomial, float] | None = None):
        clean = {}
        for m, c in (terms or {}).items():
            m = tuple(sorted((int(v), int(e)) for v, e in m if e != 0))
            if any(v < 0 or e < 0 for v, e in m):
                raise ValueError(f"invalid monomial {m}")
            clean[m] = clean.get(m, 0.0) + float(c)
        self._terms = {m: clean[m] for m in sorted(_prune(clean), key=mono_key)}
        self._hash = None

    @classmethod
    def _raw(cls, terms: dict) -> "Polynomial":
        # terms must already be canonical monomials
        p = cls.__new__(cls)
        p._terms = {m: terms[m] for m in sorted(_prune(terms), key=mono_key)}
        p._hash = None
        return p

    @classmethod
    def const(cls, c: float) -> "Polynomial":
        return cls._raw({(): float(c)})

    @classmethod
    def var(cls, i: int, coeff: float = 1.0) -> "Polynomial":
        return cls._raw({((int(i), 1),): float(coeff)})

    @classmethod
    def monomial(cls, m: Monomial, coeff: float = 1.0) -> "Polynomial":
        return cls({m: coeff})

    @property
    def terms(self) -> dict:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def is_zero(self) -> bool:
        return not self._terms

    def is_constant(self) -> bool:
        return all(not m for m in self._terms)

    def constant_term(self) -> float:
        return self._terms.get((), 0.0)

    def coeff(self, m: Monomial) -> float:
        return self._terms.get(m, 0.0)

    def variables(self) -> frozenset:
        return frozenset(v for m in self._terms for v, _ in m)

    def degree(self) -> int:
        return max((mono_degree(m) for m in self._terms), default=0)

    def __len__(self) -> int:
        return len(self._terms)

    # arithmetic

    def __add__(self, other) -> "Polynomial":
        other = _coerce(other)
        out = dict(self._terms)
        for m, c in other._terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial._raw(out)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial._raw({m: -c for m, c in self._terms.items()})

    def __sub__(self, other) -> "Polynomial":
        return self + (-_coerce(other))

    def __rsub__(self, other) -> "Polynomial":
        return _coerce(other) - self

    def __mul__(self, other) -> "Polynomial":
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(float(other))
        other = _coerce(other)
        out: dict = {}
        for ma, ca in self._terms.items():
            for mb, cb in other._terms.items():
                m = mono_mul(ma, mb)
                out[m] = out.get(m, 0.0) + ca * cb
        return Polynomial._raw(out)

    __rmul__ = __mul__

    def __pow__(self, k: int) -> "Polynomial":
        if k < 0:
            raise ValueError("negative power")
        out = Polynomial.const(1.0)
        for _ in range(k):
            out = out * self
        return out

    def scale(self, s: float) -> "Polynomial":
        return Polynomial._raw({m: s * c for m, c in self._terms.items()})

    def diff(self, v: int) -> "Polynomial":
        out: dict = {}
        for m, c in self._terms.items():
            for k, (var, e) in enumerate(m):
                if var == v:
                    nm = m[:k] + (((var, e - 1),) if e > 1 else ()) + m[k + 1 :]
                    out[nm] = out.get(nm, 0.0) + c * e
                    break
        return Polynomial._raw(out)

    def substitute_shift(self, mapping: Mapping[int, int]) -> "Polynomial":
        """Rename variables through ``mapping`` (missing keys are kept)."""
        out: dict = {}
        for m, c in self._terms.items():
            nm = tuple(sorted((mapping.get(v, v), e) for v, e in m))
            out[nm] = out.get(nm, 0.0) + c
        return Polynomial._raw(out)

    def __call__(self, x) -> float:
        return eval_poly(self, x)

    # comparison

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float)):
            other = Polynomial.const(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(tuple(self._terms.items()))
        return self._hash

    def allclose(self, other: "Polynomial", atol: float = 1e-10) -> bool:
        keys = set(self._terms) | set(other._terms)
        return all(abs(self.coeff(m) - other.coeff(m)) <= atol for m in keys)

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    def __str__(self) -> str:
        return format_poly(self)

    def __repr__(self) -> str:
        return f"Polynomial({format_poly(self)!r})"


def _coerce(x) -> Polynomial:
    if isinstance(x, Polynomial):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Polynomial.const(float(x))
    raise TypeError(f"cannot convert {type(x).__name__} to Polynomial")


ZERO = Polynomial()
ONE = Polynomial.const(1.0)


def eval_poly(p: Polynomial, x) -> float:
    x = np.asarray(x, dtype=float)
    total = 0.0
    for m, c in p.items():
        term = c
        for v, e in m:
            if v >= x.shape[0]:
                raise DimensionError(f"variable v{v} out of range for state of dimension {x.shape[0]}")
            term *= x[v] ** e
        total += term
    return float(total)


def diff_poly(p: Polynomial, v: int) -> Polynomial:
    return p.diff(v)


def poly_arith(a: Polynomial, b, op: str) -> Polynomial:
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "scale":
        return a.scale(float(b))
    raise ValueError(f"unknown op {op!r}")


# text syntax

def _fmt_coeff(c: float) -> str:
    s = repr(float(c))
    return s[:-2] if s.endswith(".0") and "e" not in s else s


def format_poly(p: Polynomial) -> str:
    if p.is_zero():
        return "0"
    parts = []
    for k, (m, c) in enumerate(p.items()):
        sign = "-" if c < 0 else "+"
        body = _fmt_coeff(abs(c))
        for v, e in m:
            body += f"*v{v}" + (f"^{e}" if e > 1 else "")
        if k == 0:
            parts.append(("-" if sign == "-" else "") + body)
        else:
            parts.append(f" {sign} {body}")
    return "".join(parts)


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<var>v\d+)|(?P<op>[-+*^]))"
)


def parse_poly(text: str) -> Polynomial:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        mt = _TOKEN.match(text, pos)
        if mt is None or mt.end() == pos:
            raise PolyParseError(f"unexpected character {text[pos:pos + 1]!r}", pos)
        kind = mt.lastgroup
        tokens.append((kind, mt.group(kind), mt.start(kind)))
        pos = mt.end()
    if not tokens:
        raise PolyParseError("empty polynomial", 0)

    terms: dict = {}
    i = 0

    def peek():
        return tokens[i] if i < len(tokens) else (None, None, len(text))

    sign = 1.0
    expect_term = True
    while i < len(tokens):
        kind, val, at = peek()
        if expect_term:
            if kind == "op" and val in "+-":
                sign = -sign if val == "-" else sign
                i += 1
                continue
            coeff = sign
            mono: dict = {}
            need_factor = True
            while True:
                kind, val, at = peek()
                if need_factor:
                    if kind == "num":
                        coeff *= float(val)
                        i += 1
                    elif kind == "var":
                        var = int(val[1:])
                        i += 1
                        exp = 1
                        if peek()[0] == "op" and peek()[1] == "^":
                            i += 1
                            k2, v2, a2 = peek()
                            if k2 != "num" or not v2.isdigit():
                                raise PolyParseError("exponent must be a nonnegative integer", a2)
                            exp = int(v2)
                            i += 1
                        mono[var] = mono.get(var, 0) + exp
                    else:
                        raise PolyParseError("expected number or variable", at)
                    need_factor = False
                elif kind == "op" and val == "*":
                    i += 1
                    need_factor = True
                else:
                    break
            m = tuple(sorted((v, e) for v, e in mono.items() if e))
            terms[m] = terms.get(m, 0.0) + coeff
            expect_term = False
            sign = 1.0
        else:
            if kind == "op" and val in "+-":
                sign = -1.0 if val == "-" else 1.0
                i += 1
                expect_term = True
                # a sign following a binary operator is folded in the term loop
                continue
            raise PolyParseError(f"unexpected token {val!r}", at)
    if expect_term:
        raise PolyParseError("dangling operator", len(text))
    return Polynomial(terms)


# vectors and matrices

class PolyVector:
    __slots__ = ("entries",)

    def __init__(self, entries: Iterable):
        self.entries = tuple(_coerce(e) for e in entries)
        if not self.entries:
            raise DimensionError("PolyVector needs at least one entry")

    @property
    def dim(self) -> int:
        return len(self.entries)

    def __getitem__(self, k) -> Polynomial:
        return self.entries[k]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, PolyVector) and self.entries == other.entries

    def eval(self, x) -> np.ndarray:
        return np.array([eval_poly(p, x) for p in self.entries])

    def variables(self) -> frozenset:
        return frozenset().union(*(p.variables() for p in self.entries))

    def jacobian(self, vars: Sequence[int]) -> "PolyMatrix":
        return PolyMatrix.from_rows([[p.diff(v) for v in vars] for p in self.entries])


class PolyMatrix:
    """Row-major matrix of polynomials; ``symmetric`` promises entry(i,j) == entry(j,i)."""

    __slots__ = ("rows", "cols", "entries", "symmetric")

    def __init__(self, rows: int, cols: int, entries: Iterable, symmetric: bool = False):
        self.rows = int(rows)
        self.cols = int(cols)
        self.entries = tuple(_coerce(e) for e in entries)
        if self.rows <= 0 or self.cols <= 0 or len(self.entries) != self.rows * self.cols:
            raise DimensionError(f"{len(self.entries)} entries do not fill a {rows}x{cols} matrix")
        if symmetric:
            if self.rows != self.cols:
                raise DimensionError("symmetric matrix must be square")
            for i in range(self.rows):
                for j in range(i + 1, self.cols):
                    if self.entries[i * self.cols + j] != self.entries[j * self.cols + i]:
                        raise ValueError(f"entry ({i},{j}) differs from ({j},{i})")
        self.symmetric = bool(symmetric)

    @classmethod
    def from_rows(cls, rows, symmetric: bool = False) -> "PolyMatrix":
        rows = [list(r) for r in rows]
        return cls(len(rows), len(rows[0]), [e for r in rows for e in r], symmetric)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "PolyMatrix":
        return cls(rows, cols, [ZERO] * (rows * cols), symmetric=rows == cols)

    @classmethod
    def identity(cls, n: int) -> "PolyMatrix":
        return cls(n, n, [ONE if i == j else ZERO for i in range(n) for j in range(n)], True)

    @classmethod
    def from_array(cls, a) -> "PolyMatrix":
        a = np.atleast_2d(np.asarray(a, dtype=float))
        sym = a.shape[0] == a.shape[1] and np.array_equal(a, a.T)
        return cls(a.shape[0], a.shape[1], [Polynomial.const(v) for v in a.ravel()], sym)

    @classmethod
    def symmetric_from_upper(cls, n: int, upper: Mapping) -> "PolyMatrix":
        entries = [ZERO] * (n * n)
        for (i, j), p in upper.items():
            if i > j:
                i, j = j, i
            entries[i * n + j] = entries[j * n + i] = _coerce(p)
        return cls(n, n, entries, symmetric=True)

    @property
    def shape(self):
        return (self.rows, self.cols)

    def __getitem__(self, ij) -> Polynomial:
        i, j = ij
        return self.entries[i * self.cols + j]

    def __eq__(self, other):
        return isinstance(other, PolyMatrix) and self.shape == other.shape and self.entries == other.entries

    def column(self, j: int) -> PolyVector:
        return PolyVector([self[i, j] for i in range(self.rows)])

    def variables(self) -> frozenset:
        return frozenset().union(*(p.variables() for p in self.entries))

    def is_zero(self) -> bool:
        return all(p.is_zero() for p in self.entries)

    def is_constant(self) -> bool:
        return all(p.is_constant() for p in self.entries)

    def T(self) -> "PolyMatrix":
        return PolyMatrix(
            self.cols, self.rows,
            [self[i, j] for j in range(self.cols) for i in range(self.rows)],
            self.symmetric,
        )

    def map(self, fn, symmetric: bool | None = None) -> "PolyMatrix":
        return PolyMatrix(self.rows, self.cols, [fn(p) for p in self.entries],
                          self.symmetric if symmetric is None else symmetric)

    def __add__(self, other: "PolyMatrix") -> "PolyMatrix":
        _same_shape(self, other)
        return PolyMatrix(self.rows, self.cols, [a + b for a, b in zip(self.entries, other.entries)],
                          self.symmetric and other.symmetric)

    def __sub__(self, other: "PolyMatrix") -> "PolyMatrix":
        _same_shape(self, other)
        return PolyMatrix(self.rows, self.cols, [a - b for a, b in zip(self.entries, other.entries)],
                          self.symmetric and other.symmetric)

    def __neg__(self) -> "PolyMatrix":
        return self.map(lambda p: -p)

    def scale(self, s) -> "PolyMatrix":
        if isinstance(s, Polynomial):
            return self.map(lambda p: p * s)
        return self.map(lambda p: p.scale(float(s)))

    def __matmul__(self, other: "PolyMatrix") -> "PolyMatrix":
        if self.cols != other.rows:
            raise DimensionError(f"cannot multiply {self.shape} by {other.shape}")
        out = []
        for i in range(self.rows):
            for j in range(other.cols):
                acc: dict = {}
                for k in range(self.cols):
                    a = self[i, k]
                    b = other[k, j]
                    if a.is_zero() or b.is_zero():
                        continue
                    for ma, ca in a.items():
                        for mb, cb in b.items():
                            m = mono_mul(ma, mb)
                            acc[m] = acc.get(m, 0.0) + ca * cb
                out.append(Polynomial._raw(acc))
        return PolyMatrix(self.rows, other.cols, out)

    def symmetrized(self) -> "PolyMatrix":
        """Mark as symmetric after checking entries agree to relative rounding; copies upper to lower."""
        n = self.rows
        up = {}
        for i in range(n):
            for j in range(i, n):
                a, b = self[i, j], self[j, i]
                tol = 1e-12 * max(1.0, a.max_abs_coeff(), b.max_abs_coeff())
                if not a.allclose(b, atol=tol):
                    raise ValueError(f"matrix is not symmetric at ({i},{j})")
                up[(i, j)] = self[i, j]
        return PolyMatrix.symmetric_from_upper(n, up)

    def diff(self, v: int) -> "PolyMatrix":
        return self.map(lambda p: p.diff(v))

    def eval(self, x) -> np.ndarray:
        return polymat_eval(self, x)

    def block(self, r0: int, c0: int, nr: int, nc: int) -> "PolyMatrix":
        return PolyMatrix(nr, nc, [self[r0 + i, c0 + j] for i in range(nr) for j in range(nc)],
                          self.symmetric and r0 == c0 and nr == nc)

    def allclose(self, other: "PolyMatrix", atol: float = 1e-10) -> bool:
        return self.shape == other.shape and all(
            a.allclose(b, atol) for a, b in zip(self.entries, other.entries)
        )


def _same_shape(a: PolyMatrix, b: PolyMatrix):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")


def polymat_eval(W: PolyMatrix, x) -> np.ndarray:
    out = np.empty(W.shape)
    if W.symmetric:
        for i in range(W.rows):
            for j in range(i, W.cols):
                out[i, j] = out[j, i] = eval_poly(W[i, j], x)
    else:
        for i in range(W.rows):
            for j in range(W.cols):
                out[i, j] = eval_poly(W[i, j], x)
    return out


def block_diag(blocks: Sequence[PolyMatrix]) -> PolyMatrix:
    rows = sum(b.rows for b in blocks)
    cols = sum(b.cols for b in blocks)
    entries = [ZERO] * (rows * cols)
    r0 = c0 = 0
    for b in blocks:
        for i in range(b.rows):
            for j in range(b.cols):
                entries[(r0 + i) * cols + c0 + j] = b[i, j]
        r0 += b.rows
        c0 += b.cols
    return PolyMatrix(rows, cols, entries, symmetric=all(b.symmetric for b in blocks) and rows == cols)


def directional_derivative(W: PolyMatrix, fv: PolyVector, vars: Sequence[int]) -> PolyMatrix:
    """Entrywise sum_k dW/dx_{vars[k]} * fv[k]."""
    if len(vars) != fv.dim:
        raise DimensionError(f"{len(vars)} variables for a direction of dimension {fv.dim}")
    used = W.variables()
    pairs = [(v, f) for v, f in zip(vars, fv.entries) if v in used and not f.is_zero()]

    def one(p: Polynomial) -> Polynomial:
        acc = ZERO
        for v, f in pairs:
            d = p.diff(v)
            if not d.is_zero():
                acc = acc + d * f
        return acc

    if W.symmetric:
        n = W.rows
        return PolyMatrix.symmetric_from_upper(n, {(i, j): one(W[i, j]) for i in range(n) for j in range(i, n)})
    return W.map(one)


# vectorized evaluation

class CompiledPolys:
    """Batch evaluator for a list of polynomials over a chosen list of global variables.

    ``vars[k]`` is the global index read from column ``k`` of the input points.
    """

    def __init__(self, polys: Sequence[Polynomial], vars: Sequence[int]):
        self.vars = tuple(int(v) for v in vars)
        col = {v: k for k, v in enumerate(self.vars)}
        monos: dict = {}
        for p in polys:
            for m in p._terms:
                for v, _ in m:
                    if v not in col:
                        raise DimensionError(f"variable v{v} not among compiled variables {self.vars}")
                monos.setdefault(m, len(monos))
        if () not in monos:
            monos[()] = len(monos)
        self.monomials = list(monos)
        self.exponents = np.zeros((len(monos), len(self.vars)), dtype=np.int64)
        for m, r in monos.items():
            for v, e in m:
                self.exponents[r, col[v]] = e
        self.coeffs = np.zeros((len(monos), len(polys)))
        for k, p in enumerate(polys):
            for m, c in p._terms.items():
                self.coeffs[monos[m], k] = c
        self.max_exp = int(self.exponents.max(initial=0))
        self.n_out = len(polys)

    def monomial_values(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.vars):
            raise DimensionError(f"points have {X.shape[1]} columns, expected {len(self.vars)}")
        out = np.ones((X.shape[0], len(self.monomials)))
        for k in range(len(self.vars)):
            ek = self.exponents[:, k]
            if not ek.any():
                continue
            powers = X[:, k : k + 1] ** np.arange(self.max_exp + 1)
            out *= powers[:, ek]
        return out

    def __call__(self, X) -> np.ndarray:
        return self.monomial_values(X) @ self.coeffs


class CompiledMatrix:
    """Batch evaluator of a PolyMatrix; returns arrays of shape (P, rows, cols)."""

    def __init__(self, W: PolyMatrix, vars: Sequence[int]):
        self.shape = W.shape
        self.symmetric = W.symmetric
        if W.symmetric:
            n = W.rows
            self.idx = [(i, j) for i in range(n) for j in range(i, n)]
        else:
            self.idx = [(i, j) for i in range(W.rows) for j in range(W.cols)]
        self._polys = CompiledPolys([W[i, j] for i, j in self.idx], vars)
        self._rows = np.array([i for i, _ in self.idx])
        self._cols = np.array([j for _, j in self.idx])

    def __call__(self, X) -> np.ndarray:
        vals = self._polys(X)
        out = np.empty((vals.shape[0],) + self.shape)
        out[:, self._rows, self._cols] = vals
        if self.symmetric:
            out[:, self._cols, self._rows] = vals
        return out
