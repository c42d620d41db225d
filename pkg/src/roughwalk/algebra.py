"""Arithmetic in the step-N free nilpotent group over R^d.

Elements live in the truncated tensor algebra T^N(R^d), stored densely as one
flat coefficient vector per tensor level (level j has d^j word coefficients in
lexicographic word order).  The graded free Lie algebra g^N is coordinatised by
the Lyndon-word basis, ordered by (degree, lexicographic word); exp and log are
finite series thanks to nilpotency.  All values are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "AlgebraContext",
    "TruncatedTensor",
    "GroupElement",
    "LieElement",
    "make_context",
    "tensor_mul",
    "group_exp",
    "group_log",
    "inverse",
    "dilation",
    "homogeneous_norm",
    "distance",
    "xi_coords",
    "lie_element",
    "group_from_json",
    "group_to_json",
    "lie_from_json",
    "lie_to_json",
    "distance_matrix",
]

DEFAULT_WORD_CAP = 200_000


class SizeError(ValueError):
    """Requested (d, N) exceeds the configured word-count cap."""


class ContextMismatch(ValueError):
    """Operands belong to different algebra contexts."""


def _lyndon_words(d: int, max_len: int) -> list[tuple[int, ...]]:
    """All Lyndon words over {0..d-1} of length 1..max_len (Duval's algorithm)."""
    words = []
    w = [-1]
    while w:
        w[-1] += 1
        m = len(w)
        if m <= max_len:
            words.append(tuple(w))
        while len(w) < max_len:
            w.append(w[-m])
        while w and w[-1] == d - 1:
            w.pop()
    return sorted(words, key=lambda u: (len(u), u))


def _standard_factorization(w: tuple[int, ...], lyndon_set: frozenset) -> tuple:
    """Right standard factorization w = (u, v) with v the longest proper Lyndon suffix."""
    for i in range(1, len(w)):
        if w[i:] in lyndon_set:
            return w[:i], w[i:]
    raise ValueError(f"not a Lyndon word of length >= 2: {w}")


def _bracket_tree(w: tuple[int, ...], lyndon_set: frozenset) -> tuple | int:
    if len(w) == 1:
        return w[0]
    u, v = _standard_factorization(w, lyndon_set)
    return (_bracket_tree(u, lyndon_set), _bracket_tree(v, lyndon_set))


@dataclass(frozen=True)
class AlgebraContext:
    """Precomputed combinatorial data for T^N(R^d) and its Lyndon Lie basis."""

    d: int
    N: int
    words: tuple[tuple[int, ...], ...]          # all words length 1..N, by (len, lex)
    lie_words: tuple[tuple[int, ...], ...]      # Lyndon words, by (degree, lex)
    lie_brackets: tuple                         # nested-tuple bracketing per basis word
    degrees: np.ndarray                         # degree of each basis element, shape (m,)
    level_dims: tuple[int, ...]                 # d_j = dim g^N_j, j = 1..N
    m: int                                      # total Lie dimension
    basis_expansion: tuple[np.ndarray, ...]     # per level j: (d^j, d_j) expansion matrix
    basis_pinv: tuple[np.ndarray, ...]          # per level j: (d_j, d^j) pseudo-inverse

    def level_slice(self, j: int) -> slice:
        """Index range of degree-j basis elements inside the length-m coordinate vector."""
        lo = sum(self.level_dims[: j - 1])
        return slice(lo, lo + self.level_dims[j - 1])

    def degree_indices(self, j: int) -> np.ndarray:
        return np.arange(self.m)[self.degrees == j]

    def zero_levels(self) -> list[np.ndarray]:
        """Fresh [level0 .. levelN] coefficient arrays, all zero."""
        return [np.zeros(self.d**j) for j in range(self.N + 1)]

    def __repr__(self) -> str:  # keep reprs short; contexts embed big arrays
        return f"AlgebraContext(d={self.d}, N={self.N}, m={self.m})"


def _expand_tree(tree, d: int, N: int) -> list[np.ndarray]:
    """Tensor-level expansion of a bracket tree; returns [lvl0..lvlN] flat arrays."""
    levels = [np.zeros(d**j) for j in range(N + 1)]
    if isinstance(tree, int):
        levels[1][tree] = 1.0
        return levels
    a = _expand_tree(tree[0], d, N)
    b = _expand_tree(tree[1], d, N)
    ab = _raw_mul(a, b, N, d)
    ba = _raw_mul(b, a, N, d)
    return [x - y for x, y in zip(ab, ba)]


def _raw_mul(a: list[np.ndarray], b: list[np.ndarray], N: int, d: int) -> list[np.ndarray]:
    out = [np.zeros(d**j) for j in range(N + 1)]
    for i in range(N + 1):
        ai = a[i]
        if not ai.any() and i > 0:
            continue
        for k in range(N + 1 - i):
            bk = b[k]
            if i == 0:
                out[k] += ai[0] * bk
            elif k == 0:
                out[i] += ai * bk[0]
            else:
                out[i + k] += np.kron(ai, bk)
    return out


@lru_cache(maxsize=32)
def _cached_context(d: int, N: int, word_cap: int) -> AlgebraContext:
    total_words = sum(d**j for j in range(1, N + 1))
    if total_words > word_cap:
        raise SizeError(
            f"context (d={d}, N={N}) needs {total_words} words, cap is {word_cap}"
        )
    words = []
    for j in range(1, N + 1):
        words.extend(np.ndindex(*(d,) * j))
    lyndon = _lyndon_words(d, N)
    lyndon_set = frozenset(lyndon)
    brackets = tuple(_bracket_tree(w, lyndon_set) for w in lyndon)
    degrees = np.array([len(w) for w in lyndon])
    level_dims = tuple(int((degrees == j).sum()) for j in range(1, N + 1))
    m = len(lyndon)

    expansion, pinv = [], []
    for j in range(1, N + 1):
        cols = []
        for w, tree in zip(lyndon, brackets):
            if len(w) == j:
                cols.append(_expand_tree(tree, d, N)[j])
        E = np.column_stack(cols) if cols else np.zeros((d**j, 0))
        E.setflags(write=False)
        P = np.linalg.pinv(E)
        P.setflags(write=False)
        expansion.append(E)
        pinv.append(P)

    degrees.setflags(write=False)
    return AlgebraContext(
        d=d,
        N=N,
        words=tuple(map(tuple, words)),
        lie_words=tuple(lyndon),
        lie_brackets=brackets,
        degrees=degrees,
        level_dims=level_dims,
        m=m,
        basis_expansion=tuple(expansion),
        basis_pinv=tuple(pinv),
    )


def make_context(d: int, N: int, word_cap: int = DEFAULT_WORD_CAP) -> AlgebraContext:
    """Build (or fetch the cached) algebra context for G^N(R^d)."""
    if d < 1 or N < 1:
        raise ValueError(f"need d >= 1 and N >= 1, got d={d}, N={N}")
    return _cached_context(int(d), int(N), int(word_cap))


def _freeze(levels: list[np.ndarray]) -> tuple[np.ndarray, ...]:
    out = []
    for a in levels:
        a = np.ascontiguousarray(a, dtype=float)
        a.setflags(write=False)
        out.append(a)
    return tuple(out)


@dataclass(frozen=True)
class TruncatedTensor:
    """Element of T^N(R^d): one flat coefficient vector per level 0..N."""

    ctx: AlgebraContext
    levels: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.levels) != self.ctx.N + 1:
            raise ValueError("level count mismatch")
        for j, a in enumerate(self.levels):
            if a.shape != (self.ctx.d**j,):
                raise ValueError(f"level {j} has shape {a.shape}")
            if not np.isfinite(a).all():
                raise ValueError(f"non-finite coefficient at level {j}")

    @property
    def scalar(self) -> float:
        return float(self.levels[0][0])

    def coeff(self, word: tuple[int, ...]) -> float:
        j = len(word)
        idx = 0
        for letter in word:
            idx = idx * self.ctx.d + letter
        return float(self.levels[j][idx])


class GroupElement(TruncatedTensor):
    """Group-like tensor: scalar part 1, log lies in the Lie subspace."""

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        return tensor_mul(self, other)

    def inverse(self) -> "GroupElement":
        return inverse(self)

    def log(self) -> "LieElement":
        return group_log(self)

    def norm(self) -> float:
        return homogeneous_norm(self)


@dataclass(frozen=True)
class LieElement:
    """Element of g^N in Lyndon coordinates (length-m vector)."""

    ctx: AlgebraContext
    coords: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.coords, dtype=float)
        if c.shape != (self.ctx.m,):
            raise ValueError(f"coords shape {c.shape}, expected ({self.ctx.m},)")
        if not np.isfinite(c).all():
            raise ValueError("non-finite Lie coordinates")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    def graded_component(self, j: int) -> np.ndarray:
        """Degree-j part as a flat (d^j,) tensor vector (rho^j of the element)."""
        sl = self.ctx.level_slice(j)
        return self.ctx.basis_expansion[j - 1] @ self.coords[sl]

    def tensor(self) -> TruncatedTensor:
        levels = self.ctx.zero_levels()
        for j in range(1, self.ctx.N + 1):
            levels[j] = self.graded_component(j)
        return TruncatedTensor(self.ctx, _freeze(levels))

    def exp(self) -> GroupElement:
        return group_exp(self)

    def __add__(self, other: "LieElement") -> "LieElement":
        _check_ctx(self, other)
        return LieElement(self.ctx, self.coords + other.coords)

    def __neg__(self) -> "LieElement":
        return LieElement(self.ctx, -self.coords)

    def __rmul__(self, s: float) -> "LieElement":
        return LieElement(self.ctx, float(s) * self.coords)


def lie_element(ctx: AlgebraContext, coords) -> LieElement:
    return LieElement(ctx, np.asarray(coords, dtype=float))


def lie_basis_vector(ctx: AlgebraContext, i: int, scale: float = 1.0) -> LieElement:
    c = np.zeros(ctx.m)
    c[i] = scale
    return LieElement(ctx, c)


def identity(ctx: AlgebraContext) -> GroupElement:
    levels = ctx.zero_levels()
    levels[0][0] = 1.0
    return GroupElement(ctx, _freeze(levels))


def _check_ctx(a, b) -> None:
    if a.ctx is not b.ctx and (a.ctx.d, a.ctx.N) != (b.ctx.d, b.ctx.N):
        raise ContextMismatch(f"mixed contexts {a.ctx} and {b.ctx}")


def tensor_mul(a: GroupElement, b: GroupElement) -> GroupElement:
    """Truncated tensor (Chen) product of two group elements."""
    _check_ctx(a, b)
    out = _raw_mul(list(a.levels), list(b.levels), a.ctx.N, a.ctx.d)
    return GroupElement(a.ctx, _freeze(out))


def group_exp(ell: LieElement) -> GroupElement:
    """exp: g^N -> G^N, a finite truncated series (nilpotency kills level > N)."""
    ctx = ell.ctx
    z = list(ell.tensor().levels)
    # Horner form: 1 + z(1 + z/2(1 + ... (1 + z/N)))
    acc = ctx.zero_levels()
    acc[0][0] = 1.0
    for k in range(ctx.N, 0, -1):
        zk = [a / k for a in z]
        acc = _raw_mul(zk, acc, ctx.N, ctx.d)
        acc[0][0] += 1.0
    return GroupElement(ctx, _freeze(acc))


def _tensor_log_levels(x: GroupElement) -> list[np.ndarray]:
    ctx = x.ctx
    z = [a.copy() for a in x.levels]
    z[0][0] -= 1.0
    out = [a.copy() for a in z]
    power = z
    for k in range(2, ctx.N + 1):
        power = _raw_mul(power, z, ctx.N, ctx.d)
        sign = 1.0 if k % 2 == 1 else -1.0
        for j in range(ctx.N + 1):
            out[j] += (sign / k) * power[j]
    return out


def group_log(x: GroupElement, grouplike_tol: float | None = None) -> LieElement:
    """log: G^N -> g^N in Lyndon coordinates.

    With grouplike_tol set, raises if the log has a component outside the Lie
    subspace larger than the tolerance (group-like check).
    """
    if abs(x.scalar - 1.0) > 1e-9:
        raise ValueError(f"not group-like: scalar part {x.scalar}")
    ctx = x.ctx
    logs = _tensor_log_levels(x)
    coords = np.zeros(ctx.m)
    for j in range(1, ctx.N + 1):
        c = ctx.basis_pinv[j - 1] @ logs[j]
        coords[ctx.level_slice(j)] = c
        if grouplike_tol is not None:
            resid = np.linalg.norm(ctx.basis_expansion[j - 1] @ c - logs[j])
            if resid > grouplike_tol:
                raise ValueError(f"level-{j} log residual {resid:.3e} off the Lie subspace")
    return LieElement(ctx, coords)


def grouplike_residual(x: GroupElement) -> float:
    """Max level residual of log(x) against the Lie subspace."""
    ctx = x.ctx
    logs = _tensor_log_levels(x)
    worst = 0.0
    for j in range(1, ctx.N + 1):
        c = ctx.basis_pinv[j - 1] @ logs[j]
        worst = max(worst, float(np.linalg.norm(ctx.basis_expansion[j - 1] @ c - logs[j])))
    return worst


def inverse(x: GroupElement) -> GroupElement:
    return group_exp(-group_log(x))


def dilation(x: GroupElement, lam: float) -> GroupElement:
    """delta_lam: scales level j by lam^j."""
    levels = [x.levels[j] * lam**j for j in range(x.ctx.N + 1)]
    levels[0] = np.array([1.0])
    return GroupElement(x.ctx, _freeze(levels))


def homogeneous_norm(x: GroupElement) -> float:
    """||x|| = sum_j |x^j|^{1/j} with the Euclidean norm per tensor level."""
    total = 0.0
    for j in range(1, x.ctx.N + 1):
        nj = float(np.linalg.norm(x.levels[j]))
        total += nj ** (1.0 / j)
    return total


def distance(x: GroupElement, y: GroupElement) -> float:
    """Left-invariant distance ||x^{-1} y||."""
    return homogeneous_norm(tensor_mul(inverse(x), y))


def coeff_distance(x: TruncatedTensor, y: TruncatedTensor) -> float:
    """Largest absolute coefficient difference across all levels."""
    return max(float(np.abs(a - b).max()) for a, b in zip(x.levels, y.levels))


def coeff_deviation_from_identity(x: GroupElement) -> float:
    """Largest absolute coefficient of x - 1_N (levels 1..N plus scalar gap)."""
    dev = abs(x.scalar - 1.0)
    for j in range(1, x.ctx.N + 1):
        if x.levels[j].size:
            dev = max(dev, float(np.abs(x.levels[j]).max()))
    return dev


def xi_coords(x: GroupElement) -> np.ndarray:
    """Exponential coordinates of the first kind: log(x) in the Lyndon basis."""
    return group_log(x).coords


# ---------------------------------------------------------------------------
# Batched level arithmetic.  Used by the hot paths (distance matrices for the
# p-variation DP and oscillation counts).  A batch is a list [lvl0..lvlN] of
# arrays of shape (P, d^j).


def stack_elements(elements) -> list[np.ndarray]:
    return [
        np.stack([e.levels[j] for e in elements])
        for j in range(elements[0].ctx.N + 1)
    ]


def batch_mul(a: list[np.ndarray], b: list[np.ndarray], N: int) -> list[np.ndarray]:
    P = a[0].shape[0]
    out = [np.zeros_like(x) for x in a]
    for i in range(N + 1):
        for k in range(N + 1 - i):
            if i == 0:
                out[k] += a[0] * b[k]
            elif k == 0:
                out[i] += a[i] * b[0]
            else:
                prod = np.einsum("pi,pk->pik", a[i], b[k]).reshape(P, -1)
                out[i + k] += prod
    return out


def batch_norm(levels: list[np.ndarray]) -> np.ndarray:
    N = len(levels) - 1
    total = np.zeros(levels[0].shape[0])
    for j in range(1, N + 1):
        nj = np.linalg.norm(levels[j], axis=1)
        total += nj ** (1.0 / j)
    return total


def batch_inverse(levels: list[np.ndarray], N: int) -> list[np.ndarray]:
    """Inverse of group-like batches via the finite geometric series."""
    z = [a.copy() for a in levels]
    z[0] = z[0] - 1.0
    acc = [np.zeros_like(a) for a in levels]
    acc[0] = acc[0] + 1.0
    for _ in range(N):
        acc = batch_mul(z, acc, N)
        for j in range(N + 1):
            acc[j] = -acc[j]
        acc[0] = acc[0] + 1.0
    return acc


def distance_matrix(points) -> np.ndarray:
    """All-pairs distance matrix D[a, b] = ||x_a^{-1} x_b|| for a list of points."""
    n = len(points)
    if n == 0:
        return np.zeros((0, 0))
    ctx = points[0].ctx
    stacked = stack_elements(points)
    inv = batch_inverse(stacked, ctx.N)
    ia, ib = np.triu_indices(n, k=1)
    left = [lvl[ia] for lvl in inv]
    right = [lvl[ib] for lvl in stacked]
    norms = batch_norm(batch_mul(left, right, ctx.N))
    D = np.zeros((n, n))
    D[ia, ib] = norms
    D[ib, ia] = norms
    return D


# ---------------------------------------------------------------------------
# JSON serialization.  Levels are listed 1..N in word order; floats round-trip
# bit-stably through repr.


def group_to_json(x: GroupElement) -> dict:
    return {
        "d": x.ctx.d,
        "N": x.ctx.N,
        "levels": [x.levels[j].tolist() for j in range(1, x.ctx.N + 1)],
    }


def group_from_json(obj: dict, ctx: AlgebraContext | None = None) -> GroupElement:
    if ctx is None:
        ctx = make_context(obj["d"], obj["N"])
    levels = ctx.zero_levels()
    levels[0][0] = 1.0
    for j, vals in enumerate(obj["levels"], start=1):
        levels[j] = np.asarray(vals, dtype=float)
    return GroupElement(ctx, _freeze(levels))


def lie_to_json(ell: LieElement) -> dict:
    return {
        "d": ell.ctx.d,
        "N": ell.ctx.N,
        "levels": [
            ell.coords[ell.ctx.level_slice(j)].tolist() for j in range(1, ell.ctx.N + 1)
        ],
    }


def lie_from_json(obj: dict, ctx: AlgebraContext | None = None) -> LieElement:
    if ctx is None:
        ctx = make_context(obj["d"], obj["N"])
    coords = np.zeros(ctx.m)
    for j, vals in enumerate(obj["levels"], start=1):
        coords[ctx.level_slice(j)] = np.asarray(vals, dtype=float)
    return LieElement(ctx, coords)
