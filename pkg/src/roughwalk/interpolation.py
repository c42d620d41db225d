"""Path functions and the jump-connecting construction.

A path function turns a group element x into a unit-time continuous path from
the identity to x; connecting a cadlag path inserts a fictitious time window
for every jump (largest jumps get the longest windows) and traverses the jump
with the path function, then rescales time back to [0, T].
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import algebra, paths
from .algebra import (
    AlgebraContext,
    GroupElement,
    LieElement,
    group_exp,
    group_log,
    identity,
    inverse,
    lie_basis_vector,
    make_context,
    tensor_mul,
)
from .paths import CADLAG, LOG_LINEAR, DiscretePath, p_variation

__all__ = [
    "PathFunction",
    "ConnectConfig",
    "TimeChange",
    "log_linear_pf",
    "malcev_pf",
    "perturbed_pf",
    "staircase_pf",
    "waypoint_pf",
    "connect",
    "pvar_envelope",
    "corollary_constant",
    "generator_segments",
    "steer_segments",
    "malcev_coordinates",
    "PATH_FUNCTIONS",
]

ENDPOINT_TOL = 1e-10
DOMAIN_TOL = 1e-9


class DomainError(ValueError):
    """A jump increment falls outside the path function's domain."""


@dataclass(frozen=True)
class PathFunction:
    """Left-invariant interpolation rule x -> unit-time path from 1_N to x.

    ``approx_constant(r)`` certifies ||phi(x)||_{p_star-var} <= C(r) ||x|| for
    domain points with ||x|| < r, measured over the breakpoint skeleton.
    """

    name: str
    ctx: AlgebraContext
    rule: Callable[[GroupElement], DiscretePath]
    domain: Callable[[GroupElement], bool]
    p_star: float
    approx_constant: Callable[[float], float]

    def __call__(self, x: GroupElement) -> DiscretePath:
        return self.rule(x)

    def check_endpoints(self, x: GroupElement, tol: float = ENDPOINT_TOL) -> DiscretePath:
        path = self.rule(x)
        start = algebra.coeff_deviation_from_identity(path.points[0])
        end = algebra.coeff_distance(path.points[-1], x)
        if start > tol or end > tol:
            raise ValueError(f"{self.name}: endpoint mismatch start={start:.2e} end={end:.2e}")
        return path


def _segments_path(ctx: AlgebraContext, segments, times=None) -> DiscretePath:
    if len(segments) == 0:
        return DiscretePath(ctx, np.array([0.0, 1.0]), (identity(ctx), identity(ctx)), LOG_LINEAR)
    return paths.signature_lift(segments, ctx.N, times=times, ctx=ctx)


def _reverse_segments(segments) -> list[np.ndarray]:
    return [-s for s in reversed(segments)]


def _bracket_word_segments(ctx: AlgebraContext, tree) -> list[np.ndarray]:
    """Piecewise-linear word whose lift endpoint is exp(u_tree + higher grades)."""
    if isinstance(tree, int):
        e = np.zeros(ctx.d)
        e[tree] = 1.0
        return [e]
    a = _bracket_word_segments(ctx, tree[0])
    b = _bracket_word_segments(ctx, tree[1])
    return a + b + _reverse_segments(a) + _reverse_segments(b)


def _lift_endpoint(ctx: AlgebraContext, segments) -> GroupElement:
    g = identity(ctx)
    for v in segments:
        coords = np.zeros(ctx.m)
        coords[: ctx.d] = v
        g = tensor_mul(g, group_exp(LieElement(ctx, coords)))
    return g


def _scaled_generator(ctx: AlgebraContext, basis_index: int, lam: float, segments) -> list[np.ndarray]:
    """Segments of gamma_i^lam: lift endpoint exp(lam * u_i) when gamma_i is exact."""
    if lam == 0.0:
        return []
    deg = int(ctx.degrees[basis_index])
    alpha = abs(lam) ** (1.0 / deg)
    segs = segments if lam > 0 else _reverse_segments(segments)
    return [alpha * s for s in segs]


def steer_segments(ctx: AlgebraContext, target: GroupElement) -> list[np.ndarray]:
    """Piecewise-linear word in R^d whose level-N lift endpoint is ``target``.

    Grade sweep: at grade j the discrepancy log(cur^{-1} target) has no content
    below j; appending scaled bracket words for its grade-j coordinates kills
    grade j exactly (cross terms land strictly higher), so N sweeps suffice.
    """
    segments: list[np.ndarray] = []
    cur = identity(ctx)
    for j in range(1, ctx.N + 1):
        gap = group_log(tensor_mul(inverse(cur), target))
        sl = ctx.level_slice(j)
        coords = gap.coords[sl]
        for local, mu in enumerate(coords):
            if mu == 0.0:
                continue
            k = sl.start + local
            piece = _scaled_generator(ctx, k, float(mu), _bracket_word_segments(ctx, ctx.lie_brackets[k]))
            segments.extend(piece)
            cur = tensor_mul(cur, _lift_endpoint(ctx, piece))
    return segments


_GENERATOR_CACHE: dict[tuple[int, int], list[list[np.ndarray]]] = {}


def generator_segments(ctx: AlgebraContext) -> list[list[np.ndarray]]:
    """Fixed piecewise-linear words gamma_i with lift endpoint exactly exp(u_i)."""
    key = (ctx.d, ctx.N)
    if key not in _GENERATOR_CACHE:
        gens = []
        for i in range(ctx.m):
            target = group_exp(lie_basis_vector(ctx, i))
            gens.append(steer_segments(ctx, target))
        _GENERATOR_CACHE[key] = gens
    return _GENERATOR_CACHE[key]


def malcev_coordinates(x: GroupElement, tol: float = DOMAIN_TOL) -> np.ndarray:
    """Coordinates lam with x = exp(lam_m u_m) ... exp(lam_1 u_1).

    Peels degree by degree: after removing the degree-<j factors, the grade-j
    log component of the remainder reads off the degree-j coordinates exactly.
    """
    ctx = x.ctx
    lam = np.zeros(ctx.m)
    rem = x
    for j in range(1, ctx.N + 1):
        sl = ctx.level_slice(j)
        lam[sl] = group_log(rem).coords[sl]
        block = identity(ctx)
        for i in reversed(range(sl.start, sl.stop)):
            block = tensor_mul(block, group_exp(lie_basis_vector(ctx, i, lam[i])))
        rem = tensor_mul(rem, inverse(block))
    resid = algebra.coeff_deviation_from_identity(rem)
    if resid > tol:
        raise ValueError(f"Malcev decomposition residual {resid:.3e} exceeds {tol}")
    return lam


def _group_sampler(ctx: AlgebraContext):
    def draw(rng) -> GroupElement:
        coords = rng.uniform(-2, 2, ctx.m)
        scale = rng.uniform(0.1, 3.0)
        return algebra.dilation(group_exp(LieElement(ctx, coords)), scale)

    return draw


def _calibrate_constant(
    rule, domain_sampler, n_samples: int = 200, seed: int = 20210405
) -> float:
    """Frozen sampled sup of ||phi(x)||_{1-var at breakpoints} / ||x||."""
    rng = np.random.default_rng(seed)
    worst = 1.0
    for _ in range(n_samples):
        x = domain_sampler(rng)
        nx = algebra.homogeneous_norm(x)
        if nx < 1e-9:
            continue
        ratio = p_variation(rule(x), 1.0).value / nx
        worst = max(worst, ratio)
    return worst


def log_linear_pf(ctx: AlgebraContext) -> PathFunction:
    """Log-linear chord: phi(x)_t = exp(t log x), defined on all of G^N."""

    def rule(x: GroupElement) -> DiscretePath:
        return DiscretePath(ctx, np.array([0.0, 1.0]), (identity(ctx), x), LOG_LINEAR)

    # Single geodesic segment: breakpoint 1-variation is d(1, x) = ||x|| exactly.
    return PathFunction(
        name="logchord",
        ctx=ctx,
        rule=rule,
        domain=lambda x: True,
        p_star=1.0,
        approx_constant=lambda r: 1.0,
    )


def malcev_pf(ctx: AlgebraContext) -> PathFunction:
    """Concatenation of scaled generator words exp(lam_m u_m)...exp(lam_1 u_1)."""
    gens = generator_segments(ctx)
    m = ctx.m

    def rule(x: GroupElement) -> DiscretePath:
        lam = malcev_coordinates(x)
        times = [0.0]
        points = [identity(ctx)]
        cur = identity(ctx)
        for slot, i in enumerate(reversed(range(m))):
            lo, hi = slot / m, (slot + 1) / m
            piece = _scaled_generator(ctx, i, float(lam[i]), gens[i])
            if not piece:
                times.append(hi)
                points.append(cur)
                continue
            k = len(piece)
            for s, v in enumerate(piece, start=1):
                coords = np.zeros(ctx.m)
                coords[: ctx.d] = v
                cur = tensor_mul(cur, group_exp(LieElement(ctx, coords)))
                times.append(lo + (hi - lo) * s / k)
                points.append(cur)
        return DiscretePath(ctx, np.asarray(times), tuple(points), LOG_LINEAR)

    frozen = _calibrate_constant(rule, _group_sampler(ctx))
    return PathFunction(
        name="malcev",
        ctx=ctx,
        rule=rule,
        domain=lambda x: True,
        p_star=1.0,
        approx_constant=lambda r: frozen,
    )


def _split_center(x: GroupElement, v: LieElement, tol: float = DOMAIN_TOL):
    """Decompose x = exp(y) exp(lam v) with y level-1 and v central (top grade)."""
    ctx = x.ctx
    ell = group_log(x)
    top = ctx.level_slice(ctx.N)
    vtop = v.coords[top]
    vv = float(vtop @ vtop)
    if vv <= 0:
        raise ValueError("perturbation direction must be a nonzero top-grade element")
    lam = float(ell.coords[top] @ vtop) / vv
    y = ell.coords[: ctx.d]
    resid = ell.coords.copy()
    resid[: ctx.d] = 0.0
    resid[top] -= lam * vtop
    off = float(np.linalg.norm(resid))
    return y, lam, off


def perturbed_pf(ctx: AlgebraContext, v: LieElement, gamma=None) -> PathFunction:
    """Chord to exp(y) on [0, 1/2], then the scaled loop word for exp(lam v).

    Defined on x = exp(y) exp(lam v) with y in R^d and v central; the loop word
    gamma must lift to exp(v) (built by ``steer_segments`` when omitted).
    """
    if ctx.N < 2:
        raise ValueError("perturbed path function needs N >= 2")
    top = ctx.level_slice(ctx.N)
    if np.any(v.coords[: top.start] != 0.0):
        raise ValueError("v must be supported on the top grade")
    if gamma is None:
        gamma = steer_segments(ctx, group_exp(v))
    end = _lift_endpoint(ctx, gamma)
    if algebra.coeff_distance(end, group_exp(v)) > ENDPOINT_TOL:
        raise ValueError("gamma's lift endpoint is not exp(v)")
    vtop = v.coords[top]
    vv = float(vtop @ vtop)

    def domain(x: GroupElement) -> bool:
        try:
            _, _, off = _split_center(x, v)
        except ValueError:
            return False
        return off <= DOMAIN_TOL

    def rule(x: GroupElement) -> DiscretePath:
        y, lam, off = _split_center(x, v)
        if off > DOMAIN_TOL:
            raise DomainError(f"point outside exp(y)exp(lam v) domain, residual {off:.3e}")
        ycoords = np.zeros(ctx.m)
        ycoords[: ctx.d] = y
        ey = group_exp(LieElement(ctx, ycoords))
        times = [0.0, 0.5]
        points = [identity(ctx), ey]
        alpha = abs(lam) ** (1.0 / ctx.N)
        segs = gamma if lam >= 0 else _reverse_segments(gamma)
        segs = [alpha * s for s in segs]
        cur = ey
        if lam == 0.0:
            times.append(1.0)
            points.append(x)
        else:
            k = len(segs)
            for s, seg in enumerate(segs, start=1):
                coords = np.zeros(ctx.m)
                coords[: ctx.d] = seg
                cur = tensor_mul(cur, group_exp(LieElement(ctx, coords)))
                times.append(0.5 + 0.5 * s / k)
                points.append(cur if s < k else x)
        return DiscretePath(ctx, np.asarray(times), tuple(points), LOG_LINEAR)

    gamma_1var = sum(float(np.linalg.norm(s)) for s in gamma)
    # |lam|^{1/N} ||gamma||_1var <= C ||exp(lam v)||; the chord adds |y| <= ||x||.
    frozen = 1.0 + gamma_1var / max(algebra.homogeneous_norm(group_exp(v)), 1e-12)
    return PathFunction(
        name="perturbed",
        ctx=ctx,
        rule=rule,
        domain=domain,
        p_star=1.0,
        approx_constant=lambda r: frozen,
    )


def waypoint_pf(ctx: AlgebraContext, waypoints: list[np.ndarray], name: str = "waypoint") -> PathFunction:
    """Piecewise-linear rule z -> (W_1 z, ..., W_K z) lifted through the signature.

    The final waypoint matrix must be the identity so the level-1 trace ends at
    z; the domain is the lift image {S_N(psi(z))_1 : z in R^d}.
    """
    mats = [np.asarray(W, dtype=float) for W in waypoints]
    if not mats or not np.allclose(mats[-1], np.eye(ctx.d)):
        raise ValueError("last waypoint matrix must be the identity")

    def segments_for(z: np.ndarray) -> list[np.ndarray]:
        pts = [np.zeros(ctx.d)] + [W @ z for W in mats]
        return [b - a for a, b in zip(pts, pts[1:])]

    def endpoint_for(z: np.ndarray) -> GroupElement:
        return _lift_endpoint(ctx, segments_for(z))

    def domain(x: GroupElement) -> bool:
        z = group_log(x).coords[: ctx.d]
        return algebra.coeff_distance(endpoint_for(z), x) <= DOMAIN_TOL

    def rule(x: GroupElement) -> DiscretePath:
        z = group_log(x).coords[: ctx.d]
        if algebra.coeff_distance(endpoint_for(z), x) > DOMAIN_TOL:
            raise DomainError("point is not the lift of this interpolation rule")
        segs = segments_for(z)
        keep = [s for s in segs if np.linalg.norm(s) > 0]
        if not keep:
            return _segments_path(ctx, [])
        return _segments_path(ctx, keep)

    def domain_sampler(rng):
        return endpoint_for(rng.uniform(-2, 2, ctx.d))

    frozen = _calibrate_constant(rule, domain_sampler)
    return PathFunction(
        name=name, ctx=ctx, rule=rule, domain=domain, p_star=1.0,
        approx_constant=lambda r: frozen,
    )


def staircase_pf(ctx: AlgebraContext) -> PathFunction:
    """McShane-style coordinate staircase: one axis-aligned leg per coordinate."""
    mats = []
    W = np.zeros((ctx.d, ctx.d))
    for i in range(ctx.d):
        W = W.copy()
        W[i, i] = 1.0
        mats.append(W)
    return waypoint_pf(ctx, mats, name="staircase")


PATH_FUNCTIONS: dict[str, Callable[[AlgebraContext], PathFunction]] = {
    "logchord": log_linear_pf,
    "malcev": malcev_pf,
    "staircase": staircase_pf,
}


# ---------------------------------------------------------------------------
# Connecting construction


@dataclass(frozen=True)
class ConnectConfig:
    """Window-length sequence r_i (positive, non-increasing, summable).

    Defaults to the dyadic r_i = 2^{-i}; ``prefix`` overrides the first terms,
    the geometric rule ``first * ratio**(i-1)`` supplies the tail.
    """

    first: float = 0.5
    ratio: float = 0.5
    prefix: tuple[float, ...] = ()

    def __post_init__(self):
        if not (0 < self.ratio < 1) or self.first <= 0:
            raise ValueError("need first > 0 and 0 < ratio < 1 for summability")
        seq = [self.r(i) for i in range(1, 66)]
        if any(b > a for a, b in zip(seq, seq[1:])) or min(seq) <= 0:
            raise ValueError("r sequence must be positive and non-increasing")

    def r(self, i: int) -> float:
        if i <= len(self.prefix):
            return float(self.prefix[i - 1])
        return self.first * self.ratio ** (i - 1)

    def to_json(self) -> dict:
        return {"first": self.first, "ratio": self.ratio, "prefix": list(self.prefix)}


@dataclass(frozen=True)
class TimeChange:
    """Realised time change tau_x: original stamp -> stamp of the connected path."""

    times: np.ndarray
    mapped: np.ndarray
    added: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "tau_x"])
        for t, s in zip(self.times, self.mapped):
            writer.writerow([repr(float(t)), repr(float(s))])
        return buf.getvalue()


JUMP_TOL = 1e-9


def connect(
    path: DiscretePath,
    pf: PathFunction,
    cfg: ConnectConfig | None = None,
    jump_tol: float = JUMP_TOL,
) -> tuple[DiscretePath, TimeChange]:
    """Connect the jumps of a cadlag path with the path function.

    Jumps are processed in decreasing size (ties by earlier time); jump k gets
    a window of length r_{n_k} where n_k is the smallest unused index with
    r_{n_k} below the jump size.  The result is rescaled back to [0, T].

    Jump detection is coefficientwise (largest coefficient of the increment
    minus the identity above ``jump_tol``): the homogeneous norm takes j-th
    roots and would magnify floating-point residue of genuinely constant
    steps into spurious jumps.
    """
    if path.kind != CADLAG:
        raise ValueError("connect expects a cadlag step path")
    cfg = cfg or ConnectConfig()
    T = path.T
    increments = path.increments()
    sizes = path.increment_sizes()
    jump_idx = [
        k + 1
        for k, g in enumerate(increments)
        if algebra.coeff_deviation_from_identity(g) > jump_tol
    ]
    for k in jump_idx:
        if not pf.domain(increments[k - 1]):
            raise DomainError(f"jump at t={path.times[k]} outside domain of {pf.name}")

    order = sorted(jump_idx, key=lambda k: (-sizes[k - 1], path.times[k]))
    window: dict[int, float] = {}
    n_prev = 0
    for k in order:
        n = n_prev + 1
        while not cfg.r(n) < sizes[k - 1]:
            n += 1
        assert cfg.r(n) < sizes[k - 1]
        window[k] = cfg.r(n)
        n_prev = n
    added = sum(window.values())

    shift = np.zeros(len(path.times))
    acc = 0.0
    for i in range(len(path.times)):
        if i in window:
            acc += window[i]
        shift[i] = acc

    stamps: list[tuple[float, GroupElement]] = [
        (float(path.times[i] + shift[i]), path.points[i]) for i in range(len(path.times))
    ]
    for k in jump_idx:
        r_k = window[k]
        start = float(path.times[k] + shift[k] - r_k)
        pre = path.points[k - 1]
        g = increments[k - 1]
        phi_path = pf.rule(g)
        stamps.append((start, pre))
        for s, pt in zip(phi_path.times[1:-1], phi_path.points[1:-1]):
            stamps.append((start + float(s) * r_k, tensor_mul(pre, pt)))

    stamps.sort(key=lambda sp: sp[0])
    scale = T / (T + added) if added > 0 else 1.0
    times = np.array([s for s, _ in stamps]) * scale
    points = tuple(pt for _, pt in stamps)
    connected = DiscretePath(path.ctx, times, points, LOG_LINEAR)
    tau = TimeChange(
        times=path.times.copy(),
        mapped=(path.times + shift) * scale,
        added=added,
    )
    return connected, tau


def restrict_to_timechange(connected: DiscretePath, tau: TimeChange) -> list[GroupElement]:
    """Values of the connected path at the mapped original stamps."""
    out = []
    for s in tau.mapped:
        idx = int(np.argmin(np.abs(connected.times - s)))
        out.append(connected.points[idx])
    return out


def corollary_constant(p: float, C: float) -> float:
    """R with ||x^phi||^p_pvar <= R ||x||^p_pvar for C-approximating connections."""
    return 1.0 + 2.0**p + 3.0 ** (p - 1.0) + C**p * (1.0 + 2.0**p + 2.0 * 3.0 ** (p - 1.0))


def pvar_envelope(pf: PathFunction, p: float) -> Callable[[float], float]:
    """Certified map psi with ||x^phi||_pvar <= psi(||x||_pvar), linear near 0."""
    if p < 1:
        raise ValueError(f"need p >= 1, got {p}")

    def psi(r: float) -> float:
        if r < 0:
            raise ValueError("p-variation is nonnegative")
        return corollary_constant(p, pf.approx_constant(r)) ** (1.0 / p) * r

    return psi
