"""Levy triplets on G^N, samplers, approximating arrays, and diagnostics.

The triplet (A, B, Pi) carries the generator data: an m x m covariance matrix
over the Lie basis, a drift vector in Lie coordinates, and a jump measure that
is either a finite list of atoms or a level-1 isotropic stable family with a
small-jump cutoff.  B follows the Hunt-generator convention with global
exponential coordinates xi = log, so the sampler drifts by the compensated
B - int xi dPi between jumps.

Seed discipline: every Monte Carlo routine takes a master seed; worker/path
streams are derived as SeedSequence(seed, spawn_key=(index,)), so results are
reproducible and independent of how work is chunked.
"""

from __future__ import annotations

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
    make_context,
    tensor_mul,
)
from .paths import CADLAG, DiscretePath, nu_delta, walk_from_array

__all__ = [
    "JumpMeasure",
    "atomic_measure",
    "stable_measure",
    "LevyTriplet",
    "brownian_triplet",
    "ScalingFunction",
    "prototypical_scaling",
    "PvarExponentInput",
    "ExponentReport",
    "sample_levy",
    "ApproximatingArray",
    "approximating_array",
    "feinsilver_probe",
    "scales_check",
    "min_pvar_exponent",
    "bg_divergence_probe",
    "tightness_probe",
    "triplet_to_json",
    "triplet_from_json",
    "child_rng",
]

PSD_TOL = 1e-10


def child_rng(seed: int, index: int) -> np.random.Generator:
    """Stream ``index`` of the master seed (counter-based splitting rule)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _pairwise_sum(values):
    """Sum a list by pairwise reduction (bounds floating-point drift)."""
    vals = list(values)
    if not vals:
        raise ValueError("empty reduction")
    while len(vals) > 1:
        nxt = [vals[i] + vals[i + 1] for i in range(0, len(vals) - 1, 2)]
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]


# ---------------------------------------------------------------------------
# Jump measures


def _sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def _sphere_moment(d: int, gamma: float) -> float:
    """int_{S^{d-1}} |w_1|^gamma dw for the uniform surface measure."""
    if d == 1:
        return 2.0
    # E|w_1|^gamma for w uniform on S^{d-1}: Beta-moment of w_1^2.
    from math import gamma as G

    ew = G((gamma + 1) / 2) * G(d / 2) / (G(1 / 2) * G((d + gamma) / 2))
    return _sphere_area(d) * ew


@dataclass(frozen=True)
class JumpMeasure:
    """Finite-activity jump law: atoms, or a truncated level-1 stable family.

    Stable family: Levy density c |z|^{-d-alpha} dz on {|z| >= cutoff} in R^d,
    embedded at level 1 via exp.  The sampler sees only the truncated part; the
    moment and tail-index logic uses the analytic small-jump integrals of the
    untruncated family.
    """

    ctx: AlgebraContext
    atoms: tuple[tuple[GroupElement, float], ...] = ()
    family: str | None = None
    alpha: float = 0.0
    cutoff: float = 0.0
    intensity: float = 0.0

    def __post_init__(self):
        for g, w in self.atoms:
            if w <= 0:
                raise ValueError(f"atom weight must be positive, got {w}")
            if algebra.homogeneous_norm(g) <= 0:
                raise ValueError("atoms at the identity are not allowed")
        if self.family is not None:
            if self.family != "stable":
                raise ValueError(f"unknown family {self.family!r}")
            if not (0 < self.alpha < 2):
                raise ValueError(f"stable index must lie in (0, 2), got {self.alpha}")
            if self.cutoff <= 0 or self.intensity <= 0:
                raise ValueError("stable family needs positive cutoff and intensity")
            if self.atoms:
                raise ValueError("measure is either atomic or parametric, not both")

    @property
    def total_mass(self) -> float:
        if self.family == "stable":
            d = self.ctx.d
            return self.intensity * _sphere_area(d) * self.cutoff**-self.alpha / self.alpha
        return float(sum(w for _, w in self.atoms))

    def is_empty(self) -> bool:
        return self.family is None and not self.atoms

    def xi_matrix(self) -> np.ndarray:
        """xi coordinates of the atoms, stacked (n_atoms, m)."""
        if not self.atoms:
            return np.zeros((0, self.ctx.m))
        return np.stack([algebra.xi_coords(g) for g, _ in self.atoms])

    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.atoms])

    def xi_integral(self) -> np.ndarray:
        """int xi dPi over the modelled range (stable families are symmetric)."""
        if self.family == "stable":
            return np.zeros(self.ctx.m)
        if not self.atoms:
            return np.zeros(self.ctx.m)
        return self.weights() @ self.xi_matrix()

    def xi_outer_integral(self) -> np.ndarray:
        """int xi xi^T dPi over the modelled (finite-activity) range.

        The truncated stable family has infinite second moments at level 1
        (the large-jump tail diverges for alpha < 2); those entries are inf.
        """
        m = self.ctx.m
        if self.family == "stable":
            out = np.zeros((m, m))
            for i in range(self.ctx.d):
                out[i, i] = math.inf
            return out
        if not self.atoms:
            return np.zeros((m, m))
        X = self.xi_matrix()
        return X.T @ (self.weights()[:, None] * X)

    def abs_moment(self, i: int, gamma: float) -> float:
        """int |xi_i|^gamma dPi over the modelled range (may be inf for stable)."""
        if self.family == "stable":
            deg = int(self.ctx.degrees[i])
            if deg > 1:
                return 0.0
            if gamma >= self.alpha:
                return math.inf  # large-jump tail of the truncated family diverges
            radial = self.intensity * self.cutoff ** (gamma - self.alpha) / (self.alpha - gamma)
            return radial * _sphere_moment(self.ctx.d, gamma)
        if not self.atoms:
            return 0.0
        return float(self.weights() @ np.abs(self.xi_matrix()[:, i]) ** gamma)

    def gamma_sup(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate sup of {gamma in [0,2) : int |xi_i|^gamma dPi = inf}.

        For the stable family the small-jump integral int_0^eps r^{gamma-1-alpha}
        diverges iff gamma <= alpha, so the sup is alpha and it is attained.
        Finite atomic measures have every moment finite: sup 0, not attained.
        """
        m = self.ctx.m
        sup = np.zeros(m)
        attained = np.zeros(m, dtype=bool)
        if self.family == "stable":
            for i in range(m):
                if int(self.ctx.degrees[i]) == 1:
                    sup[i] = self.alpha
                    attained[i] = True
        return sup, attained

    def one_in_gamma(self, i: int) -> bool:
        """Whether gamma = 1 lies in Gamma_i (first absolute moment diverges)."""
        sup, attained = self.gamma_sup()
        return 1.0 < sup[i] or (1.0 == sup[i] and bool(attained[i]))

    def sample(self, rng: np.random.Generator, size: int) -> list[GroupElement]:
        """Draw ``size`` jumps from Pi / total_mass."""
        if self.is_empty():
            raise ValueError("cannot sample from the zero measure")
        if self.family == "stable":
            d = self.ctx.d
            radii = self.cutoff * rng.uniform(size=size) ** (-1.0 / self.alpha)
            if d == 1:
                dirs = rng.choice([-1.0, 1.0], size=(size, 1))
            else:
                dirs = rng.standard_normal((size, d))
                dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            out = []
            for r, w in zip(radii, dirs):
                coords = np.zeros(self.ctx.m)
                coords[: d] = r * w
                out.append(group_exp(LieElement(self.ctx, coords)))
            return out
        w = self.weights()
        idx = rng.choice(len(w), size=size, p=w / w.sum())
        return [self.atoms[i][0] for i in idx]


def atomic_measure(ctx: AlgebraContext, atoms) -> JumpMeasure:
    return JumpMeasure(ctx=ctx, atoms=tuple((g, float(w)) for g, w in atoms))


def stable_measure(
    ctx: AlgebraContext, alpha: float, cutoff: float, intensity: float = 1.0
) -> JumpMeasure:
    return JumpMeasure(
        ctx=ctx, family="stable", alpha=float(alpha), cutoff=float(cutoff),
        intensity=float(intensity),
    )


# ---------------------------------------------------------------------------
# Triplets


@dataclass(frozen=True)
class LevyTriplet:
    """Generator data (A, B, Pi) over the Lyndon basis of g^N."""

    ctx: AlgebraContext
    A: np.ndarray
    B: np.ndarray
    Pi: JumpMeasure

    def __post_init__(self):
        A = np.ascontiguousarray(self.A, dtype=float)
        B = np.ascontiguousarray(self.B, dtype=float)
        m = self.ctx.m
        if A.shape != (m, m):
            raise ValueError(f"A must be {m}x{m}")
        if B.shape != (m,):
            raise ValueError(f"B must have length {m}")
        if not np.allclose(A, A.T, atol=1e-12):
            raise ValueError("A must be symmetric")
        eig = np.linalg.eigvalsh(A)
        if eig.min() < -PSD_TOL:
            raise ValueError(f"A is not PSD: min eigenvalue {eig.min():.3e}")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    def diffusion_root(self) -> np.ndarray:
        """PSD square root by spectral decomposition (eigenvalues clipped at 0)."""
        vals, vecs = np.linalg.eigh(self.A)
        vals = np.clip(vals, 0.0, None)
        return vecs @ np.diag(np.sqrt(vals)) @ vecs.T

    def compensated_drift(self) -> np.ndarray:
        """B - int xi dPi: the genuine between-jump drift of the sampler."""
        return self.B - self.Pi.xi_integral()


def brownian_triplet(ctx: AlgebraContext, sigma: np.ndarray | None = None) -> LevyTriplet:
    """Level-1 Brownian triplet with covariance sigma (defaults to identity)."""
    A = np.zeros((ctx.m, ctx.m))
    if sigma is None:
        sigma = np.eye(ctx.d)
    A[: ctx.d, : ctx.d] = sigma
    return LevyTriplet(ctx, A, np.zeros(ctx.m), JumpMeasure(ctx=ctx))


# ---------------------------------------------------------------------------
# Scaling functions


@dataclass(frozen=True)
class ScalingFunction:
    """theta(x) = min(far_constant, sum_i |xi_i(x)|^{q_i}).

    Vanishes only at the identity, is bounded, dominates |xi|^2 near 1 when all
    q_i <= 2, and is bounded below off the unit ball; ``near_radius`` records
    where the clip is guaranteed inactive (diagnostic metadata).
    """

    ctx: AlgebraContext
    q: np.ndarray
    far_constant: float = 1.0
    near_radius: float = 0.25

    def __post_init__(self):
        q = np.ascontiguousarray(self.q, dtype=float)
        if q.shape != (self.ctx.m,):
            raise ValueError(f"q must have length {self.ctx.m}")
        if np.any(q <= 0) or np.any(q > 2):
            raise ValueError("exponents must lie in (0, 2]")
        if self.far_constant <= 0:
            raise ValueError("far constant must be positive")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    def __call__(self, x: GroupElement) -> float:
        xi = algebra.xi_coords(x)
        return min(self.far_constant, float(np.sum(np.abs(xi) ** self.q)))

    def of_xi(self, xi: np.ndarray) -> np.ndarray:
        """Vectorised evaluation on stacked xi coordinates (n, m)."""
        return np.minimum(self.far_constant, np.sum(np.abs(xi) ** self.q, axis=-1))


def prototypical_scaling(ctx: AlgebraContext, far_constant: float = 1.0) -> ScalingFunction:
    """The quadratic prototype min(c, |xi|^2)."""
    return ScalingFunction(ctx=ctx, q=np.full(ctx.m, 2.0), far_constant=far_constant)


# ---------------------------------------------------------------------------
# Sampling the Levy process


def _increment_scheme(triplet: LevyTriplet, n_steps: int, T: float, rng):
    """Shared draw order for sample_levy and the fused flow evaluator.

    Order per path: jump count ~ Poisson(mass T), sorted uniform positions,
    jump draws, then one block of standard normals for every sub-interval.
    Returns (boundaries, sub_lengths, jump_flags, jumps, normals).
    """
    mass = 0.0 if triplet.Pi.is_empty() else triplet.Pi.total_mass
    if mass > 0:
        n_jumps = int(rng.poisson(mass * T))
        positions = np.sort(rng.uniform(0.0, T, n_jumps))
        jumps = triplet.Pi.sample(rng, n_jumps) if n_jumps else []
    else:
        positions = np.zeros(0)
        jumps = []
    edges = np.linspace(0.0, T, n_steps + 1)
    boundaries = np.unique(np.concatenate([edges, positions]))
    is_jump = np.isin(boundaries, positions)
    sub = np.diff(boundaries)
    normals = rng.standard_normal((len(sub), triplet.ctx.m))
    return boundaries, sub, is_jump, jumps, normals


def sample_levy(
    triplet: LevyTriplet, n_steps: int, T: float = 1.0, seed: int = 0, stream: int = 0
) -> DiscretePath:
    """Euler-type cadlag sample: geodesic diffusion steps, exact jump atoms.

    Each sub-interval of length h contributes exp(sqrt(h) A^{1/2} z + h Bt)
    with Bt the compensated drift; jumps multiply in at their (uniform) times.
    Deterministic under (seed, stream); stream indexes independent paths.
    """
    if n_steps < 1:
        raise ValueError("need at least one step")
    ctx = triplet.ctx
    rng = child_rng(seed, stream)
    root = triplet.diffusion_root()
    drift = triplet.compensated_drift()
    boundaries, sub, is_jump, jumps, normals = _increment_scheme(triplet, n_steps, T, rng)

    diffusive = bool(np.any(root)) or bool(np.any(drift))
    points = [identity(ctx)]
    jump_iter = iter(jumps)
    for k, h in enumerate(sub):
        g = points[-1]
        if diffusive:
            coords = math.sqrt(h) * (root @ normals[k]) + h * drift
            g = tensor_mul(g, group_exp(LieElement(ctx, coords)))
        if is_jump[k + 1]:
            g = tensor_mul(g, next(jump_iter))
        points.append(g)
    return DiscretePath(ctx, boundaries, tuple(points), CADLAG)


# ---------------------------------------------------------------------------
# The approximating iid array


@dataclass(frozen=True)
class ApproximatingArray:
    """Law of X_{n1}: mixture (w_n/n) mu_n + (1 - w_n/n) law(exp(Y_n)).

    Y_n = b_n + L R with independent Rademacher signs R, so it has the
    prescribed mean and covariance with bounded support shrinking like
    n^{-1/2}.  mu_n is Pi conditioned on U_n^c.
    """

    triplet: LevyTriplet
    n: int
    h_n: float
    w_n: float
    b_n: np.ndarray
    cov_factor: np.ndarray  # L with L L^T the prescribed covariance
    tail_atoms: tuple[tuple[GroupElement, float], ...]  # atoms of Pi restricted to U_n^c

    @property
    def ctx(self) -> AlgebraContext:
        return self.triplet.ctx

    @property
    def support_radius(self) -> float:
        """Radius bound of V_n: every exp(Y_n) sample has |Y_n| below this."""
        return float(np.linalg.norm(self.b_n) + np.abs(self.cov_factor).sum(axis=1).max() * math.sqrt(self.ctx.m))

    def sample(self, rng: np.random.Generator, size: int) -> list[GroupElement]:
        ctx = self.ctx
        out = []
        take_jump = rng.uniform(size=size) < (self.w_n / self.n if self.w_n > 0 else 0.0)
        n_jump = int(take_jump.sum())
        jump_pool = iter(self._sample_mu(rng, n_jump)) if n_jump else iter(())
        signs = rng.choice([-1.0, 1.0], size=(size, ctx.m))
        for i in range(size):
            if take_jump[i]:
                out.append(next(jump_pool))
            else:
                y = self.b_n + self.cov_factor @ signs[i]
                out.append(group_exp(LieElement(ctx, y)))
        return out

    def _sample_mu(self, rng, size: int) -> list[GroupElement]:
        if self.triplet.Pi.family == "stable":
            # U_n^c conditioning: for the truncated stable family supported on
            # {|z| >= cutoff}, mu_n is the normalised restriction to |z| > h_n'.
            meas = self.triplet.Pi
            lo = max(meas.cutoff, min(self.h_n, 1.0))
            radii = lo * rng.uniform(size=size) ** (-1.0 / meas.alpha)
            d = self.ctx.d
            if d == 1:
                dirs = rng.choice([-1.0, 1.0], size=(size, 1))
            else:
                dirs = rng.standard_normal((size, d))
                dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            out = []
            for r, w in zip(radii, dirs):
                coords = np.zeros(self.ctx.m)
                coords[:d] = r * w
                out.append(group_exp(LieElement(self.ctx, coords)))
            return out
        w = np.array([wt for _, wt in self.tail_atoms])
        idx = rng.choice(len(w), size=size, p=w / w.sum())
        return [self.tail_atoms[i][0] for i in idx]

    def mu_xi_mean(self) -> np.ndarray:
        """mu_n(xi), exact for atoms, zero by symmetry for the stable family."""
        if self.triplet.Pi.family == "stable":
            return np.zeros(self.ctx.m)
        if not self.tail_atoms:
            return np.zeros(self.ctx.m)
        w = np.array([wt for _, wt in self.tail_atoms])
        X = np.stack([algebra.xi_coords(g) for g, _ in self.tail_atoms])
        return (w @ X) / w.sum()

    def mu_xi_outer(self) -> np.ndarray:
        if self.triplet.Pi.family == "stable":
            meas = self.triplet.Pi
            lo = max(meas.cutoff, min(self.h_n, 1.0))
            out = np.zeros((self.ctx.m, self.ctx.m))
            mass = meas.intensity * _sphere_area(self.ctx.d) * lo**-meas.alpha / meas.alpha
            radial = meas.intensity * lo ** (2 - meas.alpha) / (meas.alpha - 2)
            diag = -radial * _sphere_moment(self.ctx.d, 2.0) / mass
            for i in range(self.ctx.d):
                out[i, i] = diag
            return out
        if not self.tail_atoms:
            return np.zeros((self.ctx.m, self.ctx.m))
        w = np.array([wt for _, wt in self.tail_atoms])
        X = np.stack([algebra.xi_coords(g) for g, _ in self.tail_atoms])
        return X.T @ ((w / w.sum())[:, None] * X)

    def exact_xi_mean(self) -> np.ndarray:
        """E[xi(X_{n1})] via the mixture (exact; xi(exp Y) = Y)."""
        frac = self.w_n / self.n
        return frac * self.mu_xi_mean() + (1 - frac) * self.b_n

    def exact_xi_outer(self) -> np.ndarray:
        frac = self.w_n / self.n
        cov = self.cov_factor @ self.cov_factor.T
        nu_part = np.outer(self.b_n, self.b_n) + cov
        return frac * self.mu_xi_outer() + (1 - frac) * nu_part


def approximating_array(triplet: LevyTriplet, n: int) -> ApproximatingArray:
    """The shrinking-support iid array whose walk converges in law to the process."""
    ctx = triplet.ctx
    Pi = triplet.Pi
    # Mass outside the coordinate ball U = {||x|| <= 1}.
    if Pi.family == "stable":
        lo_out = max(Pi.cutoff, 1.0)
        mass_outside_U = Pi.intensity * _sphere_area(ctx.d) * lo_out**-Pi.alpha / Pi.alpha
    elif Pi.atoms:
        norms = np.array([algebra.homogeneous_norm(g) for g, _ in Pi.atoms])
        mass_outside_U = float(Pi.weights()[norms > 1.0].sum())
    else:
        mass_outside_U = 0.0
    if n <= 2 * mass_outside_U:
        raise ValueError(f"n={n} too small: need n > 2 Pi(G \\ U) = {2 * mass_outside_U}")

    # h_n = inf{h >= 0 : Pi({|xi| > h} or outside U) <= n/2}.
    if Pi.is_empty():
        h_n, w_n, tail = 0.0, 0.0, ()
    elif Pi.family == "stable":
        total = Pi.total_mass

        def mass_above(h: float) -> float:
            lo = max(Pi.cutoff, min(h, 1.0))
            return Pi.intensity * _sphere_area(ctx.d) * lo**-Pi.alpha / Pi.alpha

        if total <= n / 2:
            h_n = 0.0
        else:
            # Solve mass_above(h) = n/2 for h in (cutoff, 1].
            h_n = (Pi.intensity * _sphere_area(ctx.d) / (Pi.alpha * n / 2)) ** (1.0 / Pi.alpha)
            h_n = min(max(h_n, Pi.cutoff), 1.0)
        w_n = mass_above(h_n)
        tail = ()
    else:
        xi_norms = np.linalg.norm(Pi.xi_matrix(), axis=1)
        norms = np.array([algebra.homogeneous_norm(g) for g, _ in Pi.atoms])
        weights = Pi.weights()
        outside_U = norms > 1.0

        def mass_above(h: float) -> float:
            return float(weights[(xi_norms > h) | outside_U].sum())

        candidates = np.concatenate([[0.0], np.sort(xi_norms)])
        h_n = next(h for h in candidates if mass_above(h) <= n / 2)
        keep = (xi_norms > h_n) | outside_U
        tail = tuple((g, float(w)) for (g, _), w, k in zip(Pi.atoms, weights, keep) if k)
        w_n = float(weights[keep].sum())

    frac = 1.0 / (1.0 - w_n / n)
    b_n = np.zeros(ctx.m)
    xi_int_tail = np.zeros(ctx.m)
    if tail:
        tw = np.array([w for _, w in tail])
        tx = np.stack([algebra.xi_coords(g) for g, _ in tail])
        xi_int_tail = tw @ tx
    for k in range(ctx.m):
        if Pi.one_in_gamma(k):
            b_n[k] = frac / n * (triplet.B[k] - xi_int_tail[k])
        else:
            bt = triplet.B[k] - triplet.Pi.xi_integral()[k]
            b_n[k] = frac / n * bt

    cov = frac / n * triplet.A
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, 0.0, None)
    L = vecs @ np.diag(np.sqrt(vals)) @ vecs.T
    return ApproximatingArray(
        triplet=triplet, n=n, h_n=float(h_n), w_n=float(w_n), b_n=b_n,
        cov_factor=L, tail_atoms=tail,
    )


# ---------------------------------------------------------------------------
# Probes


def _norm_ramp(ctx: AlgebraContext, a: float, b: float):
    """Bump test function on the homogeneous norm: 0 below a, 1 above b."""

    def f(x: GroupElement) -> float:
        r = algebra.homogeneous_norm(x)
        return float(np.clip((r - a) / (b - a), 0.0, 1.0))

    f.__name__ = f"ramp[{a},{b}]"
    return f


def default_test_functions(ctx: AlgebraContext) -> list:
    return [_norm_ramp(ctx, 0.25, 0.5), _norm_ramp(ctx, 0.5, 1.0), _norm_ramp(ctx, 1.0, 2.0)]


def _pi_integral(Pi: JumpMeasure, f, rng=None, mc: int = 20_000) -> float:
    if Pi.is_empty():
        return 0.0
    if Pi.atoms:
        return float(sum(w * f(g) for g, w in Pi.atoms))
    rng = rng or np.random.default_rng(0)
    draws = Pi.sample(rng, mc)
    return Pi.total_mass * float(np.mean([f(g) for g in draws]))


def feinsilver_probe(
    array_factory: Callable[[int], ApproximatingArray],
    triplet: LevyTriplet,
    test_functions=None,
    n_grid=(8, 32, 128, 512),
    mc: int = 4000,
    seed: int = 0,
) -> dict:
    """Trend tables for the three walk-convergence conditions.

    (1) n E[f(X_{n1})] vs Pi(f) for bumps vanishing near the identity,
    (2) n E[xi(X_{n1})] vs B, and (3) n E[xi_i xi_j] vs A + int xi_i xi_j dPi.
    Moments of the mixture are computed exactly; f-expectations use MC over
    the nu_n part plus exact atom sums.
    """
    ctx = triplet.ctx
    fs = test_functions or default_test_functions(ctx)
    rows = []
    for idx, n in enumerate(n_grid):
        arr = array_factory(n)
        rng = child_rng(seed, idx)
        frac = arr.w_n / arr.n
        f_vals = []
        for f in fs:
            if arr.triplet.Pi.family == "stable":
                pool = arr._sample_mu(rng, mc) if arr.w_n > 0 else []
                mu_part = float(np.mean([f(g) for g in pool])) if pool else 0.0
            elif arr.tail_atoms:
                tw = np.array([w for _, w in arr.tail_atoms])
                mu_part = float(sum(w * f(g) for g, w in arr.tail_atoms) / tw.sum())
            else:
                mu_part = 0.0
            draws = rng.choice([-1.0, 1.0], size=(min(mc, 2048), ctx.m))
            ys = arr.b_n + draws @ arr.cov_factor.T
            nu_part = float(np.mean([f(group_exp(LieElement(ctx, y))) for y in ys]))
            f_vals.append(n * (frac * mu_part + (1 - frac) * nu_part))
        rows.append(
            {
                "n": n,
                "nF_f": f_vals,
                "nB_n": (n * arr.exact_xi_mean()).tolist(),
                "nA_n": (n * arr.exact_xi_outer()).tolist(),
            }
        )
    targets = {
        "Pi_f": [_pi_integral(triplet.Pi, f, child_rng(seed, 99)) for f in (fs)],
        "B": triplet.B.tolist(),
        "A_plus_int": (triplet.A + triplet.Pi.xi_outer_integral()).tolist(),
    }
    return {"rows": rows, "targets": targets, "test_functions": [f.__name__ for f in fs]}


def scales_check(
    array_factory: Callable[[int], ApproximatingArray],
    theta: ScalingFunction,
    n_grid=(8, 32, 128, 512),
    mc: int = 4000,
    seed: int = 0,
) -> dict:
    """Monte Carlo estimates of n E[theta(X_{n1})] across n; flags growth."""
    rows = []
    for idx, n in enumerate(n_grid):
        arr = array_factory(n)
        rng = child_rng(seed, idx)
        draws = arr.sample(rng, mc)
        vals = np.array([theta(g) for g in draws])
        est = n * float(vals.mean())
        stderr = n * float(vals.std(ddof=1)) / math.sqrt(mc)
        rows.append({"n": n, "n_E_theta": est, "stderr": stderr})
    ests = np.array([r["n_E_theta"] for r in rows])
    errs = np.array([r["stderr"] for r in rows])
    increasing = all(
        ests[i + 1] - ests[i] > -(errs[i + 1] + errs[i]) for i in range(len(ests) - 1)
    )
    significant = ests[-1] - ests[0] > 3.0 * (errs[-1] + errs[0])
    ratio = ests[-1] / max(ests[0], 1e-300)
    flagged = bool(increasing and significant and ratio > 1.5)
    return {"rows": rows, "growth_flagged": flagged, "sup_estimate": float(ests.max())}


# ---------------------------------------------------------------------------
# The minimal p-variation exponent


@dataclass(frozen=True)
class PvarExponentInput:
    """Inputs to the exponent calculator, computable analytically per measure."""

    ctx: AlgebraContext
    diffusion_active: tuple[int, ...]  # J: basis indices with A_ii > 0
    drift_active: tuple[int, ...]      # K: indices with finite first moment and Bt != 0
    gamma_sup: np.ndarray              # per-coordinate sup Gamma_i in [0, 2]
    gamma_attained: np.ndarray         # whether the sup lies in Gamma_i

    @classmethod
    def from_triplet(cls, triplet: LevyTriplet) -> "PvarExponentInput":
        ctx = triplet.ctx
        J = tuple(int(i) for i in range(ctx.m) if triplet.A[i, i] > 0)
        sup, attained = triplet.Pi.gamma_sup()
        K = []
        for k in range(ctx.m):
            if triplet.Pi.one_in_gamma(k):
                continue  # k not in K-tilde: first moment diverges
            bt = triplet.B[k] - triplet.Pi.xi_integral()[k]
            if bt != 0.0:
                K.append(k)
        return cls(
            ctx=ctx, diffusion_active=J, drift_active=tuple(K),
            gamma_sup=sup, gamma_attained=attained,
        )


@dataclass(frozen=True)
class ExponentReport:
    p_star: float
    binding: tuple[str, ...]
    conditions: dict
    boundary_classified_infinite: bool

    def describe(self) -> str:
        lines = [f"p* = {self.p_star}"]
        for name, val in self.conditions.items():
            mark = " <-- binds" if name in self.binding else ""
            lines.append(f"  {name}: {val}{mark}")
        if self.boundary_classified_infinite:
            lines.append("  at p = p*: infinite p-variation (boundary attained)")
        else:
            lines.append("  at p = p*: boundary case left open")
        return "\n".join(lines)


def min_pvar_exponent(inputs: PvarExponentInput, ctx: AlgebraContext | None = None) -> ExponentReport:
    """Smallest p beyond which sample paths have finite p-variation.

    p* = max(1, max_{j in J} 2 deg(u_j), max_{k in K} deg(u_k),
             max_i deg(u_i) sup Gamma_i); the report lists which condition
    binds and whether p = p* is itself excluded (part (2) of the theorem) or
    left open (non-attained sup, or the drift boundary).
    """
    ctx = ctx or inputs.ctx
    deg = ctx.degrees
    for i in list(inputs.diffusion_active) + list(inputs.drift_active):
        if not (0 <= i < ctx.m):
            raise ValueError(f"basis index {i} out of range")
    if np.any(inputs.gamma_sup < 0) or np.any(inputs.gamma_sup > 2):
        raise ValueError("gamma_sup entries must lie in [0, 2]")

    conditions = {"floor": 1.0}
    if inputs.diffusion_active:
        conditions["diffusion"] = max(2.0 * deg[j] for j in inputs.diffusion_active)
    if inputs.drift_active:
        conditions["drift"] = max(float(deg[k]) for k in inputs.drift_active)
    jump_vals = deg * inputs.gamma_sup
    if np.any(jump_vals > 0):
        conditions["jumps"] = float(jump_vals.max())

    p_star = max(conditions.values())
    binding = tuple(name for name, v in conditions.items() if v == p_star and name != "floor")
    if not binding:
        binding = ("floor",)

    infinite = False
    if "diffusion" in binding:
        infinite = True  # p <= 2 deg(u_j) gives infinite p-variation
    if "jumps" in binding:
        idx = np.where(jump_vals == p_star)[0]
        if np.any(inputs.gamma_attained[idx]):
            infinite = True
    return ExponentReport(
        p_star=float(p_star), binding=binding, conditions=conditions,
        boundary_classified_infinite=infinite,
    )


# ---------------------------------------------------------------------------
# Appendix probes


def bg_divergence_probe(
    triplet: LevyTriplet,
    i: int,
    q: float,
    mesh_grid=(64, 128, 256, 512),
    mc: int = 64,
    T: float = 1.0,
    seed: int = 0,
) -> dict:
    """Small-time moment sums sum_k |xi_i(X_{(k-1)h,kh})|^q across meshes.

    Reports, per mesh, the MC mean of the total sum and the log-log slope of
    the partial sums in the step index k (linear growth of the partial sums is
    the finite-mesh signature of a divergent coordinate), plus the cross-mesh
    slope of the totals (growth for q below the relevant index, plateau above).
    """
    ctx = triplet.ctx
    rows = []
    for mi, n in enumerate(mesh_grid):
        totals = np.zeros(mc)
        kslopes = np.zeros(mc)
        for rep in range(mc):
            path = sample_levy(triplet, n, T=T, seed=seed, stream=1 + mi * mc + rep)
            incs = path.increments()
            vals = np.array([abs(algebra.xi_coords(g)[i]) ** q for g in incs])
            totals[rep] = vals.sum()
            csum = np.cumsum(vals)
            ks = np.arange(1, len(vals) + 1)
            good = csum > 0
            if good.sum() >= 2:
                kslopes[rep] = np.polyfit(np.log(ks[good]), np.log(csum[good]), 1)[0]
        rows.append(
            {
                "mesh": n,
                "sum_mean": float(totals.mean()),
                "sum_stderr": float(totals.std(ddof=1) / math.sqrt(mc)),
                "partial_sum_slope": float(kslopes.mean()),
            }
        )
    sums = np.array([r["sum_mean"] for r in rows])
    meshes = np.array([r["mesh"] for r in rows], dtype=float)
    cross = float(np.polyfit(np.log(meshes), np.log(np.maximum(sums, 1e-300)), 1)[0])
    return {"rows": rows, "cross_mesh_slope": cross, "coordinate": i, "q": q}


def tightness_probe(
    walk_family: Callable[[int, np.random.Generator], DiscretePath],
    delta_grid=(0.25, 0.5, 1.0),
    h: float = 0.1,
    n_walks: int = 150,
    walk_steps: int = 64,
    seed: int = 0,
) -> dict:
    """Empirical check of E[nu_delta] <= ceil(T/h) / (1 - q_hat).

    q_hat is the pooled frequency of consecutive oscillation times closer than
    h (a proxy for the conditional bound), inflated by 3 binomial stderr.
    """
    rows = []
    for di, delta in enumerate(delta_grid):
        counts = np.zeros(n_walks)
        gaps_close = 0
        gaps_total = 0
        T = 1.0
        for w in range(n_walks):
            rng = child_rng(seed, 1000 * di + w)
            walk = walk_family(walk_steps, rng)
            T = walk.T
            rep = nu_delta(walk, delta)
            counts[w] = rep.count
            stops = [0] + list(rep.stop_times)
            stop_times = [walk.times[s] for s in stops]
            for a, b in zip(stop_times, stop_times[1:]):
                gaps_total += 1
                if b - a <= h:
                    gaps_close += 1
            gaps_total += 1  # final gap to infinity counts as > h
        q_hat = gaps_close / max(gaps_total, 1)
        q_stderr = math.sqrt(max(q_hat * (1 - q_hat), 1e-12) / max(gaps_total, 1))
        q3 = min(q_hat + 3 * q_stderr, 1 - 1e-9)
        bound = math.ceil(T / h) / (1 - q3)
        mean = float(counts.mean())
        stderr = float(counts.std(ddof=1) / math.sqrt(n_walks)) if n_walks > 1 else 0.0
        rows.append(
            {
                "delta": delta,
                "E_nu": mean,
                "E_nu_stderr": stderr,
                "q_hat": q_hat,
                "bound": bound,
                "holds": bool(mean - 3 * stderr <= bound),
            }
        )
    return {"rows": rows, "h": h, "all_hold": all(r["holds"] for r in rows)}


# ---------------------------------------------------------------------------
# Serialization


def triplet_to_json(triplet: LevyTriplet) -> dict:
    Pi = triplet.Pi
    if Pi.family == "stable":
        pi_obj = {
            "family": "stable", "alpha": Pi.alpha, "cutoff": Pi.cutoff,
            "intensity": Pi.intensity,
        }
    else:
        pi_obj = {
            "atoms": [
                {"point": algebra.group_to_json(g), "w": w} for g, w in Pi.atoms
            ]
        }
    return {
        "d": triplet.ctx.d,
        "N": triplet.ctx.N,
        "A": triplet.A.tolist(),
        "B": triplet.B.tolist(),
        "Pi": pi_obj,
    }


def triplet_from_json(obj: dict, ctx: AlgebraContext | None = None) -> LevyTriplet:
    if ctx is None:
        ctx = make_context(obj["d"], obj["N"])
    pi_obj = obj.get("Pi") or {}
    if "family" in pi_obj:
        Pi = stable_measure(ctx, pi_obj["alpha"], pi_obj["cutoff"], pi_obj.get("intensity", 1.0))
    elif pi_obj.get("atoms"):
        Pi = atomic_measure(
            ctx,
            [(algebra.group_from_json(a["point"], ctx), a["w"]) for a in pi_obj["atoms"]],
        )
    else:
        Pi = JumpMeasure(ctx=ctx)
    return LevyTriplet(ctx, np.asarray(obj["A"], dtype=float), np.asarray(obj["B"], dtype=float), Pi)
