"""Linear RDEs driven by piecewise log-linear group paths.

Along a geodesic segment with log ell the flow is exactly expm(M_ext(ell)),
where M_ext extends the d driving matrices to tensor words by reversed
composition; a path's flow is the ordered product over its segments.  This
module also evaluates the characteristic exponent Psi of a Levy triplet and
verifies E[M(X^phi)] = exp(Psi) by Monte Carlo.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import algebra, interpolation, levy
from .algebra import (
    AlgebraContext,
    GroupElement,
    LieElement,
    group_exp,
    group_log,
    make_context,
    tensor_mul,
)
from .interpolation import PathFunction
from .levy import LevyTriplet, PvarExponentInput, child_rng, min_pvar_exponent
from .paths import LOG_LINEAR, DiscretePath

__all__ = [
    "LinearVectorFields",
    "CharFunctionReport",
    "extend_to_words",
    "extend_to_tensor",
    "solve_linear",
    "euler_increment",
    "char_exponent",
    "lk_verify",
    "convergence_experiment",
    "fields_to_json",
    "fields_from_json",
]

UNITARITY_TOL = 1e-9


@dataclass(frozen=True)
class LinearVectorFields:
    """d matrices acting on C^e (or R^e), with the word extension."""

    ctx: AlgebraContext
    mats: np.ndarray  # shape (d, e, e)
    anti_hermitian: bool = False

    def __post_init__(self):
        mats = np.ascontiguousarray(self.mats)
        if mats.ndim != 3 or mats.shape[0] != self.ctx.d or mats.shape[1] != mats.shape[2]:
            raise ValueError(f"mats must have shape (d, e, e), got {mats.shape}")
        if not np.iscomplexobj(mats):
            mats = mats.astype(complex)
        if self.anti_hermitian:
            worst = max(
                float(np.abs(M + M.conj().T).max()) for M in mats
            )
            if worst > 1e-12:
                raise ValueError(f"matrices tagged anti-Hermitian violate M^* = -M by {worst:.2e}")
        mats.setflags(write=False)
        object.__setattr__(self, "mats", mats)

    @property
    def e(self) -> int:
        return self.mats.shape[1]

    @property
    def d(self) -> int:
        return self.mats.shape[0]

    def identity(self) -> np.ndarray:
        return np.eye(self.e, dtype=complex)

    def word_stacks(self) -> list[np.ndarray]:
        """Per level j: array (d^j, e, e) of extended word matrices (cached)."""
        cached = getattr(self, "_stacks", None)
        if cached is None:
            cached = _word_stacks(self)
            object.__setattr__(self, "_stacks", cached)
        return cached

    def on_basis(self, i: int) -> np.ndarray:
        """M(u_i): the extension applied to the i-th Lie basis element."""
        ctx = self.ctx
        deg = int(ctx.degrees[i])
        vec = np.zeros(ctx.m)
        vec[i] = 1.0
        tensor = ctx.basis_expansion[deg - 1] @ vec[ctx.level_slice(deg)]
        stack = self.word_stacks()[deg - 1]
        return np.tensordot(tensor, stack, axes=1)


def extend_to_words(fields: LinearVectorFields, word: tuple[int, ...]) -> np.ndarray:
    """M(e_{i_1} ox ... ox e_{i_k}) = M(e_{i_k}) ... M(e_{i_1})."""
    out = fields.identity()
    for letter in word:
        out = fields.mats[letter] @ out
    # The loop above left-multiplies later letters, matching the reversed order.
    return out


def _word_stacks(fields: LinearVectorFields) -> list[np.ndarray]:
    ctx = fields.ctx
    e = fields.e
    stacks = [fields.mats]
    for j in range(2, ctx.N + 1):
        prev = stacks[-1]  # (d^{j-1}, e, e) for words w
        # word w' = w ox letter: M(w') = M(letter) @ M(w)
        new = np.einsum("aik,wkj->waij", fields.mats, prev).reshape(ctx.d ** j, e, e)
        stacks.append(new)
    return stacks


def extend_to_tensor(fields: LinearVectorFields, levels) -> np.ndarray:
    """Linear extension applied to tensor levels [lvl0..lvlN] (scalar -> id)."""
    out = complex(levels[0][0]) * fields.identity()
    stacks = fields.word_stacks()
    for j in range(1, fields.ctx.N + 1):
        if np.any(levels[j]):
            out = out + np.tensordot(levels[j], stacks[j - 1], axes=1)
    return out


def extend_to_lie(fields: LinearVectorFields, ell: LieElement) -> np.ndarray:
    """M_ext(ell) for a Lie element: contraction of its word expansion."""
    return extend_to_tensor(fields, ell.tensor().levels)


def _expm(A: np.ndarray) -> np.ndarray:
    """Matrix exponential (scaling-and-squaring Pade, via scipy)."""
    return scipy.linalg.expm(A)


def _expm_anti_hermitian_batch(K: np.ndarray) -> np.ndarray:
    """Batched expm for anti-Hermitian K, shape (..., e, e).

    e = 2 uses the closed form in real arithmetic: writing K = i t I + i (a
    traceless Hermitian part), exp(K) = e^{it}(cos(w) I + sinc(w) (K - i t I))
    with w real, so all transcendentals act on real arrays.  Larger e
    diagonalises i^{-1} K batch-wise.
    """
    e = K.shape[-1]
    if e == 2:
        t = 0.5 * (K[..., 0, 0].imag + K[..., 1, 1].imag)
        alpha = 0.5 * (K[..., 0, 0].imag - K[..., 1, 1].imag)
        b = K[..., 0, 1]
        w = np.sqrt(alpha * alpha + b.real * b.real + b.imag * b.imag)
        cosw = np.cos(w)
        sincw = np.sinc(w / np.pi)  # sin(w)/w, safe at w = 0
        phase = np.cos(t) + 1j * np.sin(t)
        out = np.empty_like(K)
        out[..., 0, 0] = phase * (cosw + 1j * (sincw * alpha))
        out[..., 0, 1] = phase * (sincw * b)
        out[..., 1, 0] = phase * (sincw * K[..., 1, 0])
        out[..., 1, 1] = phase * (cosw - 1j * (sincw * alpha))
        return out
    H = K / 1j
    vals, vecs = np.linalg.eigh(H)
    phase = np.exp(1j * vals)
    return np.einsum("...ik,...k,...jk->...ij", vecs, phase, vecs.conj())


try:  # pragma: no cover - exercised via the dispatch test
    import numba

    @numba.njit(parallel=True, cache=True)
    def _su2_fold_jit(hs):  # (P, S, 4) -> (theta (P,), quat (P, 4))
        P, S = hs.shape[0], hs.shape[1]
        theta = np.zeros(P)
        quat = np.empty((P, 4))
        for p in numba.prange(P):
            t = 0.0
            q0, q1, q2, q3 = 1.0, 0.0, 0.0, 0.0
            for s in range(S):
                t += hs[p, s, 0]
                h1 = hs[p, s, 1]
                h2 = hs[p, s, 2]
                h3 = hs[p, s, 3]
                w = math.sqrt(h1 * h1 + h2 * h2 + h3 * h3)
                c = math.cos(w)
                sc = math.sin(w) / w if w > 1e-4 else 1.0 - w * w / 6.0
                p1 = sc * h1
                p2 = sc * h2
                p3 = sc * h3
                n0 = c * q0 - p1 * q1 - p2 * q2 - p3 * q3
                n1 = c * q1 + q0 * p1 - (p2 * q3 - p3 * q2)
                n2 = c * q2 + q0 * p2 - (p3 * q1 - p1 * q3)
                n3 = c * q3 + q0 * p3 - (p1 * q2 - p2 * q1)
                q0, q1, q2, q3 = n0, n1, n2, n3
            theta[p] = t
            quat[p, 0] = q0
            quat[p, 1] = q1
            quat[p, 2] = q2
            quat[p, 3] = q3
        return theta, quat

except ImportError:  # pragma: no cover
    _su2_fold_jit = None


def _pauli_coefficients(A: np.ndarray) -> np.ndarray:
    """Real (t, h1, h2, h3) with anti-Hermitian 2x2 A = i (t I + h . sigma)."""
    return np.array(
        [
            0.5 * (A[0, 0].imag + A[1, 1].imag),
            A[0, 1].imag,
            A[0, 1].real,
            0.5 * (A[0, 0].imag - A[1, 1].imag),
        ]
    )


def _su2_fold(hs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ordered product of exp(i(t I + h.sigma)) over the step axis.

    hs has shape (P, S, 4) = (t, h1, h2, h3) per path and step.  Returns the
    accumulated phases theta (P,) and unit quaternions (P, 4) representing
    e^{i theta}(q0 I + i q.sigma), multiplied later-step-on-the-left.  The
    product is folded pairwise (adjacent steps first), which preserves the
    ordering and vectorises over both axes.
    """
    theta = hs[:, :, 0].sum(axis=1)
    w = np.sqrt(hs[:, :, 1] ** 2 + hs[:, :, 2] ** 2 + hs[:, :, 3] ** 2)
    sincw = np.sinc(w / np.pi)
    quat = np.empty(hs.shape[:2] + (4,))
    quat[:, :, 0] = np.cos(w)
    quat[:, :, 1:] = sincw[:, :, None] * hs[:, :, 1:]
    while quat.shape[1] > 1:
        n = quat.shape[1]
        half = n // 2
        pairs = quat[:, : 2 * half].reshape(quat.shape[0], half, 2, 4)
        q0, q1, q2, q3 = (pairs[:, :, 0, c] for c in range(4))  # earlier steps
        p0, p1, p2, p3 = (pairs[:, :, 1, c] for c in range(4))  # later, on the left
        out = np.empty((quat.shape[0], half, 4))
        out[..., 0] = p0 * q0 - p1 * q1 - p2 * q2 - p3 * q3
        # p0 q + q0 p - p x q, written out per component
        out[..., 1] = p0 * q1 + q0 * p1 - (p2 * q3 - p3 * q2)
        out[..., 2] = p0 * q2 + q0 * p2 - (p3 * q1 - p1 * q3)
        out[..., 3] = p0 * q3 + q0 * p3 - (p1 * q2 - p2 * q1)
        if n % 2:
            out = np.concatenate([out, quat[:, -1:]], axis=1)
        quat = out
    return theta, quat[:, 0]


def _su2_to_matrices(theta: np.ndarray, quat: np.ndarray) -> np.ndarray:
    phase = np.cos(theta) + 1j * np.sin(theta)
    out = np.empty((len(theta), 2, 2), dtype=complex)
    out[:, 0, 0] = phase * (quat[:, 0] + 1j * quat[:, 3])
    out[:, 0, 1] = phase * (quat[:, 2] + 1j * quat[:, 1])
    out[:, 1, 0] = phase * (-quat[:, 2] + 1j * quat[:, 1])
    out[:, 1, 1] = phase * (quat[:, 0] - 1j * quat[:, 3])
    return out


def segment_flow(fields: LinearVectorFields, ell: LieElement) -> np.ndarray:
    """Exact flow across one geodesic segment: expm(M_ext(ell))."""
    K = extend_to_lie(fields, ell)
    if fields.anti_hermitian:
        return _expm_anti_hermitian_batch(K[None])[0]
    return _expm(K)


def solve_linear(path: DiscretePath, fields: LinearVectorFields) -> np.ndarray:
    """Endpoint flow map of the linear RDE along a piecewise log-linear path.

    Ordered product over segments of expm(M_ext(log increment)), later
    segments composing on the left; invariant under reparametrisation.
    """
    if path.kind != LOG_LINEAR:
        raise ValueError("solve_linear expects a log_linear path")
    if path.ctx.d != fields.d:
        raise ValueError(f"path dimension {path.ctx.d} != fields dimension {fields.d}")
    out = fields.identity()
    for inc in path.increments():
        out = segment_flow(fields, group_log(inc)) @ out
    return out


def euler_increment(fields: LinearVectorFields, g: GroupElement) -> np.ndarray:
    """Step-N Euler increment: the truncated extension M_ext(g) (scalar -> id)."""
    return extend_to_tensor(fields, g.levels)


def unitarity_defect(U: np.ndarray) -> float:
    return float(np.linalg.norm(U.conj().T @ U - np.eye(U.shape[-1])))


# ---------------------------------------------------------------------------
# The characteristic exponent


def _check_remark_condition(triplet: LevyTriplet) -> None:
    """Finite p-variation below N+1 forces A rows of high-degree coords to vanish."""
    ctx = triplet.ctx
    bad = [
        i
        for i in range(ctx.m)
        if int(ctx.degrees[i]) > ctx.N // 2 and np.any(triplet.A[i] != 0.0)
    ]
    if bad:
        raise ValueError(
            f"A has nonzero rows at coordinates {bad} of degree > floor(N/2); "
            "no such process has finite p-variation below N+1"
        )


def char_exponent(
    triplet: LevyTriplet,
    pf: PathFunction,
    fields: LinearVectorFields,
    quad_points: int = 256,
) -> tuple[np.ndarray, dict]:
    """Psi(M) = sum B_i M(u_i) + 1/2 sum A_ij M(u_i) M(u_j) + compensated jump integral.

    The jump term sums M_phi(x) - id - sum xi_i(x) M(u_i) over atoms; for the
    truncated stable family it is integrated by radial Gauss-Legendre panels
    times an angular rule, with the dropped small-jump contribution bounded and
    reported (not silently ignored).
    """
    ctx = triplet.ctx
    _check_remark_condition(triplet)
    basis_mats = [fields.on_basis(i) for i in range(ctx.m)]
    e = fields.e
    psi = np.zeros((e, e), dtype=complex)
    for i in range(ctx.m):
        if triplet.B[i] != 0.0:
            psi += triplet.B[i] * basis_mats[i]
    for i in range(ctx.m):
        for j in range(ctx.m):
            if triplet.A[i, j] != 0.0:
                psi += 0.5 * triplet.A[i, j] * basis_mats[i] @ basis_mats[j]

    info: dict = {"jump_rule": "none", "truncation_bound": 0.0}
    Pi = triplet.Pi

    def compensated(x: GroupElement) -> np.ndarray:
        if not pf.domain(x):
            raise interpolation.DomainError("jump atom outside the path function domain")
        Mphi = solve_linear(pf.rule(x), fields)
        xi = algebra.xi_coords(x)
        out = Mphi - fields.identity()
        for i in range(ctx.m):
            if xi[i] != 0.0:
                out = out - xi[i] * basis_mats[i]
        return out

    if Pi.atoms:
        info["jump_rule"] = "atom-sum"
        for g, w in Pi.atoms:
            psi += w * compensated(g)
    elif Pi.family == "stable":
        info["jump_rule"] = "radial-gauss-legendre"
        d = ctx.d
        if d > 2:
            raise NotImplementedError("stable-family quadrature implemented for d <= 2")
        # Map |z| in [cutoff, R) by panels; beyond R bound the unitary tail.
        R = Pi.cutoff * 1e4 ** (1.0 / Pi.alpha)
        nodes, weights = np.polynomial.legendre.leggauss(quad_points)
        # Substitute r = cutoff * exp(s), s in [0, log(R/cutoff)]: resolves the power law.
        smax = math.log(R / Pi.cutoff)
        s = 0.5 * smax * (nodes + 1.0)
        ws = 0.5 * smax * weights
        radii = Pi.cutoff * np.exp(s)
        if d == 1:
            angles = [np.array([1.0]), np.array([-1.0])]
            ang_w = [1.0, 1.0]
        else:
            n_ang = 32
            th = 2 * math.pi * (np.arange(n_ang) + 0.5) / n_ang
            angles = [np.array([math.cos(t), math.sin(t)]) for t in th]
            ang_w = [2 * math.pi / n_ang] * n_ang
        acc = np.zeros((e, e), dtype=complex)
        for omega, aw in zip(angles, ang_w):
            for r, w in zip(radii, ws):
                coords = np.zeros(ctx.m)
                coords[:d] = r * omega
                x = group_exp(LieElement(ctx, coords))
                density = Pi.intensity * r ** (-d - Pi.alpha)
                # dz = r^{d-1} dr domega, with dr = r ds under the substitution.
                acc += aw * w * density * r ** (d - 1) * r * compensated(x)
        psi += acc
        # |M_phi - id - sum xi M| <= 2 + |z| sum ||M_i|| on the far tail r > R.
        mass_beyond = Pi.intensity * _surface(d) * R**-Pi.alpha / Pi.alpha
        mean_r_beyond = Pi.intensity * _surface(d) * R ** (1 - Pi.alpha) / max(Pi.alpha - 1, 1e-9)
        mnorm = sum(float(np.linalg.norm(M, 2)) for M in fields.mats)
        info["truncation_bound"] = float(2 * mass_beyond + (mnorm * mean_r_beyond if Pi.alpha > 1 else math.inf))
        info["radial_cap"] = R
    return psi, info


def _surface(d: int) -> float:
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


# ---------------------------------------------------------------------------
# Monte Carlo verification of the Levy-Khintchine formula


@dataclass(frozen=True)
class CharFunctionReport:
    psi: np.ndarray
    closed_form: np.ndarray
    mc_mean: np.ndarray
    n_samples: int
    op_error: float
    stderr_proxy: float
    max_unitarity_defect: float

    def within(self, abs_floor: float = 5e-3, stderr_mult: float = 3.0) -> bool:
        return self.op_error <= max(stderr_mult * self.stderr_proxy, abs_floor)

    def to_json(self) -> dict:
        def c(mat):
            return [[[float(v.real), float(v.imag)] for v in row] for row in mat]

        return {
            "psi": c(self.psi),
            "closed_form": c(self.closed_form),
            "mc_mean": c(self.mc_mean),
            "n_samples": self.n_samples,
            "op_error": self.op_error,
            "stderr_proxy": self.stderr_proxy,
            "max_unitarity_defect": self.max_unitarity_defect,
        }


def _flow_chunk(
    triplet: LevyTriplet,
    pf: PathFunction,
    fields: LinearVectorFields,
    n_steps: int,
    T: float,
    seed: int,
    streams: range,
) -> tuple[np.ndarray, np.ndarray, float, int]:
    """Fused sample-connect-solve for a chunk of paths.

    Flows every diffusion sub-interval geodesically (expm of the level-1 log)
    and multiplies M_phi at jump atoms: exactly solve_linear of the connected
    path when the path function acts log-linearly on diffusion increments.
    Returns (sum, sum of |entries|^2, worst unitarity defect, count).
    """
    ctx = triplet.ctx
    e = fields.e
    root = triplet.diffusion_root()
    drift = triplet.compensated_drift()
    stacks = fields.word_stacks()
    level1_only = not np.any(root[ctx.d :, :]) and not np.any(drift[ctx.d :])
    pure_jump = not np.any(root) and not np.any(drift)
    # Atom flows are shared across paths.
    atom_flow: dict[int, np.ndarray] = {}
    for idx, (g, _) in enumerate(triplet.Pi.atoms):
        atom_flow[idx] = solve_linear(pf.check_endpoints(g), fields)
    atom_index = {id(g): idx for idx, (g, _) in enumerate(triplet.Pi.atoms)}

    total = np.zeros((e, e), dtype=complex)
    total_sq = np.zeros((e, e))
    worst_defect = 0.0
    count = 0
    eye = np.eye(e, dtype=complex)

    for stream in streams:
        rng = child_rng(seed, stream)
        boundaries, sub, is_jump, jumps, normals = levy._increment_scheme(
            triplet, n_steps, T, rng
        )
        if pure_jump:
            U = None
        else:
            if level1_only:
                coords1 = np.sqrt(sub)[:, None] * (normals @ root.T)[:, : ctx.d]
                coords1 += np.outer(sub, drift[: ctx.d])
                K = np.tensordot(coords1, stacks[0], axes=1)
            else:
                full = np.sqrt(sub)[:, None] * (normals @ root.T) + np.outer(sub, drift)
                K = np.stack(
                    [extend_to_lie(fields, LieElement(ctx, full[row])) for row in range(len(sub))]
                )
            if fields.anti_hermitian:
                U = _expm_anti_hermitian_batch(K)
            else:
                U = np.stack([_expm(K[row]) for row in range(len(sub))])
        flow = eye.copy()
        jcount = 0
        for k in range(len(sub)):
            if U is not None:
                flow = U[k] @ flow
            if is_jump[k + 1]:
                g = jumps[jcount]
                idx = atom_index.get(id(g))
                if idx is not None:
                    flow = atom_flow[idx] @ flow
                else:
                    flow = solve_linear(pf.check_endpoints(g), fields) @ flow
                jcount += 1
        if fields.anti_hermitian:
            worst_defect = max(worst_defect, unitarity_defect(flow))
        total += flow
        total_sq += np.abs(flow) ** 2
        count += 1
    return total, total_sq, worst_defect, count


def _flow_chunk_batched(
    triplet: LevyTriplet,
    fields: LinearVectorFields,
    n_steps: int,
    T: float,
    seed: int,
    streams: range,
    step_block: int = 128,
) -> tuple[np.ndarray, np.ndarray, float, int]:
    """Vectorised jump-free variant: batched products, steps in blocks.

    Draws each path's normal block from its own stream (the scheme order has
    no jump draws when Pi = 0), so path ``stream`` sees the same increments as
    sample_levy(seed, stream).
    """
    ctx = triplet.ctx
    e = fields.e
    root = triplet.diffusion_root()
    drift = triplet.compensated_drift()
    stacks = fields.word_stacks()
    P = len(streams)
    h = T / n_steps
    normals = np.empty((P, n_steps, ctx.m))
    for row, stream in enumerate(streams):
        rng = child_rng(seed, stream)
        normals[row] = rng.standard_normal((n_steps, ctx.m))
    level1_only = not np.any(root[ctx.d :, :]) and not np.any(drift[ctx.d :])
    if e == 2 and fields.anti_hermitian and level1_only:
        # SU(2) fast path: fold in the quaternion representation; the Pauli
        # projection absorbs the diffusion root and drift in one contraction.
        pauli = np.stack([_pauli_coefficients(M) for M in stacks[0]])  # (d, 4)
        W = math.sqrt(h) * root.T[:, : ctx.d] @ pauli  # (m, 4)
        hs = normals.reshape(-1, ctx.m) @ W
        hs += (h * drift[: ctx.d]) @ pauli
        hs = np.ascontiguousarray(hs.reshape(P, n_steps, 4))
        if _su2_fold_jit is not None:
            theta, quat = _su2_fold_jit(hs)
        else:
            theta, quat = _su2_fold(hs)
        flows = _su2_to_matrices(theta, quat)
    else:
        coords = math.sqrt(h) * np.einsum("psm,im->psi", normals, root) + h * drift
        flows = np.broadcast_to(np.eye(e, dtype=complex), (P, e, e)).copy()
        for lo in range(0, n_steps, step_block):
            hi = min(lo + step_block, n_steps)
            if level1_only:
                K = np.tensordot(coords[:, lo:hi, : ctx.d], stacks[0], axes=1)
            else:
                K = np.empty((P, hi - lo, e, e), dtype=complex)
                for r in range(P):
                    for s in range(lo, hi):
                        K[r, s - lo] = extend_to_lie(fields, LieElement(ctx, coords[r, s]))
            if fields.anti_hermitian:
                U = _expm_anti_hermitian_batch(K)
            else:
                U = np.empty_like(K)
                for r in range(P):
                    for s in range(hi - lo):
                        U[r, s] = _expm(K[r, s])
            for s in range(hi - lo):
                flows = np.matmul(U[:, s], flows)
    defect = 0.0
    if fields.anti_hermitian:
        defects = np.linalg.norm(
            np.swapaxes(flows.conj(), 1, 2) @ flows - np.eye(e), axis=(1, 2)
        )
        defect = float(defects.max())
    total = flows.sum(axis=0)
    total_sq = (np.abs(flows) ** 2).sum(axis=0)
    return total, total_sq, defect, P


def lk_verify(
    triplet: LevyTriplet,
    pf: PathFunction,
    fields: LinearVectorFields,
    n_samples: int = 100_000,
    n_steps: int = 1024,
    seed: int = 0,
    T: float = 1.0,
    jobs: int = 1,
    chunk: int = 4096,
) -> CharFunctionReport:
    """Monte Carlo check of E[M(X^phi)] = exp(Psi_X(M)).

    Samples paths with the sample_levy scheme, flows each connected path
    (diffusion sub-intervals geodesically, path-function windows at jumps) and
    compares the average against expm of the closed-form exponent.  Results are
    independent of ``jobs``: chunk seeds derive from the chunk index alone and
    chunks are reduced pairwise in order.
    """
    if not fields.anti_hermitian:
        raise ValueError("lk_verify requires anti-Hermitian vector fields")
    report = min_pvar_exponent(PvarExponentInput.from_triplet(triplet))
    if report.p_star >= triplet.ctx.N + 1:
        raise ValueError(
            "triplet has no finite p-variation below N+1:\n" + report.describe()
        )
    psi, _ = char_exponent(triplet, pf, fields)
    closed = _expm(psi)

    ranges = [range(lo, min(lo + chunk, n_samples)) for lo in range(0, n_samples, chunk)]
    jump_free = triplet.Pi.is_empty()

    def run(chunk_range):
        if jump_free:
            return _flow_chunk_batched(triplet, fields, n_steps, T, seed, chunk_range)
        return _flow_chunk(triplet, pf, fields, n_steps, T, seed, chunk_range)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, ranges))
    else:
        results = [run(r) for r in ranges]

    total = levy._pairwise_sum([r[0] for r in results])
    total_sq = levy._pairwise_sum([r[1] for r in results])
    defect = max(r[2] for r in results)
    count = sum(r[3] for r in results)

    mean = total / count
    var = np.maximum(total_sq / count - np.abs(mean) ** 2, 0.0)
    stderr_matrix = np.sqrt(var / count)
    stderr = float(np.linalg.norm(stderr_matrix, 2))
    err = float(np.linalg.norm(mean - closed, 2))
    return CharFunctionReport(
        psi=psi,
        closed_form=closed,
        mc_mean=mean,
        n_samples=count,
        op_error=err,
        stderr_proxy=stderr,
        max_unitarity_defect=defect,
    )


# ---------------------------------------------------------------------------
# Convergence experiment: E[M_phi(X_{n1})]^n -> exp(Psi)


def _gauss_hermite_mean(
    fields: LinearVectorFields,
    pf: PathFunction,
    ctx: AlgebraContext,
    root1: np.ndarray,
    drift: np.ndarray,
    scale: float,
    nodes: int = 24,
) -> np.ndarray:
    """E[M_phi(exp(scale * root1 z + drift))] by tensor Gauss-Hermite (level 1)."""
    d = ctx.d
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / math.sqrt(2 * math.pi)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    weights = np.ones_like(grids[0])
    for g in np.meshgrid(*([w] * d), indexing="ij"):
        weights = weights * g
    zs = np.stack([g.ravel() for g in grids], axis=1)
    weights = weights.ravel()
    acc = np.zeros((fields.e, fields.e), dtype=complex)
    for z, wt in zip(zs, weights):
        coords = drift.copy()
        coords[:d] += scale * (root1 @ z)
        x_el = group_exp(LieElement(ctx, coords))
        acc += wt * solve_linear(pf.check_endpoints(x_el), fields)
    return acc


def convergence_experiment(
    array_factory,
    pf: PathFunction,
    fields: LinearVectorFields,
    target: np.ndarray,
    n_grid=(16, 64, 256, 1024),
    mc: int = 0,
    seed: int = 0,
) -> dict:
    """Trend of ||E[M_phi(X_{n1})]^n - target|| across n.

    ``array_factory(n)`` must return either an object with ``exact_mean(pf,
    fields)`` (deterministic or quadrature evaluation of E[M_phi(X_{n1})]) or,
    with mc > 0, an object with ``sample(rng, size)`` returning group
    increments.  By iid-ness E[M(X^{n,phi})] equals the n-th matrix power of
    the single-increment mean.
    """
    rows = []
    for idx, n in enumerate(n_grid):
        arr = array_factory(n)
        if hasattr(arr, "exact_mean"):
            mean = arr.exact_mean(pf, fields)
            stderr = 0.0
        else:
            if mc <= 0:
                raise ValueError("sampling array requires mc > 0")
            rng = child_rng(seed, idx)
            draws = arr.sample(rng, mc)
            flows = np.stack(
                [solve_linear(pf.check_endpoints(g), fields) for g in draws]
            )
            mean = flows.mean(axis=0)
            stderr = float(
                np.linalg.norm(flows.std(axis=0, ddof=1) / math.sqrt(mc), 2)
            )
        powered = np.linalg.matrix_power(mean, n)
        rows.append(
            {
                "n": n,
                "error": float(np.linalg.norm(powered - target, 2)),
                "mean_stderr": stderr,
            }
        )
    errors = [r["error"] for r in rows]
    inversions = sum(1 for a, b in zip(errors, errors[1:]) if b > a)
    return {"rows": rows, "inversions": inversions}


@dataclass(frozen=True)
class GaussianArray:
    """X_{n1} = exp(n^{-1/2} A1^{1/2} z + B/n): the Donsker-type level-1 array."""

    ctx: AlgebraContext
    sigma_root: np.ndarray  # level-1 (d x d) diffusion root
    drift: np.ndarray       # length-m Lie drift
    n: int
    gh_nodes: int = 24

    def exact_mean(self, pf: PathFunction, fields: LinearVectorFields) -> np.ndarray:
        return _gauss_hermite_mean(
            fields, pf, self.ctx, self.sigma_root, self.drift / self.n,
            scale=1.0 / math.sqrt(self.n), nodes=self.gh_nodes,
        )

    def sample(self, rng: np.random.Generator, size: int):
        zs = rng.standard_normal((size, self.ctx.d))
        out = []
        for z in zs:
            coords = self.drift / self.n
            coords = coords.copy()
            coords[: self.ctx.d] += self.sigma_root @ z / math.sqrt(self.n)
            out.append(group_exp(LieElement(self.ctx, coords)))
        return out


@dataclass(frozen=True)
class DriftArray:
    """Deterministic X_{n1} = exp(B/n)."""

    ctx: AlgebraContext
    drift: np.ndarray
    n: int

    def exact_mean(self, pf: PathFunction, fields: LinearVectorFields) -> np.ndarray:
        g = group_exp(LieElement(self.ctx, self.drift / self.n))
        return solve_linear(pf.check_endpoints(g), fields)

    def sample(self, rng: np.random.Generator, size: int):
        g = group_exp(LieElement(self.ctx, self.drift / self.n))
        return [g] * size


@dataclass(frozen=True)
class PerturbedArray:
    """X_{n1} = exp(Y) exp(v/n) with Y a level-1 Gaussian and v central."""

    ctx: AlgebraContext
    sigma_root: np.ndarray
    v: LieElement
    n: int
    gh_nodes: int = 16

    def exact_mean(self, pf: PathFunction, fields: LinearVectorFields) -> np.ndarray:
        d = self.ctx.d
        x, w = np.polynomial.hermite_e.hermegauss(self.gh_nodes)
        w = w / math.sqrt(2 * math.pi)
        grids = np.meshgrid(*([x] * d), indexing="ij")
        weights = np.ones_like(grids[0])
        for g in np.meshgrid(*([w] * d), indexing="ij"):
            weights = weights * g
        zs = np.stack([g.ravel() for g in grids], axis=1)
        weights = weights.ravel()
        ev = group_exp((1.0 / self.n) * self.v)
        acc = np.zeros((fields.e, fields.e), dtype=complex)
        for z, wt in zip(zs, weights):
            coords = np.zeros(self.ctx.m)
            coords[:d] = self.sigma_root @ z / math.sqrt(self.n)
            x_el = tensor_mul(group_exp(LieElement(self.ctx, coords)), ev)
            acc += wt * solve_linear(pf.check_endpoints(x_el), fields)
        return acc

    def sample(self, rng: np.random.Generator, size: int):
        ev = group_exp((1.0 / self.n) * self.v)
        out = []
        for z in rng.standard_normal((size, self.ctx.d)):
            coords = np.zeros(self.ctx.m)
            coords[: self.ctx.d] = self.sigma_root @ z / math.sqrt(self.n)
            out.append(tensor_mul(group_exp(LieElement(self.ctx, coords)), ev))
        return out


# ---------------------------------------------------------------------------
# Serialization: M as a JSON list of row-major matrices, complex as [re, im]


def fields_to_json(fields: LinearVectorFields) -> dict:
    return {
        "d": fields.d,
        "e": fields.e,
        "anti_hermitian": fields.anti_hermitian,
        "mats": [
            [[[float(v.real), float(v.imag)] for v in row] for row in M]
            for M in fields.mats
        ],
    }


def fields_from_json(obj: dict, ctx: AlgebraContext | None = None) -> LinearVectorFields:
    if ctx is None:
        ctx = make_context(obj["d"], obj.get("N", 2))
    mats = np.array(
        [[[complex(v[0], v[1]) for v in row] for row in M] for M in obj["mats"]]
    )
    return LinearVectorFields(ctx=ctx, mats=mats, anti_hermitian=bool(obj.get("anti_hermitian", False)))
