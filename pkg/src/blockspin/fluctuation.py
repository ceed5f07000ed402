"""Fluctuation covariance, its resolvent identity, square roots and determinant bookkeeping.

All operators act on value vectors over the stride-``k`` sites of
``Omega_{k+1}``.  That lattice has unit weight at level ``k``, so the
matrices are symmetric in the plain sense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import linalg as sla

from .blockavg import averaging_matrix
from .geometry import Region
from .greens import RandomWalkExpansion, StepGeometry, dense_green, q_adjoint_values
from .quadforms import ActionParams, fluct_kernel, laplacian_matrix, stiffness_vector

DEFAULT_NODES = 200


# ---------------------------------------------------------------- quadrature


@dataclass(frozen=True)
class SqrtQuadrature:
    """Gauss–Legendre rule for ``(1/π) ∫_0^∞ dr/√r f(r)`` after ``r = scale tan²θ``."""

    nodes: int = DEFAULT_NODES
    scale: float = 1.0

    @cached_property
    def points(self) -> tuple[np.ndarray, np.ndarray]:
        x, w = np.polynomial.legendre.leggauss(self.nodes)
        theta = 0.25 * np.pi * (x + 1.0)
        r = self.scale * np.tan(theta) ** 2
        # (1/π) dr/√r = (2√scale/π) sec²θ dθ and dθ = (π/4) dx
        weights = 0.5 * math.sqrt(self.scale) * w / np.cos(theta) ** 2
        return r, weights

    def halved(self) -> "SqrtQuadrature":
        return SqrtQuadrature(max(2, self.nodes // 2), self.scale)

    def apply(self, family: Callable[[float], np.ndarray]) -> np.ndarray:
        r, w = self.points
        total = None
        for ri, wi in zip(r, w):
            term = wi * family(float(ri))
            total = term if total is None else total + term
        return total


@dataclass(frozen=True)
class LineQuadrature:
    """Gauss–Legendre rule for ``∫_0^∞ f(r) dr`` after ``r = scale tan²θ``."""

    nodes: int = DEFAULT_NODES
    scale: float = 1.0

    @cached_property
    def points(self) -> tuple[np.ndarray, np.ndarray]:
        x, w = np.polynomial.legendre.leggauss(self.nodes)
        theta = 0.25 * np.pi * (x + 1.0)
        r = self.scale * np.tan(theta) ** 2
        weights = 0.25 * np.pi * w * 2 * self.scale * np.tan(theta) / np.cos(theta) ** 2
        return r, weights

    def apply(self, family: Callable[[float], np.ndarray | float]):
        r, w = self.points
        return sum(wi * family(float(ri)) for ri, wi in zip(r, w))


def spectral_sqrt(C: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
    if vals.min() <= 0:
        raise np.linalg.LinAlgError(f"covariance is not positive definite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(vals)) @ vecs.T


@dataclass
class SqrtResult:
    value: np.ndarray
    spectral: np.ndarray
    certificate: float
    square_defect: float

    @property
    def spectral_gap(self) -> float:
        return float(np.max(np.abs(self.value - self.spectral)))

    @property
    def within_certificate(self) -> bool:
        return self.square_defect <= self.certificate


def sqrt_via_integral(
    C: np.ndarray, quad: SqrtQuadrature | None = None, resolvent: Callable[[float], np.ndarray] | None = None
) -> SqrtResult:
    """``C^{1/2} = (1/π) ∫ dr/√r (C⁻¹ + r)⁻¹`` with a node-halving error certificate.

    The certificate is ``(η + ρ)(2‖S‖ + η + ρ)`` where ``η`` is the 2-norm
    gap between the rule and its half-node version and ``ρ = max(κ(C), n) ε ‖S‖``
    is the rounding floor of the resolvent sums; it bounds ``‖S² - C‖`` when
    ``η + ρ`` bounds the error of ``S``.  Node halving cannot see rounding,
    so without ``ρ`` an ill-conditioned ``C`` fails at machine precision.
    """
    quad = quad or SqrtQuadrature()
    if resolvent is None:
        Cinv = np.linalg.inv(C)
        eye = np.eye(len(C))

        def resolvent(r: float) -> np.ndarray:
            return np.linalg.inv(Cinv + r * eye)

    S = quad.apply(resolvent)
    S_half = quad.halved().apply(resolvent)
    eta = float(np.linalg.norm(S - S_half, 2))
    s_norm = float(np.linalg.norm(S, 2))
    rho = max(float(np.linalg.cond(C)), len(C)) * np.finfo(float).eps * s_norm
    cert = (eta + rho) * (2 * s_norm + eta + rho)
    defect = float(np.linalg.norm(S @ S - C, 2))
    return SqrtResult(S, spectral_sqrt(C), cert, defect)


# ---------------------------------------------------------------- the covariance problem


class FluctuationProblem:
    """Covariance ``C = [Δ_{k,Ω} + aL⁻² Q^T Q]⁻¹_{Ω_{k+1}}`` and its resolvent family."""

    def __init__(self, step: StepGeometry, params: ActionParams):
        self.step = step
        self.params = params
        g = step.geometry
        self.geometry = g
        self.k = step.k
        self.a_k = params.a_j(self.k)
        self.top = params.a / g.L**2
        self.sites = step.inner_sites
        self.omega1 = step.seq.omega(1).sites(0)

    @cached_property
    def projection(self) -> np.ndarray:
        """``Q^T Q`` on the stride-``k`` sites of Omega_{k+1} (value matrix)."""
        Q = self.step.Q_inner()
        return Q.T @ Q * float(self.geometry.L) ** self.geometry.d

    @cached_property
    def Qk(self) -> np.ndarray:
        """``Q_k`` from the finest sites of Omega_1 to Omega_{k+1}^{(k)}."""
        return averaging_matrix(self.geometry, self.sites, self.k, self.omega1, 0)

    @cached_property
    def Qk_adjoint(self) -> np.ndarray:
        g = self.geometry
        return self.Qk.T * (g.stride_weight(self.k) / g.site_weight)

    @cached_property
    def delta(self) -> np.ndarray:
        lay = self.step.layout
        full = fluct_kernel(lay, self.params, dense_green(lay, self.params)).matrix
        sl = self.step.inner_slots
        return full[np.ix_(sl, sl)]

    @cached_property
    def inverse_covariance(self) -> np.ndarray:
        return self.delta + self.top * self.projection

    @cached_property
    def covariance(self) -> np.ndarray:
        X = self.inverse_covariance
        vals = np.linalg.eigvalsh(0.5 * (X + X.T))
        if vals.min() <= 0:
            raise np.linalg.LinAlgError(f"covariance is not positive definite (min eigenvalue {vals.min():.3g})")
        return np.linalg.inv(X)

    def resolvent(self, r: float) -> np.ndarray:
        """``C_r = [Δ + aL⁻² Q^T Q + r]⁻¹`` by a dense solve."""
        return np.linalg.inv(self.inverse_covariance + r * np.eye(len(self.sites)))

    def A(self, r: float) -> np.ndarray:
        P = self.projection
        eye = np.eye(len(P))
        return (eye - P) / (self.a_k + r) + P / (self.a_k + self.top + r)

    def B(self, r: float) -> np.ndarray:
        P = self.projection
        eye = np.eye(len(P))
        return r / (self.a_k + r) * (eye - P) + (self.top + r) / (self.a_k + self.top + r) * P

    def generator(self, r: float) -> np.ndarray:
        """``-Δ + mu + [Q^T a Q]_{Ω_{k+1}^c} + a_k [Q_k^T B_r Q_k]_{Ω_{k+1}}`` on Omega_1."""
        g = self.geometry
        lay = self.step.layout
        Q = lay.Q_matrix(self.omega1)
        a = stiffness_vector(lay, self.params).copy()
        a[self.step.inner_slots] = 0.0
        H = laplacian_matrix(g, self.omega1) + self.params.mu_bar * np.eye(len(self.omega1))
        H += q_adjoint_values(lay, Q) @ (a[:, None] * Q)
        H += self.a_k * self.Qk_adjoint @ self.B(r) @ self.Qk
        return H

    def green(self, r: float) -> np.ndarray:
        return np.linalg.inv(self.generator(r))

    def resolvent_from_green(self, r: float, green: np.ndarray | None = None) -> np.ndarray:
        """``A_r + a_k² A_r Q_k G_r Q_k^T A_r``."""
        green = self.green(r) if green is None else green
        A = self.A(r)
        return A + self.a_k**2 * A @ self.Qk @ green @ self.Qk_adjoint @ A

    def resolvent_split_residual(self, r: float) -> float:
        """``a_k Q_k^T B_r Q_k`` against its split into ``Q_k^T Q_k`` and ``Q_{k+1}^T Q_{k+1}``."""
        lhs = self.a_k * self.Qk_adjoint @ self.B(r) @ self.Qk
        g = self.geometry
        next_sites = self.step.next_sites
        Qn = averaging_matrix(g, next_sites, self.k + 1, self.omega1, 0)
        Qn_adj = Qn.T * (g.stride_weight(self.k + 1) / g.site_weight)
        ak, t = self.a_k, self.top
        rhs = ak * r / (ak + r) * self.Qk_adjoint @ self.Qk
        rhs = rhs + ak**2 * t / ((ak + r) * (ak + t + r)) * Qn_adj @ Qn
        return float(np.max(np.abs(lhs - rhs)))

    def resolvent_identity_residual(self, r: float) -> float:
        return float(np.max(np.abs(self.resolvent(r) - self.resolvent_from_green(r))))

    # square roots

    def sqrt(self, quad: SqrtQuadrature | None = None) -> SqrtResult:
        return sqrt_via_integral(self.covariance, quad, self.resolvent)

    def lm_cubes(self) -> list[Region]:
        """``LM`` cubes of Omega_{k+1} (scale ``m+k+1``)."""
        return self.step.omega_next.cube_regions()

    def localized_sqrt(self, layers: int, quad: SqrtQuadrature | None = None) -> "LocalizedSqrt":
        """``Σ_□ 1_□ C^{1/2}(□*)`` with ``□* = □`` plus ``layers`` layers of ``LM`` cubes.

        ``C_r(□*)`` uses the weakened Green's function ``G_r(□*)`` of the random
        walk expansion (steps confined to cover cubes inside ``□*``).
        """
        quad = quad or SqrtQuadrature()
        seq = self.step.seq
        cubes = self.lm_cubes()
        stars = [c.enlarge(layers) for c in cubes]
        rows = [np.isin(self.sites, c.sites(self.k)) for c in cubes]
        r_nodes, w_nodes = quad.points
        loc = np.zeros((len(self.sites), len(self.sites)))
        full = np.zeros_like(loc)
        for r, w in zip(r_nodes, w_nodes):
            walk = RandomWalkExpansion(seq, self.generator(float(r)))
            full += w * self.resolvent(float(r))
            for row, star in zip(rows, stars):
                g_loc = walk.localized(star)
                C_loc = self.resolvent_from_green(float(r), g_loc)
                loc[row] += w * C_loc[row]
        return LocalizedSqrt(full, loc, self.covariance, cubes, stars, rows, layers, self.sites, self.k)

    # determinants

    def log_inverse_via_resolvent(self, quad: LineQuadrature | None = None) -> np.ndarray:
        """``log(C⁻¹)`` from the ``A``-part logarithms minus ``a_k² ∫ A Q_k G_r Q_k^T A dr``."""
        quad = quad or LineQuadrature()
        P = self.projection
        eye = np.eye(len(P))
        base = math.log(self.a_k) * (eye - P) + math.log(self.a_k + self.top) * P

        def integrand(r: float) -> np.ndarray:
            A = self.A(r)
            return A @ self.Qk @ self.green(r) @ self.Qk_adjoint @ A

        return base - self.a_k**2 * quad.apply(integrand)


@dataclass
class LocalizedSqrt:
    full: np.ndarray
    loc: np.ndarray
    covariance: np.ndarray
    cubes: list[Region]
    stars: list[Region]
    rows: list[np.ndarray]
    layers: int
    sites: np.ndarray
    level: int

    @property
    def delta(self) -> np.ndarray:
        return self.full - self.loc

    @property
    def delta_norm(self) -> float:
        """``sup ‖δ f‖_∞ / ‖f‖_∞`` (largest absolute row sum)."""
        return float(np.max(np.sum(np.abs(self.delta), axis=1)))

    @cached_property
    def inverse_sqrt(self) -> np.ndarray:
        return np.linalg.inv(self.full)

    @cached_property
    def contraction(self) -> np.ndarray:
        """``C^{-1/2} δC^{1/2}``."""
        return self.inverse_sqrt @ self.delta

    def loc_inverse(self, tol: float = 1e-15, max_terms: int = 200) -> tuple[np.ndarray, int]:
        """``[(C^{1/2})^loc]⁻¹ = Σ_n (C^{-1/2}δ)^n C^{-1/2}`` by the geometric series."""
        K = self.contraction
        term = self.inverse_sqrt.copy()
        total = term.copy()
        ref = float(np.max(np.abs(term)))
        for n in range(1, max_terms + 1):
            term = K @ term
            total += term
            if float(np.max(np.abs(term))) < tol * ref:
                return total, n
        raise ArithmeticError("localized square root series did not converge")

    def logdet_series(self, tol: float = 1e-14, max_terms: int = 200) -> tuple[list[float], float]:
        """Per-cube ``-Σ 1/n tr(1_□ K^n)`` and the total; stops when a term falls below ``tol``."""
        K = self.contraction
        per_cube = np.zeros(len(self.rows))
        power = np.eye(len(K))
        first = None
        for n in range(1, max_terms + 1):
            power = power @ K
            diag = np.diag(power)
            contrib = np.array([diag[row].sum() for row in self.rows]) / n
            per_cube -= contrib
            size = float(np.max(np.abs(contrib))) if len(contrib) else 0.0
            first = size if first is None else first
            if size <= tol * max(first, 1e-300) or size == 0.0:
                break
        else:
            raise ArithmeticError("trace-log series did not converge")
        return per_cube.tolist(), float(per_cube.sum())

    def logdet_ratio(self) -> float:
        """``log det loc - log det C^{1/2}`` from dense determinants."""
        s1, l1 = np.linalg.slogdet(self.loc)
        s2, l2 = np.linalg.slogdet(self.full)
        if s1 <= 0 or s2 <= 0:
            raise np.linalg.LinAlgError("square roots must have positive determinant")
        return float(l1 - l2)

    def quadratic_remainder(self, W: np.ndarray) -> tuple[float, list[float]]:
        """``R^(4) = <C^{-1/2}W, δW> - ½<δW, C⁻¹ δW>`` and its per-cube split."""
        Cinv = np.linalg.inv(self.covariance)
        dW = self.delta @ W
        u = self.inverse_sqrt @ W
        per = []
        for row in self.rows:
            piece = np.where(row, dW, 0.0)
            per.append(float(u @ piece - 0.5 * piece @ Cinv @ dW))
        total = float(u @ dW - 0.5 * dW @ Cinv @ dW)
        return total, per

    def change_of_variables_residual(self, W: np.ndarray) -> float:
        Cinv = np.linalg.inv(self.covariance)
        lw = self.loc @ W
        lhs = 0.5 * float(lw @ Cinv @ lw)
        rhs = 0.5 * float(W @ W) - self.quadratic_remainder(W)[0]
        return abs(lhs - rhs) / max(1.0, abs(lhs))

    def locality_defect(self, rng: np.random.Generator) -> float:
        """Largest change of ``loc W`` on □ when ``W`` changes outside □*."""
        worst = 0.0
        for row, star in zip(self.rows, self.stars):
            outside = ~np.isin(self.sites, star.sites(self.level))
            change = np.where(outside, rng.normal(size=len(self.sites)), 0.0)
            worst = max(worst, float(np.max(np.abs((self.loc @ change)[row]))))
        return worst


# ---------------------------------------------------------------- determinant constants


@dataclass
class DeterminantConstants:
    b: float
    b_prime: float
    b_double_prime: float
    c_next: float
    diagonal_spread: float


def determinant_constants(global_problem: FluctuationProblem, quad: LineQuadrature | None = None) -> DeterminantConstants:
    """``b_k``, ``b'_k``, ``b''_k = b_k - a_k² b'_k`` and ``c_{k+1} = b''_k - log 2π``.

    The minus sign in ``b''_k`` follows from ``log X = ∫ ((1+r)⁻¹ - (X+r)⁻¹) dr``;
    with it the determinant identity below holds exactly.

    ``global_problem`` must be the full-torus problem; ``b'_k`` is the diagonal of
    ``∫ A Q_k G_r Q_k^T A dr`` and ``diagonal_spread`` reports how far it is from constant.
    """
    quad = quad or LineQuadrature()
    p = global_problem
    g = p.geometry
    frac = float(g.L) ** (-g.d)
    b = (1 - frac) * math.log(p.a_k) + frac * math.log(p.a_k + p.top)

    def integrand(r: float) -> np.ndarray:
        A = p.A(r)
        return np.diag(A @ p.Qk @ p.green(r) @ p.Qk_adjoint @ A)

    diag = quad.apply(integrand)
    bp = float(np.mean(diag))
    bpp = b - p.a_k**2 * bp
    return DeterminantConstants(b, bp, bpp, bpp - math.log(2 * math.pi), float(np.ptp(diag)))


def boundary_trace_per_cube(
    problem: FluctuationProblem, global_problem: FluctuationProblem, quad: LineQuadrature | None = None
) -> list[float]:
    """``½ a_k² ∫ Σ_{y∈□} (A (D_Ω' - D) A)(y, y) dr`` per ``LM`` cube of Omega_{k+1}."""
    quad = quad or LineQuadrature()
    p, q = problem, global_problem
    pos = {int(s): i for i, s in enumerate(q.sites)}
    idx = np.array([pos[int(s)] for s in p.sites])

    def integrand(r: float) -> np.ndarray:
        A = p.A(r)
        D_loc = p.Qk @ p.green(r) @ p.Qk_adjoint
        D_glob = (q.Qk @ q.green(r) @ q.Qk_adjoint)[np.ix_(idx, idx)]
        return np.diag(A @ (D_loc - D_glob) @ A)

    diag = quad.apply(integrand)
    rows = [np.isin(p.sites, c.sites(p.k)) for c in p.lm_cubes()]
    return [float(0.5 * p.a_k**2 * diag[row].sum()) for row in rows]


def determinant_identity_residual(
    problem: FluctuationProblem, global_problem: FluctuationProblem, quad: LineQuadrature | None = None
) -> tuple[float, float, float]:
    """``log det C^{1/2}_{Ω'} - log det C_k^{1/2}`` against ``½ b''_k |Ω^c_{k+1}| + R^(6)``.

    Returns (dense value, assembled value, relative residual).
    """
    _, l_loc = np.linalg.slogdet(problem.covariance)
    _, l_glob = np.linalg.slogdet(global_problem.covariance)
    dense = 0.5 * (l_loc - l_glob)
    consts = determinant_constants(global_problem, quad)
    n_out = len(global_problem.sites) - len(problem.sites)
    assembled = 0.5 * consts.b_double_prime * n_out + sum(boundary_trace_per_cube(problem, global_problem, quad))
    return dense, assembled, abs(dense - assembled) / max(1.0, abs(dense))


def trace_log_consistency(C: np.ndarray) -> float:
    """Relative gap between ``log det C`` and ``tr log C``."""
    sign, logdet = np.linalg.slogdet(C)
    tr = float(np.trace(sla.logm(C)).real)
    return abs(logdet - tr) / max(1.0, abs(logdet))
