"""Green's functions, minimizers, random-walk expansions and decay profiles.

Everything here is dense linear algebra on site lists of one grid.  Fields on
the finest lattice are full-grid value vectors; multiscale fields are flat
vectors in the order of :class:`MultiscaleLayout`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .blockavg import MultiscaleLayout, block_extend, block_index, block_mean, tilde_completion
from .geometry import Field, LatticeGeometry, Region, RegionSequence, build_buffer, scaled_distance_matrix
from .linalg import DenseOperator
from .quadforms import (
    ActionParams,
    action_S,
    action_S_star,
    boundary_term,
    fluct_kernel,
    half_bond_norm_sq,
    laplacian_matrix,
    minus_laplacian_full,
    multiscale_residual_sq,
    stiffness_vector,
)

HOLDER_ALPHA = 0.75


# ---------------------------------------------------------------- dense Green's functions


def q_adjoint_values(layout: MultiscaleLayout, Q: np.ndarray) -> np.ndarray:
    """Value-to-value transpose of a multiscale averaging matrix."""
    return (Q * layout.weights[:, None]).T / layout.geometry.site_weight


def green_generator(
    layout: MultiscaleLayout,
    params: ActionParams,
    sites: np.ndarray | None = None,
    extra: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """``[-Δ + mu + Q^T a Q]`` with Dirichlet conditions on ``sites`` (default Omega_1).

    ``extra`` is added as is (value-to-value, indexed like ``sites``).
    """
    g = layout.geometry
    sites = layout.seq.omega(1).sites(0) if sites is None else np.asarray(sites, dtype=int)
    Q = layout.Q_matrix(sites)
    a = stiffness_vector(layout, params)
    H = laplacian_matrix(g, sites) + params.mu_bar * np.eye(len(sites))
    H = H + q_adjoint_values(layout, Q) @ (a[:, None] * Q)
    if extra is not None:
        H = H + extra
    return H, sites


def dense_green(layout: MultiscaleLayout, params: ActionParams, extra: np.ndarray | None = None) -> DenseOperator:
    """``G = [-Δ + mu + Q^T a Q]^{-1}_{Omega_1}``."""
    H, sites = green_generator(layout, params, extra=extra)
    w = np.full(len(sites), layout.geometry.site_weight)
    try:
        inv = np.linalg.inv(H)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Green's function generator is singular") from exc
    return DenseOperator(inv, sites, sites, w, w)


def exterior_source(geometry: LatticeGeometry, sites: np.ndarray, phi_full: np.ndarray) -> np.ndarray:
    """``[Δ]_{S, S^c} φ`` on ``S = sites``."""
    inside = np.zeros(geometry.n_sites, dtype=bool)
    inside[sites] = True
    ext = np.nonzero(~inside)[0]
    if len(ext) == 0:
        return np.zeros(len(sites))
    cross = laplacian_matrix(geometry, sites, "cross", cross=ext)
    return -cross @ phi_full[ext]


def phi_k_omega(
    layout: MultiscaleLayout,
    params: ActionParams,
    Phi: np.ndarray,
    phi_ext: np.ndarray,
    green: DenseOperator | None = None,
) -> np.ndarray:
    """Minimizer ``G (Q^T a Φ + [Δ]_{Ω1,Ω1^c} φ_ext)`` glued to ``φ_ext`` outside Omega_1."""
    g = layout.geometry
    green = dense_green(layout, params) if green is None else green
    sites = green.dom
    Q = layout.Q_matrix(sites)
    a = stiffness_vector(layout, params)
    src = q_adjoint_values(layout, Q) @ (a * Phi) + exterior_source(g, sites, phi_ext)
    out = np.array(phi_ext, dtype=float, copy=True)
    out[sites] = green.matrix @ src
    return out


def minimizer_sup_constant(
    layout: MultiscaleLayout, params: ActionParams, rng: np.random.Generator, samples: int = 20
) -> float:
    """Measured ``max |φ_{k,Ω}| / (|φ_ext|_∞ + |Φ|_∞)`` over random inputs."""
    green = dense_green(layout, params)
    n = layout.geometry.n_sites
    best = 0.0
    for _ in range(samples):
        Phi = rng.uniform(-1, 1, layout.size)
        ext = rng.uniform(-1, 1, n)
        phi = phi_k_omega(layout, params, Phi, ext, green)
        scale = np.max(np.abs(ext)) + (np.max(np.abs(Phi)) if layout.size else 0.0)
        best = max(best, float(np.max(np.abs(phi)) / scale))
    return best


# ---------------------------------------------------------------- one-step minimizers


def _coarse_step(geometry: LatticeGeometry, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Sites of stride ``stride`` and their parent index on stride ``stride + 1``."""
    fine = geometry.stride_indices(stride)
    parent = block_index(geometry, fine, stride + 1)
    return fine, parent


@dataclass(frozen=True)
class StepGeometry:
    """``𝛀`` at level ``k`` together with the next region ``Omega_{k+1}``."""

    seq: RegionSequence
    omega_next: Region

    def __post_init__(self) -> None:
        if not self.omega_next.issubset(self.seq.omega(self.seq.depth)):
            raise ValueError("Omega_{k+1} must lie in Omega_k")

    @property
    def k(self) -> int:
        return self.seq.depth

    @property
    def geometry(self) -> LatticeGeometry:
        return self.seq.geometry

    @cached_property
    def plus(self) -> RegionSequence:
        return self.seq.extend(self.omega_next)

    @cached_property
    def layout(self) -> MultiscaleLayout:
        return MultiscaleLayout(self.seq)

    @cached_property
    def layout_plus(self) -> MultiscaleLayout:
        return MultiscaleLayout(self.plus)

    @cached_property
    def inner_sites(self) -> np.ndarray:
        """Stride-``k`` sites of Omega_{k+1}."""
        return self.omega_next.sites(self.k)

    @cached_property
    def inner_slots(self) -> np.ndarray:
        """Positions of Omega_{k+1}^{(k)} inside the top component of the ``𝛀`` layout."""
        top = self.layout.component_sites[-1]
        pos = {int(s): i for i, s in enumerate(top)}
        base = int(self.layout.offsets[self.k - 1])
        return np.array([base + pos[int(s)] for s in self.inner_sites], dtype=int)

    @cached_property
    def next_sites(self) -> np.ndarray:
        """Stride-``k+1`` sites of Omega_{k+1}."""
        return self.omega_next.sites(self.k + 1)

    def Q_inner(self) -> np.ndarray:
        """Single-step average from Omega_{k+1}^{(k)} to Omega_{k+1}^{(k+1)}."""
        g = self.geometry
        L, d = g.L, g.d
        rb = block_index(g, self.next_sites, self.k + 1)
        cb = block_index(g, self.inner_sites, self.k + 1)
        return (rb[:, None] == cb[None, :]) * float(L) ** (-d)

    def Q_k_inner(self) -> np.ndarray:
        """``Q_k`` from all finest sites to Omega_{k+1}^{(k)}."""
        g = self.geometry
        from .blockavg import averaging_matrix

        return averaging_matrix(g, self.inner_sites, self.k, np.arange(g.n_sites), 0)

    def Q_next(self) -> np.ndarray:
        g = self.geometry
        from .blockavg import averaging_matrix

        return averaging_matrix(g, self.next_sites, self.k + 1, np.arange(g.n_sites), 0)

    def plus_vector(self, Phi: np.ndarray, Phi_next: np.ndarray) -> np.ndarray:
        """``Φ^+ = (Φ_1, ..., Φ_{k,δΩ_k}, Φ_{k+1})`` from ``Φ_{k,Ω}`` and the new field."""
        lay, lp = self.layout, self.layout_plus
        out = np.zeros(lp.size)
        for j in range(1, self.k):
            out[lp.slot(j)] = Phi[lay.slot(j)]
        top = lay.component_sites[-1]
        keep = np.isin(top, lp.component_sites[self.k - 1])
        out[lp.slot(self.k)] = Phi[lay.slot(self.k)][keep]
        out[lp.slot(self.k + 1)] = Phi_next
        return out

    def replace_inner(self, Phi: np.ndarray, values: np.ndarray) -> np.ndarray:
        out = np.array(Phi, dtype=float, copy=True)
        out[self.inner_slots] = values
        return out


def psi_k(step: StepGeometry, params: ActionParams, phi: np.ndarray, Phi_next: np.ndarray) -> np.ndarray:
    """``Q_k φ - c Q^T Q_{k+1} φ + c Q^T Φ_{k+1}`` on Omega_{k+1}^{(k)}, ``c = aL⁻²/(a_k + aL⁻²)``."""
    g = step.geometry
    L, d = g.L, g.d
    ak = params.a_j(step.k)
    c = (params.a / L**2) / (ak + params.a / L**2)
    Qt = step.Q_inner().T * float(L) ** d
    return step.Q_k_inner() @ phi - c * Qt @ (step.Q_next() @ phi) + c * Qt @ Phi_next


def psi_variational_residual(
    step: StepGeometry, params: ActionParams, phi: np.ndarray, Phi_next: np.ndarray, psi: np.ndarray
) -> float:
    """Residual of ``(a_k + aL⁻² Q^T Q) Ψ = a_k Q_k φ + aL⁻² Q^T Φ_{k+1}``."""
    g = step.geometry
    L, d = g.L, g.d
    ak = params.a_j(step.k)
    Q = step.Q_inner()
    Qt = Q.T * float(L) ** d
    lhs = ak * psi + (params.a / L**2) * Qt @ (Q @ psi)
    rhs = ak * step.Q_k_inner() @ phi + (params.a / L**2) * Qt @ Phi_next
    return float(np.max(np.abs(lhs - rhs))) if len(lhs) else 0.0


@dataclass
class MinimizerBundle:
    """Minimizers of one averaging step and the inputs that produced them."""

    step: StepGeometry
    Phi: np.ndarray
    Phi_next: np.ndarray
    phi_ext: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    phi0: np.ndarray
    psi_plus: np.ndarray
    Psi_hat: np.ndarray
    residuals: dict[str, float] = field(default_factory=dict)


def minimizer_bundle(
    step: StepGeometry,
    params: ActionParams,
    Phi: np.ndarray,
    Phi_next: np.ndarray,
    phi_ext: np.ndarray,
) -> MinimizerBundle:
    """``φ_{k,Ω}``, ``Ψ_k``, ``φ⁰_{k+1,Ω+}``, ``Ψ_{k,Ω_{k+1}}(Ω+)`` and their variational residuals."""
    lay, lp = step.layout, step.layout_plus
    g_k = dense_green(lay, params)
    phi = phi_k_omega(lay, params, Phi, phi_ext, g_k)
    psi = psi_k(step, params, phi, Phi_next)
    plus = step.plus_vector(Phi, Phi_next)
    phi0 = phi_k_omega(lp, params, plus, phi_ext)
    psi_plus = psi_k(step, params, phi0, Phi_next)
    hat = step.replace_inner(Phi, psi_plus)
    res = {
        "psi_variational": psi_variational_residual(step, params, phi, Phi_next, psi),
        "psi_plus_variational": psi_variational_residual(step, params, phi0, Phi_next, psi_plus),
        "phi_variational": _phi_residual(lay, params, Phi, phi_ext, phi),
        "phi0_variational": _phi_residual(lp, params, plus, phi_ext, phi0),
    }
    return MinimizerBundle(step, Phi, Phi_next, phi_ext, phi, psi, phi0, psi_plus, hat, res)


def _phi_residual(layout: MultiscaleLayout, params: ActionParams, Phi: np.ndarray, ext: np.ndarray, phi: np.ndarray) -> float:
    H, sites = green_generator(layout, params)
    Q = layout.Q_matrix(sites)
    a = stiffness_vector(layout, params)
    src = q_adjoint_values(layout, Q) @ (a * Phi) + exterior_source(layout.geometry, sites, ext)
    r = H @ phi[sites] - src
    return float(np.max(np.abs(r)) / max(1.0, np.max(np.abs(src))))


# ---------------------------------------------------------------- expansion identities


def _rel(lhs: float, rhs: float) -> float:
    return abs(lhs - rhs) / max(1.0, abs(lhs))


def step_energy_J(
    step: StepGeometry, params: ActionParams, Phi_next: np.ndarray, Phi: np.ndarray, phi: np.ndarray
) -> float:
    """``(a/2L²)‖Φ_{k+1} - QΦ_k‖²_{Ω_{k+1}} + ½‖a^{1/2}(Φ - Qφ)‖² + ½<φ, (-Δ+mu) φ>`` (whole torus)."""
    g = step.geometry
    L, d = g.L, g.d
    inner = Phi[step.inner_slots]
    diff = Phi_next - step.Q_inner() @ inner
    top = 0.5 * (params.a / L**2) * g.stride_weight(step.k + 1) * float(diff @ diff)
    lay = step.layout
    res = 0.5 * multiscale_residual_sq(lay, params, Phi, phi)
    quad = 0.5 * g.site_weight * float(phi @ (minus_laplacian_full(g, phi) + params.mu_bar * phi))
    return top + res + quad


def step_energy_J_star(
    step: StepGeometry,
    params: ActionParams,
    lam_mask: np.ndarray,
    Phi_next: np.ndarray,
    Phi: np.ndarray,
    phi: np.ndarray,
) -> float:
    """``(a/2L²)‖Φ_{k+1} - QΦ_k‖²_{Ω_{k+1}} + S*_k(Λ, Φ, φ)``."""
    g = step.geometry
    L = g.L
    diff = Phi_next - step.Q_inner() @ Phi[step.inner_slots]
    top = 0.5 * (params.a / L**2) * g.stride_weight(step.k + 1) * float(diff @ diff)
    return top + action_S_star(step.layout, params, lam_mask, Phi, phi)


def joint_minimum_J(
    step: StepGeometry, params: ActionParams, Phi: np.ndarray, Phi_next: np.ndarray, phi_ext: np.ndarray
) -> float:
    """Minimum of ``J`` over ``(φ_{Ω1}, Φ_{k,Ω_{k+1}})`` by one joint dense solve."""
    g = step.geometry
    lay = step.layout
    sites = lay.seq.omega(1).sites(0)
    n1, ni = len(sites), len(step.inner_slots)
    base_phi = np.array(phi_ext, dtype=float, copy=True)
    base_phi[sites] = 0.0
    base_Phi = step.replace_inner(Phi, np.zeros(ni))

    def energy(v: np.ndarray) -> float:
        phi = base_phi.copy()
        phi[sites] = v[:n1]
        return step_energy_J(step, params, Phi_next, step.replace_inner(base_Phi, v[n1:]), phi)

    # the energy is quadratic: recover gradient and Hessian from exact polarisation
    dim = n1 + ni
    e0 = energy(np.zeros(dim))
    basis = np.eye(dim)
    diag_vals = np.array([energy(basis[i]) for i in range(dim)])
    minus_vals = np.array([energy(-basis[i]) for i in range(dim)])
    grad = 0.5 * (diag_vals - minus_vals)
    hdiag = diag_vals + minus_vals - 2 * e0
    hess = np.diag(hdiag)
    for i in range(dim):
        for j in range(i + 1, dim):
            eij = energy(basis[i] + basis[j])
            hess[i, j] = hess[j, i] = eij - diag_vals[i] - diag_vals[j] + e0
    x = np.linalg.solve(hess, -grad)
    return float(e0 + grad @ x + 0.5 * x @ hess @ x)


def _quadratic_Z_form(step: StepGeometry, params: ActionParams, Z: np.ndarray) -> float:
    """``½<Z, [Δ_{k,Ω} + aL⁻² Q^T Q]_{Ω_{k+1}} Z>``."""
    g = step.geometry
    lay = step.layout
    delta = fluct_kernel(lay, params, dense_green(lay, params)).matrix
    sl = step.inner_slots
    Q = step.Q_inner()
    Qt = Q.T * float(g.L) ** g.d
    op = delta[np.ix_(sl, sl)] + (params.a / g.L**2) * Qt @ Q
    return 0.5 * g.stride_weight(step.k) * float(Z @ op @ Z)


def free_fluctuation_field(step: StepGeometry, params: ActionParams, Z: np.ndarray) -> np.ndarray:
    """``a_k G Q_k^T Z`` as a full-grid vector (zero outside Omega_1)."""
    lay = step.layout
    padded = step.replace_inner(np.zeros(lay.size), Z)
    return phi_k_omega(lay, params, padded, np.zeros(step.geometry.n_sites))


def verify_expansion_identities(
    step: StepGeometry,
    params: ActionParams,
    lam: Region,
    Phi: np.ndarray,
    Phi_next: np.ndarray,
    phi_ext: np.ndarray,
    Z: np.ndarray,
    free_fluctuation: np.ndarray | None = None,
) -> dict[str, float]:
    """Relative residuals of the exact minimizer and expansion identities.

    ``lam`` must satisfy ``Omega_k ⊃ Λ ⊃ Omega_{k+1}`` and keep away from the
    complement of Omega_1.  ``free_fluctuation`` is the free fluctuation in the starred
    expansion (default: ``a_k G Q_k^T Z``).
    """
    g = step.geometry
    lay, lp = step.layout, step.layout_plus
    k = step.k
    if not (step.omega_next.issubset(lam) and lam.issubset(step.seq.omega(k))):
        raise ValueError("need Omega_{k+1} ⊂ Λ ⊂ Omega_k")
    lam_mask = lam.site_mask(0)
    om1 = step.seq.omega(1)
    if lam.distance_to(om1.complement()) < 2 and not om1.is_full():
        raise ValueError("Λ must stay away from the complement of Omega_1")
    out: dict[str, float] = {}
    b = minimizer_bundle(step, params, Phi, Phi_next, phi_ext)

    # φ⁰ is the level-k minimizer fed with Ψ on Omega_{k+1}
    minimizer_from_psi = phi_k_omega(lay, params, b.Psi_hat, phi_ext)
    out["minimizer_from_psi"] = float(np.max(np.abs(minimizer_from_psi - b.phi0)) / max(1.0, np.max(np.abs(b.phi0))))

    # value of the one-block problem at its minimum
    L, d = g.L, g.d
    Qi = step.Q_inner()
    w_next, w_k = g.stride_weight(k + 1), g.stride_weight(k)
    qk = step.Q_k_inner() @ b.phi
    lhs = 0.5 * (params.a / L**2) * w_next * float(np.sum((Phi_next - Qi @ b.psi) ** 2))
    lhs += 0.5 * params.a_j(k) * w_k * float(np.sum((b.psi - qk) ** 2))
    rhs = 0.5 * params.a_j(k + 1) / L**2 * w_next * float(np.sum((Phi_next - step.Q_next() @ b.phi) ** 2))
    out["one_block_minimum"] = _rel(lhs, rhs)

    # minimum of J: independent joint minimisation against the closed form
    sites = om1.sites(0)
    ext_mask = np.ones(g.n_sites, dtype=bool)
    ext_mask[sites] = False
    ext = np.nonzero(ext_mask)[0]
    ext_part = 0.0
    cross_part = 0.0
    if len(ext):
        lap_ext = laplacian_matrix(g, ext) + params.mu_bar * np.eye(len(ext))
        ext_part = 0.5 * g.site_weight * float(phi_ext[ext] @ lap_ext @ phi_ext[ext])
        cross = laplacian_matrix(g, ext, "cross", cross=sites)
        cross_part = g.site_weight * float(phi_ext[ext] @ cross @ b.phi0[sites])
    closed = ext_part + cross_part + action_S(lp, params, step.plus_vector(Phi, Phi_next), b.phi0)
    joint = joint_minimum_J(step, params, Phi, Phi_next, phi_ext)
    out["joint_minimum"] = _rel(joint, closed)
    at_min = step_energy_J(step, params, Phi_next, b.Psi_hat, b.phi0)
    out["joint_minimum_at_minimizer"] = _rel(at_min, closed)

    # quadratic expansion around the minimizer
    cz = free_fluctuation_field(step, params, Z)
    shifted = step.replace_inner(b.Psi_hat, b.psi_plus + Z)
    lhs = step_energy_J(step, params, Phi_next, shifted, b.phi0 + cz)
    rhs = closed + _quadratic_Z_form(step, params, Z)
    out["expand"] = _rel(lhs, rhs)

    # starred action: expansion with the boundary term for arbitrary fluctuations
    free = cz if free_fluctuation is None else free_fluctuation
    Zfull = step.replace_inner(np.zeros(lay.size), Z)
    s_lhs = action_S_star(lay, params, lam_mask, Phi + Zfull, b.phi + free)
    s_rhs = (
        action_S_star(lay, params, lam_mask, Phi, b.phi)
        + action_S_star(lay, params, lam_mask, Zfull, free)
        + params.a_j(k) * w_k * float(Z @ (Phi[step.inner_slots] - step.Q_k_inner() @ b.phi))
        + boundary_term(g, b.phi, free, lam_mask)
    )
    out["s_star"] = _rel(s_lhs, s_rhs)

    # starred step energy at the shifted minimizer
    j_lhs = step_energy_J_star(step, params, lam_mask, Phi_next, shifted, b.phi0 + cz)
    out["j_star"] = _rel(j_lhs, j_star_decomposition(step, params, lam, Phi, Phi_next, b, Z, cz))
    return out


def remainder_R(step: StepGeometry, params: ActionParams, lam: Region, cz: np.ndarray) -> float:
    """``-½‖a^{1/2} Q 𝒵‖²_{Λ^c} - ½‖∂𝒵‖²_{*,Λ^c} - ½ mu ‖𝒵‖²_{Λ^c}``."""
    g = step.geometry
    lay = step.layout
    out_mask = ~lam.site_mask(0)
    comp_out = out_mask.ravel()[lay.sites]
    res = multiscale_residual_sq(lay, params, np.zeros(lay.size), cz, comp_out)
    grad = half_bond_norm_sq(g, cz, out_mask)
    mass = params.mu_bar * g.site_weight * float(np.sum(cz[out_mask.ravel()] ** 2))
    return -0.5 * (res + grad + mass)


def j_star_decomposition(
    step: StepGeometry,
    params: ActionParams,
    lam: Region,
    Phi: np.ndarray,
    Phi_next: np.ndarray,
    bundle: MinimizerBundle,
    Z: np.ndarray,
    cz: np.ndarray,
) -> float:
    """``S*0_{k+1}(Λ, Φ+, φ⁰) + ½<Z,[Δ + aL⁻²Q^TQ]Z> + R + b_Λ(φ⁰, 𝒵)``."""
    g = step.geometry
    lam_mask = lam.site_mask(0)
    plus = step.plus_vector(Phi, Phi_next)
    s0 = action_S_star(step.layout_plus, params, lam_mask, plus, bundle.phi0)
    return (
        s0
        + _quadratic_Z_form(step, params, Z)
        + remainder_R(step, params, lam, cz)
        + boundary_term(g, bundle.phi0, cz, lam_mask)
    )


# ---------------------------------------------------------------- local Green's functions


def local_green(
    geometry: LatticeGeometry,
    tilde_sites: np.ndarray,
    omega1_sites: np.ndarray,
    potential: np.ndarray,
) -> np.ndarray:
    """Inverse on ``S = tilde_sites`` with Neumann faces inside Omega_1 and Dirichlet faces outside.

    ``potential`` is the non-Laplacian part of the generator restricted to ``S``.
    """
    lap = laplacian_matrix(geometry, tilde_sites, "mixed", outer=omega1_sites)
    return np.linalg.inv(lap + potential)


@dataclass(frozen=True)
class CoverCube:
    level: int
    scale: int
    cell: tuple[int, ...]
    sites: np.ndarray  # positions in the Omega_1 index
    tilde: np.ndarray  # positions in the Omega_1 index


def _axis_outside(coords: np.ndarray, start: np.ndarray, side: int, n: int) -> np.ndarray:
    """Per-axis distance (grid steps) from coordinates to the cube ``[start, start+side)``."""
    t = (coords - start) % n
    beyond = t - side + 1
    before = n - t
    out = np.minimum(beyond, before)
    return np.where(t < side, 0, out)


def cover_cubes(seq: RegionSequence) -> list[CoverCube]:
    """Multiscale cubes of ``δΩ_j`` with their one-layer enlargements inside Omega_1."""
    g = seq.geometry
    om1 = seq.omega(1).sites(0)
    pos = np.full(g.n_sites, -1)
    pos[om1] = np.arange(len(om1))
    cubes = []
    for j in range(1, seq.depth + 1):
        inc = seq.increment(j)
        for cube in inc.cube_regions():
            (cell,) = tuple(cube.cells)
            tilde = cube.enlarge(1).sites(0)
            tpos = pos[tilde]
            cubes.append(
                CoverCube(j, cube.scale, cell, pos[cube.sites(0)], np.sort(tpos[tpos >= 0]))
            )
    return cubes


def bump_functions(seq: RegionSequence, cubes: list[CoverCube]) -> np.ndarray:
    """Rows ``h_z`` on Omega_1 with ``Σ h_z² = 1``: tensor raised-cosine bumps."""
    g = seq.geometry
    om1 = seq.omega(1).sites(0)
    coords = g.coords(om1)
    raw = np.zeros((len(cubes), len(om1)))
    for z, cube in enumerate(cubes):
        side = g.L**cube.scale
        start = np.array(cube.cell) * side
        u = _axis_outside(coords, start, side, g.n)
        vals = np.prod(np.where(u < side, np.cos(0.5 * np.pi * u / side) ** 2, 0.0), axis=1)
        raw[z] = vals
    norm = np.sqrt((raw**2).sum(axis=0))
    return raw / norm[None, :]


class RandomWalkExpansion:
    """Parametrix ``G* = Σ h_z G_z h_z`` and remainder ``R = I - H G*`` for a generator ``H`` on Omega_1.

    Weakening follows walk steps: step ``z`` carries the product of ``s_□``
    over the cover cubes met by its enlarged cube.  The first factor of a walk
    is never weakened.
    """

    def __init__(self, seq: RegionSequence, H: np.ndarray):
        self.seq = seq
        self.geometry = seq.geometry
        self.sites = seq.omega(1).sites(0)
        self.H = np.asarray(H, dtype=float)
        n1 = len(self.sites)
        if self.H.shape != (n1, n1):
            raise ValueError("generator does not match Omega_1")
        self.cubes = cover_cubes(seq)
        self.h = bump_functions(seq, self.cubes)
        lap_d = laplacian_matrix(self.geometry, self.sites)
        self.potential = self.H - lap_d
        owner = np.full(n1, -1)
        for z, cube in enumerate(self.cubes):
            owner[cube.sites] = z
        self.owner = owner
        self.touched = [frozenset(int(x) for x in np.unique(owner[c.tilde])) for c in self.cubes]
        self._build()

    @classmethod
    def from_params(
        cls, layout: MultiscaleLayout, params: ActionParams, extra: np.ndarray | None = None
    ) -> "RandomWalkExpansion":
        H, _ = green_generator(layout, params, extra=extra)
        return cls(layout.seq, H)

    def _build(self) -> None:
        n1 = len(self.sites)
        self.parametrix = np.zeros((n1, n1))
        self.R_cols: list[np.ndarray] = []
        for z, cube in enumerate(self.cubes):
            S = cube.tilde
            Gz = local_green(self.geometry, self.sites[S], self.sites, self.potential[np.ix_(S, S)])
            hs = self.h[z, S]
            block = hs[:, None] * Gz * hs[None, :]
            self.parametrix[np.ix_(S, S)] += block
            col = -self.H[:, S] @ block
            col[S, np.arange(len(S))] += hs**2
            self.R_cols.append(col)

    @property
    def n_cubes(self) -> int:
        return len(self.cubes)

    def allowed_steps(self, active: np.ndarray) -> np.ndarray:
        """Steps whose touched cubes all have ``s = 1`` (``active`` is a cube mask)."""
        return np.array([all(active[c] for c in t) for t in self.touched], dtype=bool)

    def remainder(self, steps: np.ndarray | None = None) -> np.ndarray:
        n1 = len(self.sites)
        R = np.zeros((n1, n1))
        for z, cube in enumerate(self.cubes):
            if steps is None or steps[z]:
                R[:, cube.tilde] += self.R_cols[z]
        return R

    def restricted(self, active: np.ndarray) -> np.ndarray:
        """``G(s)`` for a 0/1 weakening vector: ``G* (I - R_B)^{-1}``."""
        R = self.remainder(self.allowed_steps(np.asarray(active, dtype=bool)))
        n1 = len(self.sites)
        return np.linalg.solve((np.eye(n1) - R).T, self.parametrix.T).T

    def full(self) -> np.ndarray:
        return self.restricted(np.ones(self.n_cubes, dtype=bool))

    def weakened(self, s: np.ndarray, max_free: int = 12) -> np.ndarray:
        """``G(s)`` for complex weights; exact multi-affine interpolation over cubes with ``s != 1``."""
        s = np.asarray(s, dtype=complex)
        free = np.nonzero(np.abs(s - 1) > 0)[0]
        if len(free) > max_free:
            raise ValueError("too many weakened cubes for exact interpolation")
        base = np.ones(self.n_cubes, dtype=bool)
        n1 = len(self.sites)
        out = np.zeros((n1, n1), dtype=complex)
        for mask in range(1 << len(free)):
            active = base.copy()
            coef = 1.0 + 0j
            for b, z in enumerate(free):
                on = bool(mask >> b & 1)
                active[z] = on
                coef *= s[z] if on else (1 - s[z])
            if coef != 0:
                out += coef * self.restricted(active)
        return out

    def cubes_inside(self, region: Region) -> np.ndarray:
        """Cover cubes contained in ``region``."""
        inside = region.site_mask(0).ravel()[self.sites]
        return np.array([bool(np.all(inside[c.sites])) for c in self.cubes], dtype=bool)

    def localized(self, region: Region) -> np.ndarray:
        """``G(s_□ = 1 inside region, 0 outside)``."""
        return self.restricted(self.cubes_inside(region))

    def partial_sums(self, order: int, steps: np.ndarray | None = None, tol: float = 1e-12) -> "WalkDiagnostics":
        R = self.remainder(steps)
        term = self.parametrix.copy()
        total = term.copy()
        norms = [float(np.linalg.norm(term, 2))]
        sums = [total.copy()]
        for _ in range(order):
            term = term @ R
            total = total + term
            norms.append(float(np.linalg.norm(term, 2)))
            sums.append(total.copy())
            if norms[-1] < tol * norms[0]:
                break
        return WalkDiagnostics(norms, sums, float(np.linalg.norm(R, 2)), float(np.max(np.abs(np.linalg.eigvals(R)))))


@dataclass
class WalkDiagnostics:
    term_norms: list[float]
    partial: list[np.ndarray]
    remainder_norm: float
    spectral_radius: float

    @property
    def ratios(self) -> list[float]:
        return [b / a for a, b in zip(self.term_norms, self.term_norms[1:]) if a > 0]

    def errors(self, exact: np.ndarray) -> list[float]:
        ref = float(np.linalg.norm(exact, 2))
        return [float(np.linalg.norm(p - exact, 2)) / ref for p in self.partial]


# ---------------------------------------------------------------- s-derivatives


@dataclass
class SDerivative:
    contour: np.ndarray
    finite_difference: np.ndarray
    exact: np.ndarray
    cauchy_bound: float
    derivative_norm: float

    @property
    def agreement(self) -> float:
        scale = max(1e-300, float(np.max(np.abs(self.exact))))
        return float(np.max(np.abs(self.contour - self.finite_difference)) / scale) if self.exact.size else 0.0

    @property
    def bound_ratio(self) -> float:
        return self.derivative_norm / self.cauchy_bound if self.cauchy_bound > 0 else 0.0


def s_interpolation_derivative(
    walk: RandomWalkExpansion, cube: int, kappa: float, nodes: int = 32, h: float = 1e-6
) -> SDerivative:
    """``∂G/∂s_□`` at ``s = 0`` (others 1) by contour quadrature on ``|s| = e^κ``."""
    on = np.ones(walk.n_cubes, dtype=bool)
    off = on.copy()
    off[cube] = False
    g_on, g_off = walk.restricted(on), walk.restricted(off)

    def G(s: complex) -> np.ndarray:
        return s * g_on + (1 - s) * g_off

    radius = math.exp(kappa)
    theta = 2 * np.pi * np.arange(nodes) / nodes
    acc = np.zeros_like(g_on, dtype=complex)
    sup = 0.0
    for t in theta:
        s = radius * np.exp(1j * t)
        val = G(s)
        acc += val / s
        sup = max(sup, float(np.linalg.norm(val, 2)))
    contour = (acc / nodes).real
    fd = ((G(h) - G(-h)) / (2 * h)).real
    exact = g_on - g_off
    return SDerivative(contour, fd, exact, sup / radius, float(np.linalg.norm(exact, 2)))


# ---------------------------------------------------------------- decay profiles


@dataclass
class DecayProfile:
    rows: list[tuple[int, int, int, int, float, float, str]]
    fits: dict[str, tuple[float, float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "j_prime", "y", "y_prime", "d_Omega", "value", "kind"])
        for j, jp, y, yp, dist, val, kind in self.rows:
            w.writerow([j, jp, y, yp, f"{dist:.12g}", f"{val:.12g}", kind])
        return buf.getvalue()

    def gamma_hat(self, kind: str = "G") -> float:
        return self.fits[kind][0]


def _fit_rate(dist: np.ndarray, vals: np.ndarray, floor: float = 1e-14) -> tuple[float, float]:
    ok = vals > floor
    x, y = dist[ok], np.log(vals[ok])
    if len(x) < 3 or np.ptp(x) == 0:
        return float("nan"), float("nan")
    A = np.vstack([np.ones_like(x), x]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(-coef[1]), r2


def decay_profile(
    green: np.ndarray,
    seq: RegionSequence,
    *,
    derivatives: bool = True,
    alpha: float = HOLDER_ALPHA,
    max_pairs_per_block: int | None = None,
) -> DecayProfile:
    """Block-to-block sizes of ``G`` on Omega_1 for indicator sources.

    Rows are normalised in the fit by the scale factors of the bounds:
    ``L^{2(k-j')}`` for all kinds, times ``L^{-(k-j)}`` for ``dG`` and
    ``L^{-(1+alpha)(k-j)}`` for ``holder``.
    """
    g = seq.geometry
    k = g.k
    L = g.L
    lay = MultiscaleLayout(seq)
    om1 = seq.omega(1).sites(0)
    n1 = len(om1)
    pos = np.full(g.n_sites, -1)
    pos[om1] = np.arange(n1)
    ms = lay.sites
    levels = lay.levels
    blocks = [pos[_block_sites(g, int(y), int(j))] for y, j in zip(ms, levels)]
    ind = np.zeros((n1, len(ms)))
    for c, blk in enumerate(blocks):
        ind[blk, c] = 1.0
    U = green @ ind
    dist = scaled_distance_matrix(seq, ms)[:, ms]
    rows = []
    vals_g = np.zeros((len(ms), len(ms)))
    for r, blk in enumerate(blocks):
        vals_g[r] = np.max(np.abs(U[blk]), axis=0)
    if derivatives:
        full = np.zeros((g.n_sites, len(ms)))
        full[om1] = U
        from .quadforms import neighbor_table

        nb = neighbor_table(g)
        grads = [(full[nb[:, 2 * mu]] - full) / g.spacing for mu in range(g.d)]
        vals_d = np.zeros_like(vals_g)
        vals_h = np.zeros_like(vals_g)
        for r, blk in enumerate(blocks):
            sites = om1[blk]
            vals_d[r] = max(np.max(np.abs(gr[sites]), axis=0) for gr in grads)
            coords = g.coords(sites)
            best = np.zeros(len(ms))
            npairs = 0
            for p in range(len(sites)):
                for q in range(p + 1, len(sites)):
                    sep = float(g.torus_sup_distance(coords[p], coords[q])) * g.spacing
                    for gr in grads:
                        best = np.maximum(best, np.abs(gr[sites[p]] - gr[sites[q]]) / sep**alpha)
                    npairs += 1
                    if max_pairs_per_block is not None and npairs >= max_pairs_per_block:
                        break
                if max_pairs_per_block is not None and npairs >= max_pairs_per_block:
                    break
            vals_h[r] = best
    fits: dict[str, tuple[float, float]] = {}
    kinds = [("G", vals_g)] + ([("dG", vals_d), ("holder", vals_h)] if derivatives else [])
    for kind, vals in kinds:
        norm_d, norm_v = [], []
        for r in range(len(ms)):
            for c in range(len(ms)):
                j, jp = int(levels[r]), int(levels[c])
                v = float(vals[r, c])
                rows.append((j, jp, int(ms[r]), int(ms[c]), float(dist[r, c]), v, kind))
                factor = float(L) ** (2 * (k - jp))
                if kind == "dG":
                    factor *= float(L) ** (-(k - j))
                elif kind == "holder":
                    factor *= float(L) ** (-(1 + alpha) * (k - j))
                norm_d.append(float(dist[r, c]))
                norm_v.append(v * factor)
        fits[kind] = _fit_rate(np.array(norm_d), np.array(norm_v))
    return DecayProfile(rows, fits)


def _block_sites(g: LatticeGeometry, corner: int, j: int) -> np.ndarray:
    side = g.L**j
    base = g.coords(corner)
    offs = np.indices((side,) * g.d).reshape(g.d, -1).T
    pts = (base[None, :] + offs) % g.n
    return np.ravel_multi_index(tuple(pts.T), g.shape)


# ---------------------------------------------------------------- localized fields


def assemble_top_field(
    seq: RegionSequence,
    variant: str,
    Phi_k: np.ndarray,
    Phi_prev: np.ndarray | None = None,
    Phi_next: np.ndarray | None = None,
    omega_next: Region | None = None,
) -> np.ndarray:
    """Stride-``k`` value array fed into the tilde completion; NaN where undefined.

    ``Phi_prev``, ``Phi_k`` and ``Phi_next`` are full arrays on strides
    ``k-1``, ``k`` and ``k+1``; only their values on the relevant regions are read.
    """
    g = seq.geometry
    k = seq.depth
    L = g.L
    if variant == "interior":
        return np.array(Phi_k, dtype=float, copy=True)
    out = np.full(g.stride_shape(k), np.nan)
    om_k = seq.omega(k).site_mask(k)
    if variant == "boundary":
        out[om_k] = Phi_k[om_k]
    elif variant == "primed":
        if Phi_next is None or omega_next is None:
            raise ValueError("primed variant needs the next field and region")
        inner = omega_next.site_mask(k)
        ring = om_k & ~inner
        out[ring] = Phi_k[ring]
        ext = block_extend(np.asarray(Phi_next, dtype=float), L)
        out[inner] = ext[inner]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    if k >= 2:
        if Phi_prev is None:
            raise ValueError("boundary variants need the previous field")
        shell = seq.increment(k - 1).site_mask(k)
        avg = block_mean(np.asarray(Phi_prev, dtype=float), L)
        out[shell] = avg[shell]
    return out


def localized_field(
    cube: Region,
    R: int,
    top: np.ndarray,
    params: ActionParams,
    depth: int | None = None,
) -> tuple[np.ndarray, RegionSequence]:
    """``φ_{k,Ω(□)}`` on the buffer of ``cube`` from a stride-``k`` field ``top``.

    Raises when the buffer (or its boundary layer) reads undefined values.
    """
    g = cube.geometry
    k = g.k if depth is None else depth
    seq, _ = build_buffer(cube, R, k)
    full = block_extend(np.asarray(top, dtype=float), g.L**k).ravel()
    reach = seq.omega(1).enlarge(1).site_mask(0).ravel()
    if np.any(np.isnan(full[reach])):
        raise ValueError("buffer reads fields outside their domain")
    full = np.nan_to_num(full)
    comp = tilde_completion(Field(g, k, full.reshape(g.shape)[tuple(slice(None, None, g.L**k) for _ in range(g.d))]), seq)
    lay = MultiscaleLayout(seq)
    Phi = comp.field.to_vector()
    return phi_k_omega(lay, params, Phi, full), seq


def well_inside(cube: Region, R: int, omega_k: Region) -> bool:
    return cube.enlarge(2 * R + 1).issubset(omega_k)


def localization_error(
    cube: Region,
    top: np.ndarray,
    params: ActionParams,
    depths: Sequence[int] = (1, 2, 3),
    reference_depth: int = 6,
) -> dict[int, float]:
    """``max_□ |φ_{Ω(□)} - φ_ref|`` for each buffer depth, against a deep-buffer reference."""
    ref, _ = localized_field(cube, reference_depth, top, params)
    sites = cube.sites(0)
    out = {}
    for r in depths:
        phi, _ = localized_field(cube, r, top, params)
        out[r] = float(np.max(np.abs(phi[sites] - ref[sites])))
    return out


def localization_gain(
    cube: Region,
    params: ActionParams,
    depths: Sequence[int] = (1, 2, 3),
    reference_depth: int = 6,
) -> dict[int, float]:
    """Worst case of ``localization_error`` over data with ``max |top| ≤ 1``.

    The error is linear in ``top``, so this is the largest absolute row sum of
    the map from ``top`` to the error on ``cube``, built one unit field at a time.
    """
    g = cube.geometry
    shape = g.stride_shape(g.k)
    sites = cube.sites(0)
    columns: dict[int, list[np.ndarray]] = {r: [] for r in depths}
    for i in range(int(np.prod(shape))):
        unit = np.zeros(int(np.prod(shape)))
        unit[i] = 1.0
        ref, _ = localized_field(cube, reference_depth, unit.reshape(shape), params)
        for r in depths:
            phi, _ = localized_field(cube, r, unit.reshape(shape), params)
            columns[r].append(phi[sites] - ref[sites])
    return {r: float(np.abs(np.array(cols)).sum(axis=0).max()) for r, cols in columns.items()}
