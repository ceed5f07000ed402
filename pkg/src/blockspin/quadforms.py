"""Lattice Laplacians, half-bond gradient norms, actions and potentials.

Conventions at level ``k`` with spacing ``eta = L**-k``:

* ``(-Δ f)(x) = eta**-2 Σ_mu (2 f(x) - f(x + e_mu) - f(x - e_mu))``
* ``∂f(x, x') = (f(x') - f(x)) / eta`` on nearest-neighbour bonds
* fine-lattice inner products carry the weight ``eta**d`` per site

Operators are value-to-value maps (:class:`DenseOperator`); energy forms
multiply by the site weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .blockavg import MultiscaleLayout
from .geometry import LatticeGeometry
from .linalg import DenseOperator

__all__ = [
    "ActionParams",
    "CouplingState",
    "DenseOperator",
    "laplacian",
    "laplacian_matrix",
    "forward_bonds",
    "half_bond_inner",
    "half_bond_norm_sq",
    "boundary_term",
    "summation_by_parts",
    "next_stiffness_one_block",
    "action_S",
    "action_S_star",
    "action_S0_next",
    "action_S_star0_next",
    "potential_V",
    "fluct_kernel",
]


# ---------------------------------------------------------------- parameters


def next_stiffness_one_block(a: float, a_k: float, L: int, d: int) -> float:
    """Stiffness of the composed averaging kernel, read off a single block.

    Minimises ``(a/2L²)|D - QΨ|² + (a_k/2)|Ψ|²`` over the ``L**d`` values of
    one block (unit spacing, block weight ``L**d``) for unit ``D`` and returns
    ``2 L² * min / weight``.
    """
    nb = L**d
    q = np.full((1, nb), 1.0 / nb)
    w_coarse = float(nb)
    hess = (a / L**2) * w_coarse * q.T @ q + a_k * np.eye(nb)
    rhs = (a / L**2) * w_coarse * q.T[:, 0]
    psi = np.linalg.solve(hess, rhs)
    val = 0.5 * (a / L**2) * w_coarse * (1.0 - q @ psi) ** 2 + 0.5 * a_k * psi @ psi
    return float(2.0 * L**2 * val[0] / w_coarse)


@dataclass(frozen=True)
class ActionParams:
    """Averaging stiffness ``a``, per-level stiffness ``a_j`` and mass ``mu_bar``.

    ``a_1 = a`` and later stiffnesses follow the one-block recursion
    ``a_{j+1} = a a_j / (a_j + a L**-2)``.
    """

    a: float
    L: int
    d: int
    mu_bar: float = 0.0
    levels: int = 4
    a1: float | None = None

    @property
    def stiffness(self) -> tuple[float, ...]:
        return _stiffness_chain(self.a, self.L, self.levels + 2, self.a if self.a1 is None else self.a1)

    def a_j(self, j: int) -> float:
        if j < 1:
            raise ValueError("stiffness index starts at 1")
        return self.stiffness[j - 1]

    def a_jk(self, j: int, k: int) -> float:
        """``a_j L**(2(k-j))``."""
        return self.a_j(j) * float(self.L) ** (2 * (k - j))

    def with_mass(self, mu_bar: float) -> "ActionParams":
        return ActionParams(self.a, self.L, self.d, mu_bar, self.levels, self.a1)

    def closed_form_next(self, j: int) -> float:
        aj = self.a_j(j)
        return self.a * aj / (aj + self.a / self.L**2)


@lru_cache(maxsize=64)
def _stiffness_chain(a: float, L: int, count: int, a1: float) -> tuple[float, ...]:
    out = [a1]
    for _ in range(count - 1):
        out.append(a * out[-1] / (out[-1] + a / L**2))
    return tuple(out)


@dataclass(frozen=True)
class CouplingState:
    """Coupling constants and the analysis exponents kept as configuration."""

    lam: float
    mu_bar: float
    N: int
    L: int
    d: int = 3
    p: int = 6
    r: int = 3
    delta: float = 0.01
    eps: float = 0.01
    beta: float = 0.25
    n0: int = 4
    mu: tuple[float, ...] = field(default_factory=tuple)
    epsilon: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not 0 < self.lam <= math.exp(-1):
            raise ValueError("base coupling must lie in (0, e^-1]")
        if self.mu_bar > 1:
            raise ValueError("mass parameter must be at most 1")
        if self.p <= self.r:
            raise ValueError("need p > r")

    def lam_k(self, k: int) -> float:
        return float(self.L) ** (-(self.N - k)) * self.lam

    def mu_bar_k(self, k: int) -> float:
        return float(self.L) ** (-2 * (self.N - k)) * self.mu_bar

    def p_k(self, k: int) -> float:
        return (-math.log(self.lam_k(k))) ** self.p

    def r_k(self, k: int) -> float:
        return (-math.log(self.lam_k(k))) ** self.r

    def alpha_k(self, k: int) -> float:
        return max(math.sqrt(self.mu_bar_k(k)), self.lam_k(k) ** 0.25)


# ---------------------------------------------------------------- laplacians


@lru_cache(maxsize=32)
def neighbor_table(geometry: LatticeGeometry) -> np.ndarray:
    """``(n_sites, 2d)`` flat neighbour indices ordered ``+e_0, -e_0, +e_1, ...``."""
    idx = np.arange(geometry.n_sites).reshape(geometry.shape)
    cols = []
    for mu in range(geometry.d):
        cols.append(np.roll(idx, -1, axis=mu).ravel())
        cols.append(np.roll(idx, 1, axis=mu).ravel())
    return np.stack(cols, axis=1)


def forward_bonds(geometry: LatticeGeometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bonds ``(x, x + e_mu)`` for every site and direction: ``(x, x', mu)``."""
    nb = neighbor_table(geometry)
    x = np.repeat(np.arange(geometry.n_sites), geometry.d)
    mu = np.tile(np.arange(geometry.d), geometry.n_sites)
    return x, nb[x, 2 * mu], mu


def _adjacency(geometry: LatticeGeometry, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    nb = neighbor_table(geometry)
    pos = np.full(geometry.n_sites, -1)
    pos[cols] = np.arange(len(cols))
    adj = np.zeros((len(rows), len(cols)))
    for c in range(nb.shape[1]):
        p = pos[nb[rows, c]]
        ok = p >= 0
        np.add.at(adj, (np.nonzero(ok)[0], p[ok]), 1.0)
    return adj


def laplacian_matrix(
    geometry: LatticeGeometry,
    sites: np.ndarray,
    bc: str = "dirichlet",
    *,
    cross: np.ndarray | None = None,
    outer: np.ndarray | None = None,
) -> np.ndarray:
    """Value-to-value matrix of ``-Δ`` with the requested boundary treatment.

    ``dirichlet``: ``1_S (-Δ) 1_S``.  ``neumann``: only bonds inside ``S``.
    ``mixed``: bonds leaving ``S`` into ``outer`` are dropped, bonds leaving
    ``outer`` are kept as Dirichlet.  ``cross``: the block ``1_S (-Δ) 1_T``
    with ``T = cross``.
    """
    sites = np.asarray(sites, dtype=int)
    if len(sites) == 0:
        raise ValueError("empty site set")
    h2 = geometry.spacing**-2
    if bc == "cross":
        if cross is None:
            raise ValueError("cross boundary condition needs the column set")
        return -h2 * _adjacency(geometry, sites, np.asarray(cross, dtype=int))
    adj = _adjacency(geometry, sites, sites)
    if bc == "dirichlet":
        diag = np.full(len(sites), 2.0 * geometry.d)
    elif bc == "neumann":
        diag = adj.sum(axis=1)
    elif bc == "mixed":
        if outer is None:
            raise ValueError("mixed boundary condition needs the outer region")
        inside_outer = np.zeros(geometry.n_sites, dtype=bool)
        inside_outer[np.asarray(outer, dtype=int)] = True
        nb = neighbor_table(geometry)[sites]
        diag = adj.sum(axis=1) + (~inside_outer[nb]).sum(axis=1)
    else:
        raise ValueError(f"unknown boundary condition {bc!r}")
    return h2 * (np.diag(diag) - adj)


def laplacian(
    geometry: LatticeGeometry,
    sites: np.ndarray,
    bc: str = "dirichlet",
    *,
    cross: np.ndarray | None = None,
    outer: np.ndarray | None = None,
) -> DenseOperator:
    mat = laplacian_matrix(geometry, sites, bc, cross=cross, outer=outer)
    w = geometry.site_weight
    dom = np.asarray(cross if bc == "cross" else sites, dtype=int)
    return DenseOperator(mat, dom, np.asarray(sites, dtype=int), np.full(len(dom), w), np.full(len(sites), w))


# ---------------------------------------------------------------- gradients


def _bond_weights(geometry: LatticeGeometry, lam_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, xp, _ = forward_bonds(geometry)
    inside = lam_mask.ravel()
    w = 0.5 * (inside[x].astype(float) + inside[xp].astype(float))
    return x, xp, w


def half_bond_inner(geometry: LatticeGeometry, f: np.ndarray, g: np.ndarray, lam_mask: np.ndarray) -> float:
    """``<∂f, ∂g>_{*,Λ}``: bonds inside count fully, crossing bonds count one half."""
    x, xp, w = _bond_weights(geometry, lam_mask)
    h = geometry.spacing
    df = (f[xp] - f[x]) / h
    dg = (g[xp] - g[x]) / h
    return float(geometry.site_weight * np.sum(w * df * dg))


def half_bond_norm_sq(geometry: LatticeGeometry, f: np.ndarray, lam_mask: np.ndarray) -> float:
    return half_bond_inner(geometry, f, f, lam_mask)


def boundary_term(geometry: LatticeGeometry, f: np.ndarray, g: np.ndarray, lam_mask: np.ndarray) -> float:
    """``½ Σ_{x∈Λ, x'∉Λ} eta**(d-1) ∂f(x, x') (g(x) + g(x'))`` over neighbour pairs."""
    inside = lam_mask.ravel()
    nb = neighbor_table(geometry)
    h = geometry.spacing
    total = 0.0
    xs = np.nonzero(inside)[0]
    for c in range(nb.shape[1]):
        xp = nb[xs, c]
        cut = ~inside[xp]
        xa, xb = xs[cut], xp[cut]
        total += float(np.sum((f[xb] - f[xa]) / h * (g[xa] + g[xb])))
    return 0.5 * h ** (geometry.d - 1) * total


def minus_laplacian_full(geometry: LatticeGeometry, f: np.ndarray) -> np.ndarray:
    nb = neighbor_table(geometry)
    return geometry.spacing**-2 * (2 * geometry.d * f - f[nb].sum(axis=1))


def summation_by_parts(geometry: LatticeGeometry, f: np.ndarray, g: np.ndarray, lam_mask: np.ndarray) -> float:
    """Residual of ``<∂f,∂g>_{*,Λ} = <-Δf, g>_Λ + b_Λ``; vanishes identically."""
    inside = lam_mask.ravel()
    lhs = half_bond_inner(geometry, f, g, lam_mask)
    lap = float(geometry.site_weight * np.sum((minus_laplacian_full(geometry, f) * g)[inside]))
    return lhs - lap - boundary_term(geometry, f, g, lam_mask)


# ---------------------------------------------------------------- actions


def stiffness_vector(layout: MultiscaleLayout, params: ActionParams, k: int | None = None) -> np.ndarray:
    """Per-site ``a_j L**(2(k-j))`` for the multiscale layout at level ``k``."""
    k = layout.geometry.k if k is None else k
    return np.array([params.a_jk(int(j), k) for j in layout.levels])


def multiscale_residual_sq(
    layout: MultiscaleLayout, params: ActionParams, Phi: np.ndarray, phi: np.ndarray, comp_mask: np.ndarray | None = None
) -> float:
    """``‖a^{1/2}(Φ - Q φ)‖²`` optionally restricted to selected multiscale sites."""
    diff = Phi - layout.Q_matrix() @ phi
    terms = layout.weights * stiffness_vector(layout, params) * diff * diff
    if comp_mask is not None:
        terms = terms[comp_mask]
    return float(np.sum(terms))


def action_S(layout: MultiscaleLayout, params: ActionParams, Phi: np.ndarray, phi: np.ndarray) -> float:
    """``½‖a^{1/2}(Φ - Qφ)‖² + ½<φ, [-Δ + mu]_{Ω1} φ>`` (φ restricted to Omega_1)."""
    g = layout.geometry
    om1 = layout.seq.omega(1).sites(0)
    lap = laplacian_matrix(g, om1)
    p1 = phi[om1]
    quad = g.site_weight * float(p1 @ lap @ p1 + params.mu_bar * p1 @ p1)
    phi_in = np.zeros_like(phi)
    phi_in[om1] = p1
    return 0.5 * multiscale_residual_sq(layout, params, Phi, phi_in) + 0.5 * quad


def action_S_star(
    layout: MultiscaleLayout, params: ActionParams, lam_mask: np.ndarray, Phi: np.ndarray, phi: np.ndarray
) -> float:
    """``½‖a^{1/2}(Φ - Qφ)‖²_Λ + ½‖∂φ‖²_{*,Λ} + ½ mu ‖φ‖²_Λ``."""
    g = layout.geometry
    inside = lam_mask.ravel()
    comp_in = inside[layout.sites]
    res = multiscale_residual_sq(layout, params, Phi, phi, comp_in)
    grad = half_bond_norm_sq(g, phi, lam_mask)
    mass = params.mu_bar * g.site_weight * float(np.sum(phi[inside] ** 2))
    return 0.5 * (res + grad + mass)


def action_S0_next(
    layout_plus: MultiscaleLayout, params: ActionParams, Phi_plus: np.ndarray, phi: np.ndarray, k: int
) -> float:
    """Action after one averaging step, before rescaling.

    Components ``j <= k`` carry ``a_j^{(k)}``; the new top component carries
    ``a_{k+1} / L²``.  Equivalent to ``a_j L**(2(k-j))`` for every ``j``.
    """
    return action_S(layout_plus, params, Phi_plus, phi)


def action_S_star0_next(
    layout_plus: MultiscaleLayout,
    params: ActionParams,
    lam_mask: np.ndarray,
    Phi_plus: np.ndarray,
    phi: np.ndarray,
) -> float:
    """Starred action after one step: new top on ``Omega_{k+1}``, level ``k`` on ``Λ - Omega_{k+1}``."""
    return action_S_star(layout_plus, params, lam_mask, Phi_plus, phi)


def potential_V(
    geometry: LatticeGeometry,
    lam_mask: np.ndarray,
    phi: np.ndarray,
    epsilon: float,
    mu: float,
    lam: float,
) -> float:
    """``epsilon Vol(Λ) + ½ mu ‖φ‖²_Λ + ¼ lam ∫_Λ φ⁴``."""
    inside = lam_mask.ravel()
    w = geometry.site_weight
    vol = w * float(np.sum(inside))
    p = phi[inside]
    return epsilon * vol + 0.5 * mu * w * float(np.sum(p**2)) + 0.25 * lam * w * float(np.sum(p**4))


def potential_V_unrenormalized(
    geometry: LatticeGeometry,
    lam_mask: np.ndarray,
    phi: np.ndarray,
    epsilon_prev: float,
    mu_prev: float,
    lam: float,
) -> float:
    """Potential with the previous level's couplings scaled: ``L**d eps``, ``L² mu``."""
    L, d = geometry.L, geometry.d
    return potential_V(geometry, lam_mask, phi, L**d * epsilon_prev, L**2 * mu_prev, lam)


def fluct_kernel(layout: MultiscaleLayout, params: ActionParams, green: DenseOperator) -> DenseOperator:
    """``Δ_{k,Ω} = a - a Q G Q^T a`` on multiscale fields."""
    g = layout.geometry
    om1 = green.dom
    Q = layout.Q_matrix(om1)
    a = stiffness_vector(layout, params)
    w_fine = g.site_weight
    Qt = (Q * layout.weights[:, None]).T / w_fine
    mat = np.diag(a) - (a[:, None] * (Q @ green.matrix @ Qt)) * a[None, :]
    return DenseOperator.square(mat, layout.sites, layout.weights)
