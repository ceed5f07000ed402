"""Gaussian block-averaging flows on small tori.

Two independent routes to the density after ``k`` averaging steps:

* :func:`sequential_flow` performs one averaging integral per step on unit
  lattices and rescales after each step, all in index space.
* :func:`multiscale_kernel_density` integrates the free density once against
  the composed multiscale kernel at level ``k``.

:func:`free_flow_density` evaluates the closed form through ``G_{k,Ω}`` and
``φ_{k,Ω}``.  Variables carry the labels ``("phi", site)`` and
``("Phi", j, site)`` so densities from different routes can be compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blockavg import MultiscaleLayout, block_index
from .geometry import RegionSequence
from .greens import dense_green, phi_k_omega
from .linalg import GaussianDensity
from .quadforms import ActionParams, laplacian_matrix, stiffness_vector


def _unit_free_density(n_sites: int, lap_unit: np.ndarray, mass_unit: float) -> GaussianDensity:
    labels = [("phi", s) for s in range(n_sites)]
    return GaussianDensity(labels, lap_unit + mass_unit * np.eye(n_sites), np.zeros(n_sites), 0.0)


def unit_mass(params: ActionParams, k: int) -> float:
    """Mass on the unit lattice whose level-``k`` image is ``params.mu_bar``."""
    return params.mu_bar * float(params.L) ** (-2 * k)


def sequential_flow(seq: RegionSequence, params: ActionParams) -> GaussianDensity:
    """Density after ``k`` sequential averaging steps with rescaling.

    Step ``j`` multiplies by the normalised kernel
    ``exp(-½ a L^{d-2} |Φ_j - Q Φ_{j-1}|²)`` on ``Omega_j``, integrates the
    previous-level values on ``Omega_j`` and rescales every variable by
    ``L^{-(d-2)/2}``.  The total integral is preserved at each step.
    """
    g = seq.geometry
    L, d = g.L, g.d
    k = seq.depth
    unit = g.at_level(0)
    lap = laplacian_matrix(unit, np.arange(g.n_sites))
    dens = _unit_free_density(g.n_sites, lap, unit_mass(params, k))
    stiff = params.a * float(L) ** (d - 2)
    scale = float(L) ** (-(d - 2) / 2)
    for j in range(1, k + 1):
        new_sites = seq.omega(j).sites(j)
        old_sites = seq.omega(j).sites(j - 1)
        old_labels = [("phi", int(s)) for s in old_sites] if j == 1 else [("Phi", j - 1, int(s)) for s in old_sites]
        new_labels = [("Phi", j, int(s)) for s in new_sites]
        rb = block_index(g, new_sites, j)
        cb = block_index(g, old_sites, j)
        Q = (rb[:, None] == cb[None, :]) * float(L) ** (-d)
        # quadratic form of stiff * |y - Q x|² in the variables (y, x)
        B = np.hstack([np.eye(len(new_sites)), -Q])
        A = stiff * B.T @ B
        lognorm = -0.5 * len(new_sites) * math.log(2 * math.pi / stiff)
        kernel = GaussianDensity(new_labels + old_labels, A, np.zeros(A.shape[0]), lognorm)
        dens = dens.multiply(kernel).integrate_out(old_labels)
        dens = dens.substitute_scale(scale)
    return dens


def kernel_log_normalisation(layout: MultiscaleLayout, params: ActionParams) -> float:
    """``log 𝒩_{k,Ω}`` making the multiscale route preserve the total integral."""
    g = layout.geometry
    a = stiffness_vector(layout, params)
    w = layout.weights
    gauss = 0.5 * float(np.sum(np.log(2 * math.pi / (a * w))))
    jacobian = 0.5 * g.k * (g.d - 2) * g.n_sites * math.log(g.L)
    return gauss + jacobian


def _joint_density(layout: MultiscaleLayout, params: ActionParams) -> GaussianDensity:
    """``exp(-½‖a^{1/2}(Φ - Qφ)‖² - ½<φ,(-Δ+mu)φ>) / 𝒩`` over all ``φ`` and ``Φ``."""
    g = layout.geometry
    n = g.n_sites
    Q = layout.Q_matrix()
    aw = stiffness_vector(layout, params) * layout.weights
    B = np.hstack([np.eye(layout.size), -Q])
    A = B.T @ (aw[:, None] * B)
    lap = laplacian_matrix(g, np.arange(n)) + params.mu_bar * np.eye(n)
    A[layout.size:, layout.size:] += g.site_weight * lap
    labels = [("Phi", int(j), int(s)) for j, s in zip(layout.levels, layout.sites)]
    labels += [("phi", s) for s in range(n)]
    return GaussianDensity(labels, A, np.zeros(len(labels)), -kernel_log_normalisation(layout, params))


def multiscale_kernel_density(seq: RegionSequence, params: ActionParams) -> GaussianDensity:
    """Free density integrated once against the multiscale kernel at level ``k``."""
    lay = MultiscaleLayout(seq)
    joint = _joint_density(lay, params)
    inner = [("phi", int(s)) for s in seq.omega(1).sites(0)]
    return joint.integrate_out(inner)


def free_flow_log_density(
    seq: RegionSequence, params: ActionParams, Phi: np.ndarray, phi_ext: np.ndarray
) -> float:
    """Closed form ``log Z - E(φ_{k,Ω})`` with ``Z = 𝒩⁻¹ (2π)^{N/2} det(w H)^{-1/2}``."""
    g = seq.geometry
    lay = MultiscaleLayout(seq)
    green = dense_green(lay, params)
    sites = green.dom
    phi = phi_k_omega(lay, params, Phi, phi_ext, green)
    diff = Phi - lay.Q_matrix() @ phi
    aw = stiffness_vector(lay, params) * lay.weights
    lap = laplacian_matrix(g, np.arange(g.n_sites))
    energy = 0.5 * float(np.sum(aw * diff * diff))
    energy += 0.5 * g.site_weight * float(phi @ lap @ phi + params.mu_bar * phi @ phi)
    sign, logdet_g = np.linalg.slogdet(green.matrix)
    if sign <= 0:
        raise np.linalg.LinAlgError("Green's function is not positive definite")
    n1 = len(sites)
    log_z = 0.5 * n1 * math.log(2 * math.pi) - 0.5 * n1 * math.log(g.site_weight) + 0.5 * logdet_g
    return log_z - kernel_log_normalisation(lay, params) - energy


def density_inputs(dens: GaussianDensity, Phi: np.ndarray, phi_ext: np.ndarray, layout: MultiscaleLayout) -> dict:
    """Assignment dictionary for a density over ``("phi", s)`` and ``("Phi", j, s)``."""
    out = {("Phi", int(j), int(s)): float(v) for j, s, v in zip(layout.levels, layout.sites, Phi)}
    for lab in dens.labels:
        if lab[0] == "phi":
            out[lab] = float(phi_ext[lab[1]])
    return out


@dataclass
class FlowComparison:
    residuals: list[float]
    log_values: list[tuple[float, float]]

    @property
    def max_residual(self) -> float:
        return max(self.residuals) if self.residuals else 0.0


def _rel(x: float, y: float) -> float:
    return abs(x - y) / max(1.0, abs(x))


def compare_flows(
    seq: RegionSequence, params: ActionParams, rng: np.random.Generator, samples: int = 20
) -> FlowComparison:
    """Pointwise log-density comparison of the sequential and multiscale routes."""
    lay = MultiscaleLayout(seq)
    seq_dens = sequential_flow(seq, params)
    ms_dens = multiscale_kernel_density(seq, params)
    if set(seq_dens.labels) != set(ms_dens.labels):
        raise ValueError("routes produced different variable sets")
    res, vals = [], []
    for _ in range(samples):
        Phi = rng.normal(size=lay.size)
        ext = rng.normal(size=seq.geometry.n_sites)
        inputs = density_inputs(ms_dens, Phi, ext, lay)
        a = seq_dens.log_value_at(inputs)
        b = ms_dens.log_value_at(inputs)
        res.append(_rel(a, b))
        vals.append((a, b))
    return FlowComparison(res, vals)


def compare_free_flow(
    seq: RegionSequence, params: ActionParams, rng: np.random.Generator, samples: int = 20
) -> FlowComparison:
    """Brute-force Gaussian integration against the ``G_{k,Ω}``/``φ_{k,Ω}`` closed form."""
    lay = MultiscaleLayout(seq)
    dens = multiscale_kernel_density(seq, params)
    res, vals = [], []
    for _ in range(samples):
        Phi = rng.normal(size=lay.size)
        ext = rng.normal(size=seq.geometry.n_sites)
        a = dens.log_value_at(density_inputs(dens, Phi, ext, lay))
        b = free_flow_log_density(seq, params, Phi, ext)
        res.append(_rel(a, b))
        vals.append((a, b))
    return FlowComparison(res, vals)
