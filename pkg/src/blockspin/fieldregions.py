"""Small-field tests, characteristic functions and large/small region bookkeeping.

Regions here are boolean cell masks on a periodic cube grid.  ``n*`` adds
``n`` layers of cubes (sup-metric dilation) and ``n♮`` removes ``n`` layers
(the complement of the dilated complement).  All inequalities in
characteristic functions are closed, so indicator sums telescope exactly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, Sequence

import numpy as np

from .geometry import _dilate_wrap

Variant = Literal["S", "S0", "P", "raw0", "q", "w"]


# ---------------------------------------------------------------------------
# parameters and thresholds


@dataclass(frozen=True)
class SmallFieldParams:
    """Coupling-dependent thresholds.

    ``λ_k = L^{-(N-k)} λ``, ``p_k = (-log λ_k)^p``, ``r_k = (-log λ_k)^r``,
    ``p_{0,k} = (-log λ_k)^{p0}`` and ``α_k = max(μ̄_k^{1/2}, λ_k^{1/4})``.
    """

    lam: float
    N: int
    L: int = 2
    p_exp: int = 2
    r_exp: int = 1
    p0_exp: int = 1
    mu_bar: float = 0.0
    delta: float = 0.1
    layer_factor: int = 5

    def __post_init__(self) -> None:
        if not 0 < self.lam < 1:
            raise ValueError("coupling must lie in (0, 1)")
        if not self.p_exp > self.r_exp:
            raise ValueError("p must exceed r")
        if not self.p0_exp < self.p_exp:
            raise ValueError("p0 must be below p")

    def lambda_k(self, k: int) -> float:
        return float(self.L) ** (-(self.N - k)) * self.lam

    def _log(self, k: int) -> float:
        val = -math.log(self.lambda_k(k))
        if val <= 0:
            raise ValueError("λ_k must stay below 1")
        return val

    def p_k(self, k: int) -> float:
        return self._log(k) ** self.p_exp

    def p0_k(self, k: int) -> float:
        return self._log(k) ** self.p0_exp

    def r_k(self, k: int) -> float:
        return self._log(k) ** self.r_exp

    def mu_bar_k(self, k: int) -> float:
        return float(self.L) ** (2 * k) * self.mu_bar

    def alpha_k(self, k: int) -> float:
        return max(math.sqrt(self.mu_bar_k(k)), self.lambda_k(k) ** 0.25)

    def layers(self, k: int) -> int:
        """``layer_factor·[r_k]`` cube layers used for separation."""
        return self.layer_factor * int(math.floor(self.r_k(k)))


@dataclass(frozen=True)
class Thresholds:
    """Right-hand sides of the three small-field inequalities.

    ``residual`` bounds ``|Φ - Qφ|``, ``gradient`` bounds ``|∂φ|`` and
    ``size`` bounds ``|φ|``.
    """

    residual: float
    gradient: float
    size: float

    def scaled(self, c: float) -> "Thresholds":
        return Thresholds(c * self.residual, c * self.gradient, c * self.size)

    def dominated_by(self, other: "Thresholds") -> bool:
        return self.residual <= other.residual and self.gradient <= other.gradient and self.size <= other.size


def thresholds(params: SmallFieldParams, k: int, variant: Variant) -> Thresholds:
    p, a = params.p_k(k), params.alpha_k(k)
    L = float(params.L)
    if variant == "S":
        return Thresholds(p, p, p / a)
    if variant == "S0":
        p1, a1 = params.p_k(k + 1), params.alpha_k(k + 1)
        return Thresholds(p1 * L**-0.5, p1 * L**-1.5, p1 / a1 * L**-0.5)
    if variant == "P":
        t = params.lambda_k(k) ** (-0.25 - params.delta)
        return Thresholds(t, t, t)
    if variant == "raw0":
        return Thresholds(math.inf, p, p / a)
    if variant == "q":
        return Thresholds(p, math.inf, math.inf)
    if variant == "w":
        return Thresholds(params.p0_k(k), math.inf, math.inf)
    raise ValueError(f"unknown variant {variant!r}")


@dataclass(frozen=True)
class Membership:
    member: bool
    slack: dict[str, float]


def membership(
    th: Thresholds,
    residual: np.ndarray | None = None,
    gradient: np.ndarray | None = None,
    size: np.ndarray | None = None,
) -> Membership:
    """Closed-inequality test with per-inequality slack (threshold minus worst value)."""
    slack = {}
    for name, vals, bound in (("residual", residual, th.residual), ("gradient", gradient, th.gradient), ("size", size, th.size)):
        if vals is None or np.size(vals) == 0:
            continue
        slack[name] = bound - float(np.max(np.abs(vals)))
    return Membership(all(s >= 0 for s in slack.values()), slack)


def membership_all(results: Iterable[Membership]) -> Membership:
    """Membership of a union of cubes: conjunction, with the smallest slack of each kind."""
    slack: dict[str, float] = {}
    ok = True
    for r in results:
        ok &= r.member
        for name, s in r.slack.items():
            slack[name] = min(slack.get(name, math.inf), s)
    return Membership(ok, slack)


# ---------------------------------------------------------------------------
# unit-lattice field helpers


def forward_gradient(field: np.ndarray, spacing: int = 1) -> np.ndarray:
    """Periodic forward differences ``(f(x + s e_μ) - f(x)) / s`` stacked over directions."""
    return np.stack([(np.roll(field, -spacing, axis=a) - field) / spacing for a in range(field.ndim)])


def block_average(field: np.ndarray, L: int) -> np.ndarray:
    shape = []
    for s in field.shape:
        if s % L:
            raise ValueError("block size must divide the lattice")
        shape += [s // L, L]
    return field.reshape(shape).mean(axis=tuple(range(1, 2 * field.ndim, 2)))


def cube_site_mask(grid: tuple[int, ...], side: int, cell: Sequence[int], halo: int = 0) -> np.ndarray:
    """Sites of a cube (plus ``halo`` sites on each side, periodically) on a lattice of ``grid·side`` sites."""
    shape = tuple(g * side for g in grid)
    mask = np.zeros(shape, dtype=bool)
    idx = tuple(slice(c * side, (c + 1) * side) for c in cell)
    mask[idx] = True
    return _dilate_wrap(mask, halo) if halo else mask


# ---------------------------------------------------------------------------
# region algebra on a periodic cube grid


def star(mask: np.ndarray, n: int) -> np.ndarray:
    """``n*``: add ``n`` layers of cubes."""
    return _dilate_wrap(mask, n) if n > 0 else mask.copy()


def natural(mask: np.ndarray, n: int) -> np.ndarray:
    """``n♮``: remove ``n`` layers of cubes."""
    return ~star(~mask, n)


def cell_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sup-metric gap in cube units between two cell sets on the periodic grid (0 when they touch)."""
    if not a.any() or not b.any():
        return math.inf
    if (a & b).any():
        return 0.0
    for n in range(1, max(a.shape) + 1):
        if (star(a, n) & b).any():
            return float(n - 1)
    return math.inf


def subsets_of(mask: np.ndarray) -> Iterable[np.ndarray]:
    cells = np.argwhere(mask)
    if len(cells) > 16:
        raise ValueError("exhaustive region enumeration is capped at 16 cubes")
    for r in range(len(cells) + 1):
        for combo in itertools.combinations(range(len(cells)), r):
            sub = np.zeros_like(mask)
            for i in combo:
                sub[tuple(cells[i])] = True
            yield sub


def _key(mask: np.ndarray) -> bytes:
    return np.packbits(mask.ravel()).tobytes()


def initial_lambda(Q0: np.ndarray, layers: int) -> np.ndarray:
    """``Λ_0 = (Q_0^c)^{n♮}``, equivalently ``Λ_0^c = Q_0^{n*}``."""
    return ~star(Q0, layers)


def new_omega(lam_bar: np.ndarray, P: np.ndarray, layers: int) -> np.ndarray:
    """``Ω_{k+1} = (Λ̄_k)^{n♮} - P^{n*}``."""
    return natural(lam_bar, layers) & ~star(P, layers)


def new_lambda(omega: np.ndarray, Q: np.ndarray, R: np.ndarray, layers: int) -> np.ndarray:
    """``Λ_{k+1} = Ω_{k+1}^{n♮} - (Q^{n*} ∪ R^{n*})``."""
    return natural(omega, layers) & ~(star(Q, layers) | star(R, layers))


@dataclass
class SeparationCheck:
    required: float
    achieved: float

    @property
    def ok(self) -> bool:
        return self.achieved >= self.required


def validate_separation(outer: np.ndarray, inner: np.ndarray, layers: int) -> SeparationCheck:
    """``d(outer^c, inner) ≥ layers`` cubes; empty or full regions pass trivially."""
    if not inner.any() or outer.all():
        return SeparationCheck(layers, math.inf)
    return SeparationCheck(layers, cell_distance(~outer, inner) + 1.0)


# ---------------------------------------------------------------------------
# partitions of unity


def _prod(chi: np.ndarray, region: np.ndarray) -> int:
    return int(np.all(chi[region])) if region.any() else 1


def _zeta_prod(chi: np.ndarray, region: np.ndarray) -> int:
    return int(np.all(~chi[region])) if region.any() else 1


@dataclass
class PartitionReport:
    """Integer totals of the expanded and regrouped identities."""

    expanded: int
    grouped: int
    terms: int
    groups: int

    @property
    def exact(self) -> bool:
        return self.expanded == 1 and self.grouped == 1


def partition_level0(chi: np.ndarray, layers: int) -> PartitionReport:
    """``1 = Σ_{Q_0} ζ_0(Q_0) χ_0(Q_0^c)`` and its regrouping by ``Λ_0 = (Q_0^c)^{n♮}``.

    ``chi`` holds the per-cube indicator values.
    """
    expanded = 0
    groups: dict[bytes, tuple[np.ndarray, int]] = {}
    terms = 0
    for Q in subsets_of(np.ones_like(chi, dtype=bool)):
        term = _zeta_prod(chi, Q) * _prod(chi, ~Q)
        expanded += term
        terms += 1
        lam = initial_lambda(Q, layers)
        c = _zeta_prod(chi, Q) * _prod(chi, ~Q & ~lam)
        key = _key(lam)
        prev = groups.get(key, (lam, 0))
        groups[key] = (lam, prev[1] + c)
    grouped = sum(c * _prod(chi, lam) for lam, c in groups.values())
    return PartitionReport(expanded, grouped, terms, len(groups))


def partition_q(chi_q: np.ndarray, lam_bar: np.ndarray, layers: int) -> PartitionReport:
    """``1 = Σ_{P ⊂ Λ̄} ζ^q(P) χ^q(Λ̄ - P)`` regrouped by ``Ω_{k+1}``."""
    expanded = 0
    terms = 0
    groups: dict[bytes, tuple[np.ndarray, int]] = {}
    for P in subsets_of(lam_bar):
        rest = lam_bar & ~P
        expanded += _zeta_prod(chi_q, P) * _prod(chi_q, rest)
        terms += 1
        om = new_omega(lam_bar, P, layers)
        c = _zeta_prod(chi_q, P) * _prod(chi_q, rest & ~om)
        key = _key(om)
        prev = groups.get(key, (om, 0))
        groups[key] = (om, prev[1] + c)
    grouped = sum(c * _prod(chi_q, om) for om, c in groups.values())
    return PartitionReport(expanded, grouped, terms, len(groups))


def partition_w(chi0: np.ndarray, chiw: np.ndarray, omega: np.ndarray, layers: int) -> PartitionReport:
    """``1 = Σ_{Q ⊂ Ω♮, R ⊂ Ω} ζ^0(Q) ζ^w(R) χ^0(Ω♮ - Q) χ^w(Ω - R)`` regrouped by ``Λ_{k+1}``.

    ``Ω♮`` is ``Ω`` with one layer removed.
    """
    om_nat = natural(omega, 1)
    Qs = list(subsets_of(om_nat))
    Rs = list(subsets_of(omega))
    a = np.array([_zeta_prod(chi0, Q) * _prod(chi0, om_nat & ~Q) for Q in Qs], dtype=np.int64)
    b = np.array([_zeta_prod(chiw, R) * _prod(chiw, omega & ~R) for R in Rs], dtype=np.int64)
    expanded = int(np.outer(a, b).sum())
    # zero terms add nothing to any group, so only supported pairs are classified
    groups: dict[bytes, int] = {}
    for i in np.flatnonzero(a):
        for j in np.flatnonzero(b):
            key = _key(new_lambda(omega, Qs[i], Rs[j], layers))
            groups[key] = groups.get(key, 0) + int(a[i] * b[j])
    grouped = sum(groups.values())
    terms = len(Qs) * len(Rs)
    return PartitionReport(expanded, grouped, terms, len(groups))


def partition_combined(
    chi_q: np.ndarray,
    chi0_of: Callable[[np.ndarray], np.ndarray],
    chiw: np.ndarray,
    lam_bar: np.ndarray,
    layers: int,
) -> PartitionReport:
    """Nested identity ``1 = Σ_Ω C^q(Ω) χ^q(Ω) Σ_Λ C(Ω, Λ)``.

    ``chi0_of(Ω)`` supplies the background indicators, which depend on the
    new small-field region through the localized fields.
    """
    outer: dict[bytes, tuple[np.ndarray, int]] = {}
    terms = 0
    for P in subsets_of(lam_bar):
        om = new_omega(lam_bar, P, layers)
        c = _zeta_prod(chi_q, P) * _prod(chi_q, (lam_bar & ~P) & ~om)
        key = _key(om)
        prev = outer.get(key, (om, 0))
        outer[key] = (om, prev[1] + c)
    total = 0
    for om, c in outer.values():
        if c == 0:
            continue
        inner = partition_w(chi0_of(om), chiw, om, layers)
        terms += inner.terms
        total += c * _prod(chi_q, om) * inner.grouped
    expanded = partition_q(chi_q, lam_bar, layers).expanded
    return PartitionReport(expanded, total, terms, len(outer))


# ---------------------------------------------------------------------------
# indicators from sampled fields


@dataclass
class CubeLattice:
    """Periodic unit lattice of ``grid`` cubes, each ``side`` sites wide."""

    grid: tuple[int, ...]
    side: int
    halo: int = 1

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(g * self.side for g in self.grid)

    def cells(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(g) for g in self.grid)))

    def tilde(self, cell: Sequence[int]) -> np.ndarray:
        return cube_site_mask(self.grid, self.side, cell, self.halo)

    def cube(self, cell: Sequence[int]) -> np.ndarray:
        return cube_site_mask(self.grid, self.side, cell, 0)

    def indicator(self, test: Callable[[tuple[int, ...]], bool]) -> np.ndarray:
        out = np.zeros(self.grid, dtype=bool)
        for c in self.cells():
            out[c] = bool(test(c))
        return out


def chi_raw(lat: CubeLattice, phi: np.ndarray, th: Thresholds) -> np.ndarray:
    """``χ_0(□)``: ``|∂Φ| ≤ p`` and ``|Φ| ≤ α^{-1}p`` at every point of ``□̃``."""
    grad = forward_gradient(phi)

    def test(c):
        t = lat.tilde(c)
        return membership(th, gradient=grad[:, t], size=phi[t]).member

    return lat.indicator(test)


def chi_q(lat: CubeLattice, Phi_next: np.ndarray, Q_Phi: np.ndarray, th: Thresholds) -> np.ndarray:
    """``χ^q(□)``: ``|Φ_{k+1} - QΦ_k| ≤ p_k`` on the coarse sites of ``□``."""
    diff = Phi_next - Q_Phi

    def test(c):
        return membership(th, residual=diff[lat.cube(c)]).member

    return lat.indicator(test)


def chi_w(lat: CubeLattice, W: np.ndarray, th: Thresholds) -> np.ndarray:
    def test(c):
        return membership(th, residual=W[lat.cube(c)]).member

    return lat.indicator(test)


def chi_background(
    lat: CubeLattice,
    Phi: np.ndarray,
    background: np.ndarray,
    th: Thresholds,
) -> np.ndarray:
    """``χ^0(□)`` from a background field on the same lattice as ``Φ`` (identity averaging)."""
    grad = forward_gradient(background)

    def test(c):
        t = lat.tilde(c)
        return membership(th, residual=(Phi - background)[t], gradient=grad[:, t], size=background[t]).member

    return lat.indicator(test)


# ---------------------------------------------------------------------------
# enforced bounds


@dataclass
class EnforcementReport:
    admitted: int
    rejected: int
    rejected_without_zero: int
    constants: dict[str, float] = field(default_factory=dict)
    limits: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.rejected_without_zero == 0 and all(self.constants[k] <= self.limits[k] + 1e-12 for k in self.limits)

    def to_csv(self) -> str:
        lines = ["quantity,measured,limit"]
        for k, v in self.constants.items():
            lines.append(f"{k},{v:.12g},{self.limits.get(k, math.nan):.12g}")
        lines.append(f"admitted,{self.admitted},")
        lines.append(f"rejected,{self.rejected},")
        return "\n".join(lines) + "\n"


def enforcement_suite_1d(
    params: SmallFieldParams,
    k: int,
    n_coarse: int,
    rng: np.random.Generator,
    samples: int = 200,
    spread: float = 1.0,
) -> EnforcementReport:
    """Fields passing ``χ_k`` and ``χ^q_k`` on a 1D torus obey the next-scale bounds.

    ``χ_k`` is taken in its consequence form ``|Φ_k| ≤ 2pα^{-1}``,
    ``|∂Φ_k| ≤ 3p``.  Admitted samples must give ``|Φ_{k+1}| ≤ 3pα^{-1}``
    and ``|∂Φ_{k+1}| ≤ 4p`` with ``∂`` the scaled difference over one coarse
    step; the measured ratios are reported against 3 and 4.  The combined
    field ``Φ^#`` (``QΦ_k`` outside ``Ω_{k+1}``, ``Φ_{k+1}`` inside) is
    measured as well.
    """
    L = params.L
    p, a = params.p_k(k), params.alpha_k(k)
    n_fine = n_coarse * L
    inner = np.zeros(n_coarse, dtype=bool)
    inner[n_coarse // 4 : 3 * n_coarse // 4] = True
    admitted = rejected = bad = 0
    worst = {"Phi_next_size": 0.0, "Phi_next_grad": 0.0, "Phi_sharp_size": 0.0, "Phi_sharp_grad": 0.0}
    for _ in range(samples):
        steps = rng.uniform(-3 * p, 3 * p, size=n_fine) * spread
        steps -= steps.mean()
        Phi = np.cumsum(steps)
        Phi += rng.uniform(-1, 1) * 2 * p / a * spread - Phi.mean()
        Q_Phi = block_average(Phi, L)
        Phi_next = Q_Phi + rng.uniform(-1, 1, size=n_coarse) * p * spread * 1.2
        ok_k = bool(np.all(np.abs(Phi) <= 2 * p / a) and np.all(np.abs(np.roll(Phi, -1) - Phi) <= 3 * p))
        ok_q = bool(np.all(np.abs(Phi_next - Q_Phi)[inner] <= p))
        if ok_k and ok_q:
            admitted += 1
            grad_next = (np.roll(Phi_next, -1) - Phi_next) / L
            both = inner & np.roll(inner, -1)
            worst["Phi_next_size"] = max(worst["Phi_next_size"], float(np.abs(Phi_next[inner]).max()) / (p / a))
            worst["Phi_next_grad"] = max(worst["Phi_next_grad"], float(np.abs(grad_next[both]).max()) / p)
            sharp = np.where(inner, Phi_next, Q_Phi)
            grad_sharp = (np.roll(sharp, -1) - sharp) / L
            worst["Phi_sharp_size"] = max(worst["Phi_sharp_size"], float(np.abs(sharp).max()) / (p / a))
            worst["Phi_sharp_grad"] = max(worst["Phi_sharp_grad"], float(np.abs(grad_sharp).max()) / p)
        else:
            rejected += 1
            # independent route: some raw inequality must be violated
            violated = (
                float(np.abs(Phi).max()) > 2 * p / a
                or float(np.abs(np.roll(Phi, -1) - Phi).max()) > 3 * p
                or float(np.abs(Phi_next - Q_Phi)[inner].max()) > p
            )
            bad += int(not violated)
    return EnforcementReport(admitted, rejected, bad, worst, {"Phi_next_size": 3.0, "Phi_next_grad": 4.0})


def fluctuation_bound_constant(loc_sqrt: np.ndarray, tol: float = 1e-13) -> float:
    """``‖[(C^{1/2})^loc]^{-1}‖_∞``: the constant turning ``|(C^{1/2})^loc W| ≤ Cp`` into ``|W| ≤ C'p``."""
    inv = np.linalg.inv(loc_sqrt)
    return float(np.abs(inv).sum(axis=1).max())


def fluctuation_bound_check(loc_sqrt: np.ndarray, rng: np.random.Generator, samples: int = 100) -> float:
    """Largest ``‖W‖_∞ / (C ‖(C^{1/2})^loc W‖_∞)`` over random ``W``; at most 1 when the chain holds."""
    C = fluctuation_bound_constant(loc_sqrt)
    worst = 0.0
    for _ in range(samples):
        W = rng.normal(size=loc_sqrt.shape[0])
        worst = max(worst, float(np.abs(W).max()) / (C * float(np.abs(loc_sqrt @ W).max())))
    return worst


def redundancy_check(
    lat: CubeLattice,
    params: SmallFieldParams,
    k: int,
    background: np.ndarray,
    W: np.ndarray,
    lam_next: np.ndarray,
) -> bool | None:
    """Desk-scale version of the redundancy of ``χ_k χ^q_k`` on ``Λ**_{k+1}``.

    The configuration is admitted when the background obeys the ``S0`` bounds
    and ``|W| ≤ p_{0,k}`` on ``Λ^{4*}_{k+1}``.  Returns ``None`` when not
    admitted, otherwise whether ``χ_k`` (raw form, field ``background + W``)
    equals 1 on every cube of ``Λ**_{k+1}``.
    """
    th0 = thresholds(params, k, "S0")
    region4 = star(lam_next, 4)
    region2 = star(lam_next, 2)
    grad = forward_gradient(background)
    for c in map(tuple, np.argwhere(region4)):
        t = lat.tilde(c)
        if not membership(th0, gradient=grad[:, t], size=background[t]).member:
            return None
        if np.abs(W[lat.cube(c)]).max() > params.p0_k(k):
            return None
    field_k = background + W
    chi = chi_raw(lat, field_k, thresholds(params, k, "raw0"))
    return bool(np.all(chi[region2]))
