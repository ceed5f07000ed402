"""Extraction of local couplings from polymer functionals and the coupling recursion.

Functionals are stored as polynomial data: for each polymer ``X`` (a set of
unit cubes on a periodic site lattice) a constant plus monomials of degree up
to four in the site values.  Second functional derivatives at zero are then
exact.  A central-difference route is provided for black-box evaluation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

Cube = tuple[int, ...]
Polymer = frozenset  # of Cube


# ---------------------------------------------------------------------------
# lattice


@dataclass(frozen=True)
class SiteLattice:
    """Periodic lattice of ``shape`` sites, spacing ``spacing``, grouped into cubes of ``cube_side`` sites."""

    shape: tuple[int, ...]
    cube_side: int
    spacing: float = 1.0

    def __post_init__(self) -> None:
        if any(s % self.cube_side for s in self.shape):
            raise ValueError("cube side must divide the lattice")

    @property
    def d(self) -> int:
        return len(self.shape)

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cube_grid(self) -> tuple[int, ...]:
        return tuple(s // self.cube_side for s in self.shape)

    @property
    def site_volume(self) -> float:
        return self.spacing**self.d

    def cubes(self) -> list[Cube]:
        return list(itertools.product(*(range(g) for g in self.cube_grid)))

    def flat(self, coords: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(c % s for c, s in zip(coords, self.shape)), self.shape))

    def coords(self, index: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(index, self.shape))

    def cube_sites(self, cube: Cube) -> list[int]:
        s = self.cube_side
        ranges = [range(c * s, (c + 1) * s) for c in cube]
        return [self.flat(x) for x in itertools.product(*ranges)]

    def sites(self, X: Iterable[Cube]) -> np.ndarray:
        out: list[int] = []
        for c in sorted(X):
            out.extend(self.cube_sites(c))
        return np.array(sorted(out), dtype=np.int64)

    def shift(self, index: int, axis: int, step: int = 1) -> int:
        x = list(self.coords(index))
        x[axis] += step
        return self.flat(x)

    def displacement(self, index: int, base: int) -> np.ndarray:
        """Minimal-image displacement from ``base`` to ``index`` in physical units."""
        a, b = np.array(self.coords(index)), np.array(self.coords(base))
        n = np.array(self.shape)
        return (((a - b + n // 2) % n) - n // 2) * self.spacing

    def translate_cube(self, cube: Cube, by: Cube) -> Cube:
        return tuple((c + b) % g for c, b, g in zip(cube, by, self.cube_grid))


def cube_neighbors(lat: SiteLattice, cube: Cube) -> list[Cube]:
    out = []
    for a in range(lat.d):
        for s in (-1, 1):
            c = list(cube)
            c[a] = (c[a] + s) % lat.cube_grid[a]
            if tuple(c) != cube and tuple(c) not in out:
                out.append(tuple(c))
    return out


def is_connected(lat: SiteLattice, X: Iterable[Cube]) -> bool:
    cubes = set(X)
    if not cubes:
        return False
    start = next(iter(cubes))
    seen, todo = {start}, [start]
    while todo:
        c = todo.pop()
        for nb in cube_neighbors(lat, c):
            if nb in cubes and nb not in seen:
                seen.add(nb)
                todo.append(nb)
    return len(seen) == len(cubes)


def default_small(lat: SiteLattice, X: Polymer, max_cubes: int = 2) -> bool:
    """Default small-set class: connected unions of at most ``max_cubes`` cubes."""
    return 0 < len(X) <= max_cubes and is_connected(lat, X)


# ---------------------------------------------------------------------------
# polynomial data


@dataclass
class PolyData:
    """``constant + Σ coeff · Π φ(site)`` grouped by monomial degree."""

    constant: float = 0.0
    monomials: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def from_terms(cls, constant: float, terms: Iterable[tuple[float, Sequence[int]]]) -> "PolyData":
        by_degree: dict[int, tuple[list[float], list[Sequence[int]]]] = {}
        for coeff, sites in terms:
            r = len(sites)
            if not 1 <= r <= 4:
                raise ValueError("monomial degree must be between 1 and 4")
            by_degree.setdefault(r, ([], []))
            by_degree[r][0].append(float(coeff))
            by_degree[r][1].append(tuple(sites))
        mono = {r: (np.array(c), np.array(s, dtype=np.int64).reshape(len(c), r)) for r, (c, s) in by_degree.items()}
        return cls(float(constant), mono)

    def copy(self) -> "PolyData":
        return PolyData(self.constant, {r: (c.copy(), s.copy()) for r, (c, s) in self.monomials.items()})

    def __add__(self, other: "PolyData") -> "PolyData":
        mono = {r: (c.copy(), s.copy()) for r, (c, s) in self.monomials.items()}
        for r, (c, s) in other.monomials.items():
            if r in mono:
                mono[r] = (np.concatenate([mono[r][0], c]), np.concatenate([mono[r][1], s]))
            else:
                mono[r] = (c.copy(), s.copy())
        return PolyData(self.constant + other.constant, mono)

    def scaled(self, factor: float) -> "PolyData":
        return PolyData(self.constant * factor, {r: (c * factor, s.copy()) for r, (c, s) in self.monomials.items()})

    def degree_scaled(self, factor_of_degree: Callable[[int], float]) -> "PolyData":
        return PolyData(self.constant, {r: (c * factor_of_degree(r), s.copy()) for r, (c, s) in self.monomials.items()})

    def relabel(self, site_map: np.ndarray) -> "PolyData":
        return PolyData(self.constant, {r: (c.copy(), site_map[s]) for r, (c, s) in self.monomials.items()})

    def sites(self) -> set[int]:
        out: set[int] = set()
        for _, s in self.monomials.values():
            out.update(int(v) for v in s.ravel())
        return out

    def __call__(self, phi: np.ndarray) -> float:
        total = self.constant
        for c, s in self.monomials.values():
            total += float(np.dot(c, np.prod(phi[s], axis=1)))
        return total

    def second_derivative(self, f: np.ndarray, g: np.ndarray) -> float:
        """``E_2(0; f, g) = ∂_s ∂_t E(s f + t g)`` at ``s = t = 0``."""
        if 2 not in self.monomials:
            return 0.0
        c, s = self.monomials[2]
        return float(np.dot(c, f[s[:, 0]] * g[s[:, 1]] + f[s[:, 1]] * g[s[:, 0]]))


# ---------------------------------------------------------------------------
# functionals


@dataclass
class Functional:
    """A polymer functional ``E(X, φ)`` on a site lattice."""

    lattice: SiteLattice
    terms: dict[Polymer, PolyData]
    small: Callable[[SiteLattice, Polymer], bool] = default_small

    def is_small(self, X: Polymer) -> bool:
        return self.small(self.lattice, X)

    def __call__(self, X: Polymer, phi: np.ndarray) -> float:
        data = self.terms.get(X)
        return 0.0 if data is None else data(phi)

    def total(self, phi: np.ndarray, region: Iterable[Cube] | None = None) -> float:
        """``E(Λ) = Σ_{X ⊂ Λ} E(X)``; the whole lattice when ``region`` is ``None``."""
        keep = None if region is None else set(region)
        return sum(data(phi) for X, data in self.terms.items() if keep is None or X <= keep)

    def polymers_containing(self, cube: Cube) -> list[Polymer]:
        return [X for X in self.terms if cube in X]

    def __add__(self, other: "Functional") -> "Functional":
        terms = {X: d.copy() for X, d in self.terms.items()}
        for X, d in other.terms.items():
            terms[X] = terms[X] + d if X in terms else d.copy()
        return Functional(self.lattice, terms, self.small)


def translated_family(lat: SiteLattice, shape: Sequence[Cube], template: PolyData) -> dict[Polymer, PolyData]:
    """All translates of a polymer shape carrying translated copies of ``template``.

    ``template`` sites refer to the placement with offset zero.  Translates
    that coincide as sets (periodic wrap) are summed.
    """
    out: dict[Polymer, PolyData] = {}
    s = lat.cube_side
    all_sites = np.arange(lat.n_sites)
    coords = np.array(np.unravel_index(all_sites, lat.shape)).T
    for offset in lat.cubes():
        X = frozenset(lat.translate_cube(c, offset) for c in shape)
        shifted = (coords + np.array(offset) * s) % np.array(lat.shape)
        site_map = np.ravel_multi_index(shifted.T, lat.shape)
        data = template.relabel(site_map)
        out[X] = out[X] + data if X in out else data
    return out


def reflect(F: Functional, axis: int) -> Functional:
    """``(E∘R)(RX, φ) = E(X, φ∘R)`` for the reflection ``x_axis → -1 - x_axis`` of sites."""
    lat = F.lattice
    coords = np.array(np.unravel_index(np.arange(lat.n_sites), lat.shape)).T
    coords[:, axis] = (-1 - coords[:, axis]) % lat.shape[axis]
    site_map = np.ravel_multi_index(coords.T, lat.shape)
    g = lat.cube_grid[axis]
    terms = {}
    for X, data in F.terms.items():
        RX = frozenset(tuple((-1 - c[a]) % g if a == axis else c[a] for a in range(lat.d)) for c in X)
        terms[RX] = data.relabel(site_map)
    return Functional(lat, terms, F.small)


def symmetrized(F: Functional) -> Functional:
    """Average of ``F`` over the reflection group of the lattice axes."""
    out = F
    for axis in range(F.lattice.d):
        out = out + reflect(out, axis)
    n = 2**F.lattice.d
    return Functional(F.lattice, {X: d.scaled(1.0 / n) for X, d in out.terms.items()}, F.small)


# ---------------------------------------------------------------------------
# local basis functionals


def _vol(lat: SiteLattice, sites: np.ndarray) -> float:
    return len(sites) * lat.site_volume


def square_integral(lat: SiteLattice, sites: np.ndarray, coeff: float = 1.0) -> PolyData:
    """``coeff ∫ φ²`` over ``sites``."""
    w = coeff * lat.site_volume
    return PolyData.from_terms(0.0, [(w, (int(x), int(x))) for x in sites])


def gradient_integral(lat: SiteLattice, sites: np.ndarray, axis: int, coeff: float = 1.0) -> PolyData:
    """``coeff ∫ φ ∂_axis φ`` over ``sites`` with the forward difference."""
    w = coeff * lat.site_volume / lat.spacing
    terms = []
    for x in sites:
        y = lat.shift(int(x), axis)
        terms.append((w, (int(x), y)))
        terms.append((-w, (int(x), int(x))))
    return PolyData.from_terms(0.0, terms)


def square_value(lat: SiteLattice, sites: np.ndarray, phi: np.ndarray) -> float:
    return float(lat.site_volume * np.sum(phi[sites] ** 2))


def gradient_value(lat: SiteLattice, sites: np.ndarray, phi: np.ndarray, axis: int) -> float:
    fwd = np.array([lat.shift(int(x), axis) for x in sites], dtype=np.int64)
    return float(lat.site_volume / lat.spacing * np.sum(phi[sites] * (phi[fwd] - phi[sites])))


# ---------------------------------------------------------------------------
# extraction


@dataclass(frozen=True)
class Alphas:
    alpha0: float
    alpha2: float
    alpha2_mu: tuple[float, ...]


def second_derivative_fd(func: Callable[[np.ndarray], float], f: np.ndarray, g: np.ndarray, step: float = 1e-4) -> float:
    """Central mixed difference at zero with one Richardson step."""

    def mixed(h: float) -> float:
        return (func(h * (f + g)) - func(h * (f - g)) - func(h * (g - f)) + func(-h * (f + g))) / (4 * h * h)

    return (4 * mixed(step / 2) - mixed(step)) / 3


def extract_alphas(
    lat: SiteLattice,
    X: Polymer,
    data: PolyData | None = None,
    func: Callable[[np.ndarray], float] | None = None,
    base: int | None = None,
) -> Alphas:
    """``α₀``, ``α₂`` and ``α_{2,μ}`` of ``E(X)``.

    Exact for polynomial ``data``; black-box ``func`` uses central differences.
    ``base`` is the base-point site (default: the first site of ``X``).
    """
    if (data is None) == (func is None):
        raise ValueError("give exactly one of data or func")
    sites = lat.sites(X)
    vol = _vol(lat, sites)
    zero = np.zeros(lat.n_sites)
    if data is not None:
        value0 = data(zero)
        E2 = data.second_derivative
    else:
        value0 = func(zero)

        def E2(f, g):
            return second_derivative_fd(func, f, g)

    # the constant function; forward differences look one site past X
    one = np.ones(lat.n_sites)
    b = int(sites[0]) if base is None else base
    disp = np.array([lat.displacement(int(x), b) for x in range(lat.n_sites)])
    e11 = E2(one, one)
    alpha_mu = []
    for mu in range(lat.d):
        xm = disp[:, mu].copy()
        first_moment = float(lat.site_volume * xm[sites].sum())
        alpha_mu.append((E2(one, xm) - e11 / vol * first_moment) / vol)
    return Alphas(value0 / vol, e11 / (2 * vol), tuple(alpha_mu))


def local_part(lat: SiteLattice, sites: np.ndarray, alphas: Alphas) -> PolyData:
    """``α₀ Vol + α₂ ∫φ² + Σ α_{2,μ} ∫ φ ∂_μ φ`` over ``sites``."""
    out = PolyData(alphas.alpha0 * _vol(lat, sites)) + square_integral(lat, sites, alphas.alpha2)
    for mu, a in enumerate(alphas.alpha2_mu):
        out = out + gradient_integral(lat, sites, mu, a)
    return out


def local_value(lat: SiteLattice, sites: np.ndarray, alphas: Alphas, phi: np.ndarray) -> float:
    val = alphas.alpha0 * _vol(lat, sites) + alphas.alpha2 * square_value(lat, sites, phi)
    for mu, a in enumerate(alphas.alpha2_mu):
        val += a * gradient_value(lat, sites, phi, mu)
    return val


def renormalized_part(F: Functional, X: Polymer) -> PolyData:
    """``ℛE(X)``: ``E(X)`` minus its local part when ``X`` is small, ``E(X)`` otherwise."""
    data = F.terms[X]
    if not F.is_small(X):
        return data.copy()
    al = extract_alphas(F.lattice, X, data)
    return data + local_part(F.lattice, F.lattice.sites(X), al).scaled(-1.0)


def renormalized(F: Functional) -> Functional:
    return Functional(F.lattice, {X: renormalized_part(F, X) for X in F.terms}, F.small)


# ---------------------------------------------------------------------------
# decomposition over a region


@dataclass(frozen=True)
class GlobalCouplings:
    """``ε(E)``, ``μ(E)``, ``ν_μ(E)`` and their spread over cubes (zero for translation-invariant ``E``)."""

    epsilon: float
    mu: float
    nu: tuple[float, ...]
    spread: float


def global_couplings(F: Functional, alphas: Mapping[Polymer, Alphas] | None = None) -> GlobalCouplings:
    """``ε = -Σ_{X ∋ □} α₀``, ``μ = -2 Σ_{X ∋ □} α₂``, ``ν_μ = -Σ_{X ∋ □} α_{2,μ}`` over small ``X``."""
    lat = F.lattice
    if alphas is None:
        alphas = {X: extract_alphas(lat, X, d) for X, d in F.terms.items() if F.is_small(X)}
    per_cube = []
    for c in lat.cubes():
        eps = mu = 0.0
        nu = np.zeros(lat.d)
        for X, al in alphas.items():
            if c in X:
                eps -= al.alpha0
                mu -= 2 * al.alpha2
                nu -= np.array(al.alpha2_mu)
        per_cube.append(np.concatenate([[eps, mu], nu]))
    arr = np.array(per_cube)
    spread = float(np.max(np.abs(arr - arr[0]))) if len(arr) else 0.0
    return GlobalCouplings(float(arr[0, 0]), float(arr[0, 1]), tuple(float(v) for v in arr[0, 2:]), spread)


def crosses(X: Polymer, region: set[Cube]) -> bool:
    """``X # Λ``: ``X`` meets both ``Λ`` and its complement."""
    return bool(X & region) and not X <= region


def boundary_part(F: Functional, X: Polymer, region: set[Cube], alphas: Alphas, phi: np.ndarray) -> float:
    """``𝒯_Λ E(X)``: the local part of ``E(X)`` restricted to ``X ∩ Λ``."""
    return local_value(F.lattice, F.lattice.sites(X & region), alphas, phi)


@dataclass
class Decomposition:
    couplings: GlobalCouplings
    lhs: float
    volume_term: float
    mass_term: float
    nu_term: float
    renormalized_sum: float
    boundary_sum: float
    n_boundary: int

    @property
    def rhs(self) -> float:
        return self.volume_term + self.mass_term + self.nu_term + self.renormalized_sum - self.boundary_sum

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs) / max(1.0, abs(self.lhs))


def decompose_over_region(F: Functional, region: Iterable[Cube], phi: np.ndarray) -> Decomposition:
    """Split ``E(Λ)`` into global local couplings, renormalized parts and boundary pieces.

    ``E(Λ) = -ε Vol(Λ) - ½μ ‖φ‖²_Λ - Σ_μ ν_μ ∫_Λ φ∂_μφ + Σ_{X⊂Λ} ℛE(X) - Σ_{X#Λ, X small} 𝒯_Λ E(X)``.
    """
    lat = F.lattice
    lam = set(region)
    alphas = {X: extract_alphas(lat, X, d) for X, d in F.terms.items() if F.is_small(X)}
    g = global_couplings(F, alphas)
    sites = lat.sites(lam)
    volume_term = -g.epsilon * _vol(lat, sites)
    mass_term = -0.5 * g.mu * square_value(lat, sites, phi)
    nu_term = -sum(n * gradient_value(lat, sites, phi, mu) for mu, n in enumerate(g.nu))
    r_sum = 0.0
    b_sum = 0.0
    nb = 0
    for X, data in F.terms.items():
        if X <= lam:
            if X in alphas:
                r_sum += data(phi) - local_value(lat, lat.sites(X), alphas[X], phi)
            else:
                r_sum += data(phi)
        elif X in alphas and crosses(X, lam):
            b_sum += boundary_part(F, X, lam, alphas[X], phi)
            nb += 1
    return Decomposition(g, F.total(phi, lam), volume_term, mass_term, nu_term, r_sum, b_sum, nb)


def cross_terms(F: Functional, region: Iterable[Cube], phi: np.ndarray) -> float:
    """Direct evaluation of what the boundary pieces must supply.

    Equals ``Σ_{X ⊄ Λ small, X ∋ □ ⊂ Λ}`` of the local part restricted to
    ``X ∩ Λ``, computed cube by cube from the two-sided sums.
    """
    lat = F.lattice
    lam = set(region)
    total = 0.0
    for c in lam:
        cs = np.array(lat.cube_sites(c), dtype=np.int64)
        for X, data in F.terms.items():
            if c in X and F.is_small(X) and not X <= lam:
                total += local_value(lat, cs, extract_alphas(lat, X, data), phi)
    return total


# ---------------------------------------------------------------------------
# reblocking and scaling


def reblock(F: Functional, L: int) -> Functional:
    """``(ℬE)(Y) = Σ_{X̄ = Y} E(X)`` with ``X̄`` the union of ``L``-cubes covering ``X``."""
    lat = F.lattice
    coarse = SiteLattice(lat.shape, lat.cube_side * L, lat.spacing)
    terms: dict[Polymer, PolyData] = {}
    for X, data in F.terms.items():
        Y = frozenset(tuple(ci // L for ci in c) for c in X)
        terms[Y] = terms[Y] + data if Y in terms else data.copy()
    return Functional(coarse, terms, F.small)


def scale_down(F: Functional, L: int) -> Functional:
    """``(E)_{L^{-1}}(X, φ) = E(LX, φ_L)`` with ``φ_L(x) = L^{-(d-2)/2} φ(x/L)``.

    Site labels are kept; the spacing shrinks by ``L`` and a degree-``r``
    monomial picks up ``L^{-r(d-2)/2}``.
    """
    lat = F.lattice
    scaled = SiteLattice(lat.shape, lat.cube_side, lat.spacing / L)
    expo = (lat.d - 2) / 2
    terms = {X: d.degree_scaled(lambda r: float(L) ** (-r * expo)) for X, d in F.terms.items()}
    return Functional(scaled, terms, F.small)


@dataclass(frozen=True)
class Contributions:
    """``ℒ₁E = ε((ℬE)_{L^{-1}})`` and ``ℒ₂E = μ((ℬE)_{L^{-1}})``."""

    L1: float
    L2: float
    nu: tuple[float, ...]


def linear_contributions(F: Functional, L: int) -> Contributions:
    g = global_couplings(scale_down(reblock(F, L), L))
    return Contributions(g.epsilon, g.mu, g.nu)


# ---------------------------------------------------------------------------
# coupling recursion


Number = float | Fraction


@dataclass(frozen=True)
class CouplingState:
    k: int
    lam: Number
    mu: Number
    eps: Number


def coupling_step(
    state: CouplingState,
    L: int,
    d: int = 3,
    L1: Number = 0,
    L2: Number = 0,
    eps_star: Number = 0,
    mu_star: Number = 0,
) -> CouplingState:
    """``ε' = L^d ε + ℒ₁ + ε*``, ``μ' = L² μ + ℒ₂ + μ*``, ``λ' = L λ``."""
    return CouplingState(
        state.k + 1,
        L * state.lam,
        L**2 * state.mu + L2 + mu_star,
        L**d * state.eps + L1 + eps_star,
    )


def lambda_chain(lam: Number, N: int, L: int) -> list[Number]:
    """``λ_k = L^{-(N-k)} λ`` for ``k = 0..N``."""
    if isinstance(lam, Fraction):
        return [lam / Fraction(L) ** (N - k) for k in range(N + 1)]
    return [lam * float(L) ** (k - N) for k in range(N + 1)]


def run_flow(
    lam: Number,
    N: int,
    L: int,
    d: int = 3,
    mu0: Number = 0,
    eps0: Number = 0,
    corrections: Callable[[CouplingState], tuple[Number, Number, Number, Number]] | None = None,
) -> list[CouplingState]:
    """Iterate ``coupling_step`` from ``λ_0 = L^{-N} λ``; ``corrections`` returns ``(ℒ₁, ℒ₂, ε*, μ*)``."""
    lam0 = lam / Fraction(L) ** N if isinstance(lam, Fraction) else lam * float(L) ** (-N)
    states = [CouplingState(0, lam0, mu0, eps0)]
    for _ in range(N):
        extra = corrections(states[-1]) if corrections else (0, 0, 0, 0)
        states.append(coupling_step(states[-1], L, d, *extra))
    return states


def trajectory_csv(states: Sequence[CouplingState]) -> str:
    lines = ["k,lambda,mu,eps"]
    for s in states:
        lines.append(f"{s.k},{float(s.lam):.17g},{float(s.mu):.17g},{float(s.eps):.17g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# synthetic suites


def shapes_up_to(d: int, max_cubes: int) -> list[tuple[Cube, ...]]:
    """Connected cube shapes anchored at the origin, up to translation."""
    origin = (0,) * d
    found = {(origin,)}
    frontier = [(origin,)]
    for _ in range(max_cubes - 1):
        nxt = []
        for shape in frontier:
            for c in shape:
                for a in range(d):
                    for s in (-1, 1):
                        n = list(c)
                        n[a] += s
                        if tuple(n) in shape:
                            continue
                        new = shape + (tuple(n),)
                        low = tuple(min(x[i] for x in new) for i in range(d))
                        canon = tuple(sorted(tuple(x[i] - low[i] for i in range(d)) for x in new))
                        if canon not in found:
                            found.add(canon)
                            nxt.append(canon)
        frontier = nxt
    return sorted(found, key=lambda s: (len(s), s))


def random_template(lat: SiteLattice, shape: Sequence[Cube], rng: np.random.Generator, n_terms: int = 6, scale: float = 1.0) -> PolyData:
    sites = lat.sites(shape)
    terms = []
    for _ in range(n_terms):
        r = int(rng.integers(1, 5))
        terms.append((scale * rng.normal(), tuple(int(v) for v in rng.choice(sites, size=r))))
    # make sure the quadratic part couples the whole shape
    for _ in range(n_terms):
        i, j = rng.choice(sites, size=2)
        terms.append((scale * rng.normal(), (int(i), int(j))))
    return PolyData.from_terms(scale * rng.normal(), terms)


def synthetic_functional(
    lat: SiteLattice,
    rng: np.random.Generator,
    max_cubes: int = 3,
    symmetric: bool = False,
    small_max_cubes: int = 2,
) -> Functional:
    """Translation-invariant random polynomial functional on connected shapes up to ``max_cubes``.

    Shapes above ``small_max_cubes`` are large, so they pass to ``ℛE`` untouched.
    """
    terms: dict[Polymer, PolyData] = {}
    for shape in shapes_up_to(lat.d, max_cubes):
        if any(max(c[a] for c in shape) >= lat.cube_grid[a] // 2 for a in range(lat.d)):
            continue
        fam = translated_family(lat, shape, random_template(lat, shape, rng))
        for X, d in fam.items():
            terms[X] = terms[X] + d if X in terms else d
    F = Functional(lat, terms, lambda la, X: default_small(la, X, small_max_cubes))
    return symmetrized(F) if symmetric else F
