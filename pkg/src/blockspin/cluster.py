"""Cluster expansion with holes on small cube complexes.

Polymers are the hole-compatible connected sets of a
:class:`~blockspin.polymers.CubeComplex` that meet ``Λ``.  Two polymers
interact when they share a cube of ``Ω``; overlapping inside a hole does not
count.  The pipeline is

1. Mayer expansion ``exp(Σ H(X)) = Σ_{Ω-disjoint {Y_j}} Π K(Y_j)``,
2. integration ``K# = ∫ K dμ_Λ`` against a product measure,
3. exponentiation ``Σ_{Ω-disjoint {Y_j}} Π K#(Y_j) = exp(Σ_Y H#(Y))``.

Every stage has two independent evaluations: ``K`` by Ω-connected covers
and by anchored inversion of partition functions, ``H#`` by the Ursell
series and by Möbius inversion of ``log Ξ#`` over cube subsets.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from .polymers import CubeComplex, Polymer, _bits, distance_dM, enumerate_polymers, popcount

Activity = Callable[[int, np.ndarray], float]


def omega_connected(X1: int, X2: int, omega: int) -> bool:
    """``X1 ∩ X2 ∩ Ω ≠ ∅``."""
    return bool(X1 & X2 & omega)


def _lowest(mask: int) -> int:
    return mask & -mask


def _subsets(mask: int) -> Iterable[int]:
    """All submasks of ``mask`` in increasing popcount order."""
    subs = []
    s = mask
    while True:
        subs.append(s)
        if s == 0:
            break
        s = (s - 1) & mask
    return sorted(subs, key=lambda m: (popcount(m), m))


# ---------------------------------------------------------------------------
# measures


@dataclass(frozen=True)
class SiteMeasure:
    """Single-site probability measure with finite support."""

    values: np.ndarray
    weights: np.ndarray
    log_normalisation: float = 0.0

    def __post_init__(self) -> None:
        if len(self.values) != len(self.weights):
            raise ValueError("values and weights differ in length")
        if np.any(np.asarray(self.weights) < 0) or abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise ValueError("single-site measure must be a probability")

    @classmethod
    def fair_pm1(cls) -> "SiteMeasure":
        return cls(np.array([-1.0, 1.0]), np.array([0.5, 0.5]))

    @classmethod
    def gauss_hermite(cls, nodes: int, variance: float = 1.0) -> "SiteMeasure":
        x, w = np.polynomial.hermite_e.hermegauss(nodes)
        return cls(x * math.sqrt(variance), w / w.sum())

    @classmethod
    def clipped_gaussian(cls, nodes: int, bound: float, variance: float = 1.0) -> "SiteMeasure":
        """Gaussian restricted to ``|x| ≤ bound``; the discarded mass is kept as ``log_normalisation``."""
        x, w = np.polynomial.hermite_e.hermegauss(nodes)
        x = x * math.sqrt(variance)
        w = w / w.sum()
        keep = np.abs(x) <= bound
        mass = float(w[keep].sum())
        if mass <= 0:
            raise ValueError("no quadrature node survives the clip")
        return cls(x[keep], w[keep] / mass, math.log(mass))

    def expectation(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.sum(self.weights * f(self.values)))


# ---------------------------------------------------------------------------
# activity systems


@dataclass
class ActivitySystem:
    """Activities ``H(X, φ)`` on the mod-hole polymers meeting ``Λ``.

    ``phi`` is one value per cube; cubes of ``Λ`` are integrated, the rest
    carry the external field.  ``activity(X, phi)`` must depend on ``phi``
    only inside ``X``.
    """

    complex: CubeComplex
    omega: int
    lam: int
    activity: Activity
    H0: float = 0.0
    kappa: float = 0.0
    polymers: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.lam & ~self.omega:
            raise ValueError("Λ must lie inside Ω")
        if not self.polymers:
            cap = self.complex.n_cubes
            if cap > 8:
                raise ValueError("cluster pipeline is limited to 8 cubes")
            self.polymers = [p.mask for p in enumerate_polymers(self.complex, cap, "mod_holes", self.omega) if p.mask & self.lam]

    @property
    def lam_cubes(self) -> list[int]:
        return list(_bits(self.lam))

    def values(self, phi: np.ndarray) -> dict[int, float]:
        return {X: float(self.activity(X, phi)) for X in self.polymers}

    def restricted(self, keep: Callable[[int], bool], replacement: Activity | None = None) -> "ActivitySystem":
        """Same system with ``H(X)`` replaced (default 0) wherever ``keep(X)`` is false."""
        base = self.activity
        alt = replacement or (lambda X, phi: 0.0)

        def act(X: int, phi: np.ndarray) -> float:
            return base(X, phi) if keep(X) else alt(X, phi)

        return ActivitySystem(self.complex, self.omega, self.lam, act, self.H0, self.kappa, list(self.polymers))


def mod_distances(system: ActivitySystem, masks: Iterable[int] | None = None) -> dict[int, float]:
    cx = system.complex
    return {X: distance_dM(Polymer(cx, X), system.omega)[0] for X in (masks or system.polymers)}


def synthetic_activity(
    cx: CubeComplex,
    omega: int,
    lam: int,
    H0: float,
    kappa: float,
    rng: np.random.Generator,
    field_dependent: bool = True,
) -> ActivitySystem:
    """Random activities with ``|H(X, φ)| ≤ H0 exp(-κ d_M(X mod Ω^c))`` for every field.

    The field-dependent form is ``amp·(c + s·tanh(Σ_{x∈X} b_x φ_x))/2`` with
    ``|c|, |s| ≤ 1``.
    """
    probe = ActivitySystem(cx, omega, lam, lambda X, phi: 0.0)
    dists = mod_distances(probe)
    amp = {X: H0 * math.exp(-kappa * dists[X]) for X in probe.polymers}
    const = {X: float(rng.uniform(-1, 1)) for X in probe.polymers}
    slope = {X: float(rng.uniform(-1, 1)) if field_dependent else 0.0 for X in probe.polymers}
    coupling = rng.normal(size=cx.n_cubes)

    def act(X: int, phi: np.ndarray) -> float:
        if X not in amp:
            return 0.0
        cubes = list(_bits(X))
        t = math.tanh(float(np.dot(coupling[cubes], phi[cubes])))
        return amp[X] * 0.5 * (const[X] + slope[X] * t)

    return ActivitySystem(cx, omega, lam, act, H0, kappa, probe.polymers)


def check_activity_bound(system: ActivitySystem, measure: SiteMeasure, phi_ext: np.ndarray) -> float:
    """Largest ``|H(X)| / (H0 e^{-κ d_M})`` over polymers and support configurations."""
    dists = mod_distances(system)
    worst = 0.0
    for phi in _configurations(system, measure, phi_ext):
        for X, h in system.values(phi).items():
            bound = system.H0 * math.exp(-system.kappa * dists[X])
            if bound > 0:
                worst = max(worst, abs(h) / bound)
            elif h != 0:
                return math.inf
    return worst


# ---------------------------------------------------------------------------
# Mayer expansion


def _partition_sums(system: ActivitySystem, H: dict[int, float], masks: Iterable[int]) -> dict[int, float]:
    """``Z(S) = exp(Σ_{X ⊆ S} H(X))`` for the requested cube sets."""
    out = {}
    for S in masks:
        out[S] = math.exp(sum(h for X, h in H.items() if X & ~S == 0))
    return out


def _valid_unions(system: ActivitySystem) -> list[int]:
    return sorted(system.polymers, key=lambda m: (popcount(m), m))


def mayer_K(system: ActivitySystem, phi: np.ndarray) -> dict[int, float]:
    """``K(Y)`` by anchored inversion.

    With ``c`` the lowest ``Ω`` cube of ``Y``, the collections inside ``Y``
    either avoid ``c`` or contain one cluster ``Y' ∋ c``, which gives
    ``Z(Y) = Z(Y - c) + Σ_{Y' ∋ c} K(Y') Z(Y - (Y' ∩ Ω))``.
    """
    H = system.values(phi)
    return _invert_clusters(system, lambda S: math.exp(sum(h for X, h in H.items() if X & ~S == 0)))


def _invert_clusters(system: ActivitySystem, Z: Callable[[int], float]) -> dict[int, float]:
    omega = system.omega
    K: dict[int, float] = {}
    cache: dict[int, float] = {}

    def z(S: int) -> float:
        if S not in cache:
            cache[S] = Z(S)
        return cache[S]

    for Y in _valid_unions(system):
        c = _lowest(Y & omega)
        val = z(Y) - z(Y & ~c)
        for Yp, kp in K.items():
            if Yp & c and Yp & ~Y == 0 and Yp != Y:
                val -= kp * z(Y & ~(Yp & omega))
        K[Y] = val
    return K


def mayer_K_covers(system: ActivitySystem, phi: np.ndarray) -> dict[int, float]:
    """``K(Y)`` as the sum over Ω-connected families of distinct polymers with union ``Y``.

    Families are built one polymer at a time; the state keeps the union and
    the ``Ω`` footprints of the current Ω-connected components.
    """
    H = system.values(phi)
    omega = system.omega
    states: dict[tuple[int, frozenset[int]], float] = {(0, frozenset()): 1.0}
    for X in system.polymers:
        f = math.expm1(H[X])
        if f == 0.0:
            continue
        foot = X & omega
        new = dict(states)
        for (union, comps), w in states.items():
            merged = foot
            rest = []
            for cpt in comps:
                if cpt & foot:
                    merged |= cpt
                else:
                    rest.append(cpt)
            key = (union | X, frozenset(rest) | {merged})
            new[key] = new.get(key, 0.0) + w * f
        states = new
    K = {Y: 0.0 for Y in system.polymers}
    for (union, comps), w in states.items():
        if len(comps) == 1:
            K[union] = K.get(union, 0.0) + w
    return K


def disjoint_collection_sum(activities: dict[int, float], omega: int, S: int, cache: dict | None = None) -> float:
    """``Σ`` over Ω-disjoint collections of keys inside ``S`` of the product of activities."""
    cache = {} if cache is None else cache

    def xi(T: int) -> float:
        if T in cache:
            return cache[T]
        c = _lowest(T & omega)
        if c == 0:
            cache[T] = 1.0
            return 1.0
        val = xi(T & ~c)
        for Y, k in activities.items():
            if Y & c and Y & ~T == 0:
                val += k * xi(T & ~(Y & omega))
        cache[T] = val
        return val

    return xi(S)


def disjoint_collection_sum_bruteforce(activities: dict[int, float], omega: int, S: int) -> float:
    """Same sum by listing every Ω-disjoint subfamily (small systems only)."""
    keys = [Y for Y in activities if Y & ~S == 0]
    total = 0.0
    for r in range(len(keys) + 1):
        for combo in itertools.combinations(keys, r):
            if all(not omega_connected(a, b, omega) for a, b in itertools.combinations(combo, 2)):
                total += math.prod(activities[Y] for Y in combo)
    return total


# ---------------------------------------------------------------------------
# integration


def _configurations(system: ActivitySystem, measure: SiteMeasure, phi_ext: np.ndarray) -> Iterable[np.ndarray]:
    lam = system.lam_cubes
    for vals in itertools.product(measure.values, repeat=len(lam)):
        phi = np.array(phi_ext, dtype=float)
        phi[lam] = vals
        yield phi


def _configuration_weights(system: ActivitySystem, measure: SiteMeasure) -> np.ndarray:
    n = len(system.lam_cubes)
    return np.array([math.prod(ws) for ws in itertools.product(measure.weights, repeat=n)])


def integrate_K_product(system: ActivitySystem, measure: SiteMeasure, phi_ext: np.ndarray) -> dict[int, float]:
    """``K#`` by integrating over the full product space of ``Λ``."""
    weights = _configuration_weights(system, measure)
    out = {Y: 0.0 for Y in system.polymers}
    for w, phi in zip(weights, _configurations(system, measure, phi_ext)):
        for Y, k in mayer_K(system, phi).items():
            out[Y] += w * k
    return out


def integrate_K(system: ActivitySystem, measure: SiteMeasure, phi_ext: np.ndarray) -> dict[int, float]:
    """``K#(Y) = ∫ K(Y) dμ`` integrating only the sites of ``Y ∩ Λ``.

    Sites of ``Λ`` outside ``Y`` are pinned at the first support point, which
    is legitimate because ``K(Y)`` ignores them.
    """
    lam = system.lam_cubes
    pin = np.array(phi_ext, dtype=float)
    pin[lam] = measure.values[0]
    out: dict[int, float] = {}
    groups: dict[int, list[int]] = {}
    for Y in system.polymers:
        groups.setdefault(Y & system.lam, []).append(Y)
    for sites_mask, Ys in groups.items():
        sites = list(_bits(sites_mask))
        acc = {Y: 0.0 for Y in Ys}
        for idx in itertools.product(range(len(measure.values)), repeat=len(sites)):
            phi = pin.copy()
            phi[sites] = measure.values[list(idx)]
            w = math.prod(measure.weights[i] for i in idx)
            K = mayer_K(system, phi)
            for Y in Ys:
                acc[Y] += w * K[Y]
        out.update(acc)
    return out


def xi_bruteforce(system: ActivitySystem, measure: SiteMeasure, phi_ext: np.ndarray) -> float:
    """``Ξ = ∫ exp(Σ_X H(X, φ)) dμ_Λ`` by summing over the product support."""
    weights = _configuration_weights(system, measure)
    total = 0.0
    for w, phi in zip(weights, _configurations(system, measure, phi_ext)):
        total += w * math.exp(sum(system.values(phi).values()))
    return total


# ---------------------------------------------------------------------------
# exponentiation


def ursell_function(adjacency: np.ndarray) -> int:
    """Signed count ``Σ (-1)^{#edges}`` over connected spanning subgraphs."""
    n = adjacency.shape[0]
    if n == 1:
        return 1
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if adjacency[i, j]]
    total = 0
    for r in range(n - 1, len(edges) + 1):
        for sub in itertools.combinations(edges, r):
            parent = list(range(n))

            def find(a: int) -> int:
                while parent[a] != a:
                    parent[a] = parent[parent[a]]
                    a = parent[a]
                return a

            for a, b in sub:
                parent[find(a)] = find(b)
            if len({find(i) for i in range(n)}) == 1:
                total += -1 if r % 2 else 1
    return total


def hsharp_ursell(activities: dict, omega: int, Y: int, n_max: int):
    """``Σ_{n ≤ n_max} 1/n! Σ_{(Y_1..Y_n): ∪ = Y} ρ^T Π K#(Y_i)`` by direct tuple enumeration.

    Works with floats or :class:`fractions.Fraction` activities.
    """
    keys = [P for P in activities if P & ~Y == 0]
    total = Fraction(0) if any(isinstance(v, Fraction) for v in activities.values()) else 0.0
    for n in range(1, n_max + 1):
        for tup in itertools.product(keys, repeat=n):
            union = 0
            for P in tup:
                union |= P
            if union != Y:
                continue
            adj = np.array([[i != j and omega_connected(a, b, omega) for j, b in enumerate(tup)] for i, a in enumerate(tup)])
            rho = ursell_function(adj)
            if rho == 0:
                continue
            prod = math.prod((activities[P] for P in tup), start=Fraction(1) if isinstance(total, Fraction) else 1.0)
            total += rho * prod / math.factorial(n)
    return total


def _poly_collection_sum(activities: dict, omega: int, S: int, degree: int, one) -> list:
    """``Ξ(S)(t)`` with every activity scaled by ``t``, truncated at ``t^degree``."""
    cache: dict[int, list] = {}
    zero = one - one

    def xi(T: int) -> list:
        if T in cache:
            return cache[T]
        c = _lowest(T & omega)
        if c == 0:
            out = [one] + [zero] * degree
        else:
            out = list(xi(T & ~c))
            for Y, k in activities.items():
                if Y & c and Y & ~T == 0:
                    rest = xi(T & ~(Y & omega))
                    for i in range(degree):
                        out[i + 1] += k * rest[i]
        cache[T] = out
        return out

    return xi(S)


def _log_series(p: list, degree: int, one) -> list:
    """Coefficients of ``log p(t)`` for ``p(0) = 1``, up to ``t^degree``."""
    zero = one - one
    u = [zero] + p[1:]
    out = [zero] * (degree + 1)
    power = [one] + [zero] * degree
    for m in range(1, degree + 1):
        nxt = [zero] * (degree + 1)
        for i, a in enumerate(power):
            if a == zero:
                continue
            for j in range(1, degree + 1 - i):
                nxt[i + j] += a * u[j]
        power = nxt
        sign = one if m % 2 else -one
        for i in range(degree + 1):
            out[i] += sign * power[i] / m
    return out


@dataclass
class HsharpResult:
    values: dict[int, float]
    n_cap: int | None
    tail: float
    exact: dict[int, float]

    @property
    def total(self) -> float:
        return float(sum(self.values.values()))


def _mobius(f: Callable[[int], object], Y: int, zero):
    total = zero
    for S in _subsets(Y):
        sign = -1 if popcount(Y & ~S) % 2 else 1
        total += sign * f(S)
    return total


def exponentiate(
    activities: dict,
    omega: int,
    n_cap: int | None = 12,
) -> HsharpResult:
    """``H#(Y)`` for every union ``Y`` of Ω-connected keys.

    ``log Ξ#(S) = Σ_{Y ⊆ S} H#(Y)`` for every cube set ``S``, so ``H#`` is the
    Möbius inversion of ``log Ξ#`` over cube subsets.  With ``n_cap`` the log
    is expanded in powers of the activities up to order ``n_cap``, which is
    term-by-term the truncated Ursell series; ``tail`` is the largest gap to
    the untruncated values.
    """
    keys = list(activities)
    cache: dict[int, float] = {}
    exact_log: dict[int, float] = {}

    def log_xi(S: int) -> float:
        if S not in exact_log:
            v = disjoint_collection_sum(activities, omega, S, cache)
            if v <= 0:
                raise ValueError("Ξ# is not positive; activities too large for the log")
            exact_log[S] = math.log(v)
        return exact_log[S]

    targets = _union_closure(keys, omega)
    exact = {Y: float(_mobius(log_xi, Y, 0.0)) for Y in targets}
    if n_cap is None:
        return HsharpResult(exact, None, 0.0, exact)
    one = 1.0
    series: dict[int, float] = {}

    def log_xi_cap(S: int) -> float:
        if S not in series:
            p = _poly_collection_sum(activities, omega, S, n_cap, one)
            series[S] = float(sum(_log_series(p, n_cap, one)))
        return series[S]

    truncated = {Y: float(_mobius(log_xi_cap, Y, 0.0)) for Y in targets}
    tail = max((abs(truncated[Y] - exact[Y]) for Y in targets), default=0.0)
    return HsharpResult(truncated, n_cap, tail, exact)


def exponentiate_exact_rational(activities: dict[int, Fraction], omega: int, n_cap: int) -> dict[int, Fraction]:
    """Truncated ``H#`` in exact rational arithmetic (constant activities)."""
    one = Fraction(1)
    targets = _union_closure(list(activities), omega)
    series: dict[int, Fraction] = {}

    def log_xi_cap(S: int) -> Fraction:
        if S not in series:
            p = _poly_collection_sum(activities, omega, S, n_cap, one)
            series[S] = sum(_log_series(p, n_cap, one), Fraction(0))
        return series[S]

    return {Y: _mobius(log_xi_cap, Y, Fraction(0)) for Y in targets}


def _union_closure(keys: Sequence[int], omega: int) -> list[int]:
    """Every union of an Ω-connected family of keys."""
    found = set(keys)
    frontier = set(keys)
    while frontier:
        nxt = set()
        for U in frontier:
            for P in keys:
                if omega_connected(U, P, omega):
                    V = U | P
                    if V not in found:
                        found.add(V)
                        nxt.add(V)
        frontier = nxt
    return sorted(found, key=lambda m: (popcount(m), m))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class ClusterReport:
    xi_expansion: float
    xi_bruteforce: float | None
    hsharp: dict[int, float]
    tail: float
    bound_ratio: float
    decay: dict[str, float]
    notes: list[str]

    @property
    def relative_gap(self) -> float | None:
        if self.xi_bruteforce is None:
            return None
        return abs(self.xi_expansion - self.xi_bruteforce) / abs(self.xi_bruteforce)

    @property
    def max_hsharp(self) -> float:
        return max((abs(v) for v in self.hsharp.values()), default=0.0)

    def to_json(self) -> dict:
        return {
            "xi_expansion": self.xi_expansion,
            "xi_bruteforce": self.xi_bruteforce,
            "relative_gap": self.relative_gap,
            "max_Hsharp": self.max_hsharp,
            "tail": self.tail,
            "activity_bound_ratio": self.bound_ratio,
            "fitted_decay": self.decay,
            "notes": self.notes,
        }


def fit_decay(hsharp: dict[int, float], distances: dict[int, float]) -> dict[str, float]:
    """Least-squares rate of ``log max |H#|`` against ``d_M(Y mod Ω^c)``."""
    by_d: dict[float, float] = {}
    for Y, v in hsharp.items():
        if abs(v) > 0:
            d = round(distances[Y], 9)
            by_d[d] = max(by_d.get(d, 0.0), abs(v))
    if len(by_d) < 2:
        return {"rate": math.nan, "points": float(len(by_d))}
    ds = np.array(sorted(by_d))
    vs = np.log([by_d[d] for d in ds])
    slope, intercept = np.polyfit(ds, vs, 1)
    return {"rate": float(-slope), "log_prefactor": float(intercept), "points": float(len(ds))}


def full_pipeline(
    system: ActivitySystem,
    measure: SiteMeasure,
    phi_ext: np.ndarray,
    n_cap: int | None = 12,
    bruteforce: bool = True,
    max_bruteforce_configs: int = 4096,
) -> ClusterReport:
    notes = []
    bound_ratio = check_activity_bound(system, measure, phi_ext)
    Ksharp = integrate_K(system, measure, phi_ext)
    hs = exponentiate(Ksharp, system.omega, n_cap)
    xi_exp = math.exp(hs.total)
    xi_bf = None
    configs = len(measure.values) ** len(system.lam_cubes)
    if bruteforce and configs <= max_bruteforce_configs:
        xi_bf = xi_bruteforce(system, measure, phi_ext)
    elif bruteforce:
        notes.append(f"brute force skipped: {configs} configurations")
    dists = {Y: distance_dM(Polymer(system.complex, Y), system.omega)[0] for Y in hs.values}
    decay = fit_decay(hs.values, dists)
    decay["predicted_rate"] = system.kappa
    return ClusterReport(xi_exp, xi_bf, hs.values, hs.tail, bound_ratio, decay, notes)


def local_influence_defect(
    system: ActivitySystem,
    measure: SiteMeasure,
    phi_ext: np.ndarray,
    Y: int,
    rng: np.random.Generator,
    n_cap: int | None = 12,
) -> float:
    """Largest change of ``H#(Y)`` when ``H(X)`` is redrawn for every ``X ⊄ Y``."""
    base = exponentiate(integrate_K(system, measure, phi_ext), system.omega, n_cap).values
    noise = {X: float(rng.uniform(-1, 1)) * max(system.H0, 1e-3) for X in system.polymers}
    altered = system.restricted(lambda X: X & ~Y == 0, lambda X, phi: noise.get(X, 0.0))
    new = exponentiate(integrate_K(altered, measure, phi_ext), system.omega, n_cap).values
    inside = [Z for Z in base if Z & ~Y == 0]
    return max((abs(base[Z] - new.get(Z, 0.0)) for Z in inside), default=0.0)
