"""Toroidal multiscale lattices, fields, scaling, regions and distances.

All lattices at level ``k`` share one integer grid with ``n = L**(Mvol + Nlevels)``
sites per side.  A site with integer coordinate ``i`` sits at the physical
point ``i * L**-k``.  The sublattice of stride ``L**j`` (coordinates divisible
by ``L**j``) has physical spacing ``L**(j - k)`` and carries the inner-product
weight ``L**(d*(j - k))`` per site.

Regions are unions of cubes on a cube grid of side ``L**e`` grid sites.  A cube
of scale exponent ``e = m + j`` is an ``L**-(k-j) M`` cube in physical units.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

Cell = tuple[int, ...]


@dataclass(frozen=True)
class LatticeGeometry:
    """Torus parameters at a fixed level ``k``."""

    L: int
    m: int
    Nlevels: int
    Mvol: int
    d: int = 3
    k: int = 0

    def __post_init__(self) -> None:
        if self.L < 2:
            raise ValueError("block side L must be at least 2")
        if not 1 <= self.d <= 3:
            raise ValueError("dimension must be 1, 2 or 3")
        if self.m < 0 or self.k < 0 or self.Nlevels < 0 or self.Mvol < 0:
            raise ValueError("exponents must be non-negative")

    @property
    def M(self) -> int:
        return self.L**self.m

    @property
    def n(self) -> int:
        """Grid sites per side (independent of the level)."""
        return self.L ** (self.Mvol + self.Nlevels)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def n_sites(self) -> int:
        return self.n**self.d

    @property
    def spacing(self) -> float:
        return float(self.L) ** (-self.k)

    @property
    def period_exponent(self) -> int:
        return self.Mvol + self.Nlevels - self.k

    @property
    def period(self) -> float:
        return float(self.L) ** self.period_exponent

    @property
    def site_weight(self) -> float:
        """Inner-product weight of one site at the finest spacing."""
        return self.spacing**self.d

    def stride_weight(self, j: int) -> float:
        """Weight of one site of the stride ``L**j`` sublattice."""
        return float(self.L) ** (self.d * (j - self.k))

    def at_level(self, k: int) -> "LatticeGeometry":
        return LatticeGeometry(self.L, self.m, self.Nlevels, self.Mvol, self.d, k)

    def cube_exponent(self, j: int) -> int:
        """Grid-site exponent of an ``L**-(k-j) M`` cube."""
        return self.m + j

    def stride_shape(self, j: int) -> tuple[int, ...]:
        s = self.L**j
        if self.n % s:
            raise ValueError(f"stride L^{j} does not divide the period")
        return (self.n // s,) * self.d

    def stride_indices(self, j: int) -> np.ndarray:
        """Flat grid indices of the stride ``L**j`` sublattice, lexicographic."""
        sub = self.stride_shape(j)
        coords = np.indices(sub).reshape(self.d, -1) * self.L**j
        return np.ravel_multi_index(tuple(coords), self.shape)

    def coords(self, flat: np.ndarray | int) -> np.ndarray:
        return np.array(np.unravel_index(flat, self.shape)).T

    def torus_sup_distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Sup-metric distance in grid units between coordinate arrays."""
        diff = np.abs(np.asarray(x)[..., :] - np.asarray(y)) % self.n
        return np.minimum(diff, self.n - diff).max(axis=-1)

    def to_keyvalue(self) -> str:
        return "\n".join(
            f"{key} = {getattr(self, key)}" for key in ("L", "m", "Nlevels", "Mvol", "d", "k")
        )


@dataclass(frozen=True)
class Field:
    """Real values on the stride ``L**stride`` sublattice, optionally masked."""

    geometry: LatticeGeometry
    stride: int
    values: np.ndarray
    support: np.ndarray | None = None

    def __post_init__(self) -> None:
        shape = self.geometry.stride_shape(self.stride)
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape} != {shape}")
        if self.support is not None and self.support.shape != shape:
            raise ValueError("support mask shape mismatch")

    @property
    def weight(self) -> float:
        return self.geometry.stride_weight(self.stride)

    @property
    def mask(self) -> np.ndarray:
        if self.support is None:
            return np.ones(self.values.shape, dtype=bool)
        return self.support

    def restricted(self, region: "Region | None") -> np.ndarray:
        """Values on ``support ∩ region``, zero elsewhere."""
        keep = self.mask
        if region is not None:
            keep = keep & region.site_mask(self.stride)
        return np.where(keep, self.values, 0.0)


def plain_norm_sq(f: Field, region: "Region | None" = None) -> float:
    """Unweighted sum of squares over ``support ∩ region``."""
    v = f.restricted(region)
    return float(np.sum(v * v))


def weighted_norm_sq(f: Field, region: "Region | None" = None) -> float:
    """Weighted squared norm over ``support ∩ region``; empty intersection gives 0."""
    return f.weight * plain_norm_sq(f, region)


def scale_field(f: Field, direction: str) -> Field:
    """Scale a full-torus field by ``f_L(x) = L**(-(d-2)/2) f(x/L)`` or its inverse.

    ``up`` multiplies the spacing by ``L`` (level ``k -> k-1``); ``down`` undoes it.
    Grid indices are unchanged; only the level tag and the values move.
    """
    if f.support is not None and not f.support.all():
        raise ValueError("scaling requires a field on the full torus")
    g = f.geometry
    factor = float(g.L) ** (-(g.d - 2) / 2.0)
    if direction == "up":
        if g.k == 0 and f.stride == 0:
            raise ValueError("cannot scale above level 0 on the unit lattice")
        return Field(g.at_level(g.k - 1), f.stride, f.values * factor)
    if direction == "down":
        return Field(g.at_level(g.k + 1), f.stride, f.values / factor)
    raise ValueError(f"unknown direction {direction!r}")


def _dilate_wrap(mask: np.ndarray, n: int) -> np.ndarray:
    """Sup-metric dilation by ``n`` cells on a periodic grid (separable)."""
    out = mask.copy()
    for axis in range(mask.ndim):
        size = mask.shape[axis]
        reach = min(n, size)
        acc = out.copy()
        for t in range(1, reach + 1):
            acc |= np.roll(out, t, axis=axis)
            acc |= np.roll(out, -t, axis=axis)
        out = acc
    return out


@dataclass(frozen=True)
class Region:
    """Union of cubes of side ``L**scale`` grid sites on the periodic cube grid."""

    geometry: LatticeGeometry
    scale: int
    cells: frozenset[Cell] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        side = self.geometry.L**self.scale
        if self.geometry.n % side:
            raise ValueError("cube side must divide the grid period")
        g = self.grid_size
        for c in self.cells:
            if len(c) != self.geometry.d or any(not 0 <= x < g for x in c):
                raise ValueError(f"cell {c} outside the cube grid")

    # construction helpers
    @classmethod
    def from_mask(cls, geometry: LatticeGeometry, scale: int, mask: np.ndarray) -> "Region":
        cells = frozenset(tuple(int(x) for x in c) for c in np.argwhere(mask))
        return cls(geometry, scale, cells)

    @classmethod
    def full(cls, geometry: LatticeGeometry, scale: int) -> "Region":
        g = geometry.n // geometry.L**scale
        return cls.from_mask(geometry, scale, np.ones((g,) * geometry.d, dtype=bool))

    @classmethod
    def empty(cls, geometry: LatticeGeometry, scale: int) -> "Region":
        return cls(geometry, scale, frozenset())

    @property
    def side(self) -> int:
        return self.geometry.L**self.scale

    @property
    def grid_size(self) -> int:
        return self.geometry.n // self.side

    @cached_property
    def cell_mask(self) -> np.ndarray:
        mask = np.zeros((self.grid_size,) * self.geometry.d, dtype=bool)
        for c in self.cells:
            mask[c] = True
        return mask

    def site_mask(self, stride: int = 0) -> np.ndarray:
        """Membership of stride ``L**stride`` sublattice sites."""
        g = self.geometry
        shape = g.stride_shape(stride)
        idx = np.indices(shape) * g.L**stride // self.side
        return self.cell_mask[tuple(idx)]

    def sites(self, stride: int = 0) -> np.ndarray:
        """Flat grid indices of member sites of the stride sublattice (lexicographic)."""
        sub = self.geometry.stride_indices(stride)
        return sub[self.site_mask(stride).ravel()]

    def n_sites(self, stride: int = 0) -> int:
        return int(self.site_mask(stride).sum())

    def volume(self) -> float:
        return len(self.cells) * (self.side * self.geometry.spacing) ** self.geometry.d

    def is_empty(self) -> bool:
        return not self.cells

    def is_full(self) -> bool:
        return len(self.cells) == self.grid_size**self.geometry.d

    # set algebra
    def _aligned(self, other: "Region") -> tuple["Region", "Region"]:
        if other.geometry.n != self.geometry.n or other.geometry.d != self.geometry.d:
            raise ValueError("regions live on different tori")
        s = min(self.scale, other.scale)
        return self.refine(s), other.refine(s)

    def refine(self, scale: int) -> "Region":
        """Same set as a union of finer cubes."""
        if scale == self.scale:
            return self
        if scale > self.scale:
            raise ValueError("refine only goes to finer scales")
        r = self.geometry.L ** (self.scale - scale)
        mask = self.cell_mask
        for axis in range(self.geometry.d):
            mask = np.repeat(mask, r, axis=axis)
        return Region.from_mask(self.geometry, scale, mask)

    def coarsen_exact(self, scale: int) -> "Region":
        """Express as a union of coarser cubes; fails when not a union of them."""
        bar = self.bar(scale)
        if bar.refine(self.scale).cells != self.cells:
            raise ValueError("region is not a union of the coarser cubes")
        return bar

    def complement(self) -> "Region":
        return Region.from_mask(self.geometry, self.scale, ~self.cell_mask)

    def union(self, other: "Region") -> "Region":
        a, b = self._aligned(other)
        return Region(a.geometry, a.scale, a.cells | b.cells)

    def intersection(self, other: "Region") -> "Region":
        a, b = self._aligned(other)
        return Region(a.geometry, a.scale, a.cells & b.cells)

    def difference(self, other: "Region") -> "Region":
        a, b = self._aligned(other)
        return Region(a.geometry, a.scale, a.cells - b.cells)

    def issubset(self, other: "Region") -> bool:
        a, b = self._aligned(other)
        return a.cells <= b.cells

    def same_set(self, other: "Region") -> bool:
        a, b = self._aligned(other)
        return a.cells == b.cells

    # cube calculus
    def enlarge(self, n: int) -> "Region":
        """Add ``n`` layers of cubes of the region's own scale (sup metric)."""
        if n < 0:
            raise ValueError("layer count must be non-negative")
        return Region.from_mask(self.geometry, self.scale, _dilate_wrap(self.cell_mask, n))

    def star(self, layers: int) -> "Region":
        return self.enlarge(layers)

    def natural(self, layers: int) -> "Region":
        return self.complement().enlarge(layers).complement()

    def bar(self, scale: int | None = None) -> "Region":
        """All cubes of a coarser scale (default: next scale) meeting the region."""
        target = self.scale + 1 if scale is None else scale
        if target < self.scale:
            raise ValueError("bar goes to coarser scales")
        r = self.geometry.L ** (target - self.scale)
        cells = frozenset(tuple(x // r for x in c) for c in self.cells)
        return Region(self.geometry, target, cells)

    def cube_regions(self) -> list["Region"]:
        return [Region(self.geometry, self.scale, frozenset([c])) for c in sorted(self.cells)]

    def distance_to(self, other: "Region", stride: int = 0) -> float:
        """Minimal sup-metric site distance in grid units; ``inf`` if either is empty."""
        a = self.geometry.coords(self.sites(stride))
        b = self.geometry.coords(other.sites(stride))
        if len(a) == 0 or len(b) == 0:
            return float("inf")
        best = np.inf
        for chunk in range(0, len(a), 256):
            dist = self.geometry.torus_sup_distance(a[chunk:chunk + 256, None, :], b[None, :, :])
            best = min(best, int(dist.min()))
        return float(best)

    def to_keyvalue(self) -> str:
        cells = ";".join(",".join(str(x) for x in c) for c in sorted(self.cells))
        return f"scale = {self.scale}\ncells = {cells}"


@dataclass(frozen=True)
class RegionSequence:
    """Nested regions ``Omega_1 ⊃ ... ⊃ Omega_J``; component ``j`` lives on stride ``L**j``."""

    geometry: LatticeGeometry
    regions: tuple[Region, ...]

    def __post_init__(self) -> None:
        if not self.regions:
            raise ValueError("need at least one region")
        for j, reg in enumerate(self.regions, start=1):
            if reg.scale < j:
                raise ValueError(f"Omega_{j} must be a union of L^{j} blocks")
        for j in range(len(self.regions) - 1):
            if not self.regions[j + 1].issubset(self.regions[j]):
                raise ValueError(f"nesting fails at Omega_{j + 2} ⊂ Omega_{j + 1}")

    @classmethod
    def standard(cls, geometry: LatticeGeometry, masks: Sequence[np.ndarray]) -> "RegionSequence":
        """Build from cell masks at the canonical scales ``m + j``."""
        regs = tuple(
            Region.from_mask(geometry, geometry.cube_exponent(j), np.asarray(mk, dtype=bool))
            for j, mk in enumerate(masks, start=1)
        )
        return cls(geometry, regs)

    @classmethod
    def full(cls, geometry: LatticeGeometry, depth: int | None = None) -> "RegionSequence":
        depth = geometry.k if depth is None else depth
        regs = tuple(Region.full(geometry, geometry.cube_exponent(j)) for j in range(1, depth + 1))
        return cls(geometry, regs)

    @property
    def depth(self) -> int:
        return len(self.regions)

    def omega(self, j: int) -> Region:
        return self.regions[j - 1]

    def increment(self, j: int) -> Region:
        """``Omega_j - Omega_{j+1}`` (the final region for the last index)."""
        if j == self.depth:
            return self.regions[-1]
        return self.regions[j - 1].difference(self.regions[j])

    def increment_mask(self, j: int) -> np.ndarray:
        return self.increment(j).site_mask(j)

    def component_sites(self, j: int) -> np.ndarray:
        return self.increment(j).sites(j)

    def extend(self, region: Region) -> "RegionSequence":
        return RegionSequence(self.geometry, self.regions + (region,))

    def truncate(self, depth: int) -> "RegionSequence":
        return RegionSequence(self.geometry, self.regions[:depth])

    def to_keyvalue(self) -> str:
        return "\n".join(
            f"omega_{j}.{line}"
            for j, reg in enumerate(self.regions, start=1)
            for line in reg.to_keyvalue().splitlines()
        )


def build_buffer(X: Region, R: int, depth: int | None = None) -> tuple[RegionSequence, bool]:
    """Minimal buffer: Omega_k = X plus R layers of M-cubes, then R layers per finer scale.

    Returns the sequence and a flag telling whether it saturated to the full torus.
    """
    g = X.geometry
    k = g.k if depth is None else depth
    if X.scale != g.cube_exponent(k):
        X = X.coarsen_exact(g.cube_exponent(k)) if X.scale < g.cube_exponent(k) else X.refine(g.cube_exponent(k))
    regs: list[Region] = [X.enlarge(R)]
    for j in range(k - 1, 0, -1):
        regs.append(regs[-1].refine(g.cube_exponent(j)).enlarge(R))
    regs.reverse()
    seq = RegionSequence(g, tuple(regs))
    return seq, regs[0].is_full()


@dataclass
class SeparationCertificate:
    required: list[float]
    achieved: list[float]
    passed: list[bool]

    @property
    def ok(self) -> bool:
        return all(self.passed)


def validate_separation(
    seq: RegionSequence,
    R: float,
    *,
    strong_lambdas: Sequence[Region] | None = None,
    r_layers: Sequence[int] | None = None,
    layer_factor: int = 5,
) -> SeparationCertificate:
    """Check ``d(Omega_j^c, Omega_{j+1}) >= R * L**-(k-j) M`` in physical units.

    In strong mode ``strong_lambdas[j-1]`` is the closure region preceding
    ``Omega_{j+1}`` and the requirement becomes ``layer_factor * r_layers[j-1]``
    cube sides.  Empty complements pass vacuously.
    """
    g = seq.geometry
    req, got, ok = [], [], []
    for j in range(1, seq.depth):
        outer, inner = seq.omega(j), seq.omega(j + 1)
        if strong_lambdas is not None:
            outer = strong_lambdas[j - 1]
            need_layers = layer_factor * (r_layers[j - 1] if r_layers is not None else 1)
        else:
            need_layers = R
        cube = g.L ** g.cube_exponent(j + 1 if strong_lambdas is not None else j)
        need = need_layers * cube * g.spacing
        dist = outer.complement().distance_to(inner) * g.spacing
        req.append(need)
        got.append(dist)
        ok.append(bool(dist >= need - 1e-12))
    return SeparationCertificate(req, got, ok)


def _king_offsets(d: int) -> list[tuple[int, ...]]:
    return [o for o in itertools.product((-1, 0, 1), repeat=d) if any(o) and o > (0,) * d]


def scaled_distance_weights(seq: RegionSequence) -> np.ndarray:
    """Per-site length weight ``L**(k-j)`` on ``δΩ_j`` (``L**k`` outside Omega_1)."""
    g = seq.geometry
    k = g.k
    w = np.full(g.shape, float(g.L) ** k)
    for j in range(1, seq.depth + 1):
        w[seq.increment(j).site_mask(0)] = float(g.L) ** (k - j)
    return w


def scaled_distance_matrix(seq: RegionSequence, sources: Iterable[int] | None = None) -> np.ndarray:
    """Weighted shortest-path distances on the king-move grid graph.

    Each step between neighbouring grid sites costs ``spacing * (w(x) + w(y)) / 2``.
    """
    g = seq.geometry
    w = scaled_distance_weights(seq).ravel()
    idx = np.arange(g.n_sites).reshape(g.shape)
    rows, cols, vals = [], [], []
    for off in _king_offsets(g.d):
        nb = np.roll(idx, shift=tuple(-o for o in off), axis=tuple(range(g.d))).ravel()
        rows.append(idx.ravel())
        cols.append(nb)
        vals.append(g.spacing * 0.5 * (w[idx.ravel()] + w[nb]))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    graph = coo_matrix((v, (r, c)), shape=(g.n_sites, g.n_sites)).tocsr()
    src = None if sources is None else np.asarray(list(sources), dtype=int)
    return dijkstra(graph, directed=False, indices=src)


def scaled_distance(seq: RegionSequence, x: int, y: int) -> float:
    return float(scaled_distance_matrix(seq, [x])[0, y])


def multiscale_sites(seq: RegionSequence) -> np.ndarray:
    return np.concatenate([seq.component_sites(j) for j in range(1, seq.depth + 1)])


def exponential_sum_constant(seq: RegionSequence, delta: float) -> float:
    """Largest ``delta**d * Σ_y exp(-delta d_Ω(x, y))`` over multiscale sites ``x``."""
    sites = multiscale_sites(seq)
    dist = scaled_distance_matrix(seq, sites)[:, sites]
    return float(np.max(np.exp(-delta * dist).sum(axis=1)) * delta**seq.geometry.d)
