"""Polymer enumeration, tree lengths and the combinatorial sum bounds.

Polymers are sets of elementary cubes of a :class:`CubeComplex`, stored as
integer bitmasks over the cubes.  A complex is either a plain grid of unit
cubes (optionally periodic) or a multiscale tiling built from a
:class:`~blockspin.geometry.RegionSequence`, where cubes of different sizes
sit side by side.

Lengths are measured in units of the cube side with the sup metric.  The
continuum minimisations behind ``ℓ``, ``ℓ̃`` and ``d_M`` are discretised on
the half-integer grid; every routine reports which quantities are exact.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Iterator, Literal, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra, minimum_spanning_tree

from .geometry import RegionSequence

if os.environ.get("BLOCKSPIN_PURE_PYTHON"):
    _grow_compiled = None
else:
    try:
        from ._core import grow_connected as _grow_compiled
    except ImportError:
        _grow_compiled = None

BACKEND = "python" if _grow_compiled is None else "cython"

Cell = tuple[int, ...]
DEFAULT_CAP = 8
EXACT_LENGTH_CAP = 5


class CapExceeded(ValueError):
    """Requested enumeration or search beyond its safety cap."""


def _bits(mask: int) -> Iterator[int]:
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


def popcount(mask: int) -> int:
    return bin(mask).count("1")


class CubeComplex:
    """Elementary cubes tiling a grid of fine cells, with face adjacency.

    ``block_of`` maps every fine cell to its cube index, or ``-1`` when the
    cell is not part of the complex.
    """

    def __init__(self, block_of: np.ndarray, periodic: bool = False, unit_cubes: bool = False):
        self.block_of = np.asarray(block_of, dtype=int)
        self.periodic = periodic
        self.unit_cubes = unit_cubes
        ids = np.unique(self.block_of[self.block_of >= 0])
        if len(ids) and not np.array_equal(ids, np.arange(len(ids))):
            raise ValueError("cube indices must be 0..n-1")
        self.n_cubes = int(len(ids))

    @classmethod
    def grid(cls, shape: Sequence[int], periodic: bool = False) -> "CubeComplex":
        shape = tuple(int(s) for s in shape)
        return cls(np.arange(math.prod(shape)).reshape(shape), periodic=periodic, unit_cubes=True)

    @classmethod
    def multiscale(cls, seq: RegionSequence) -> "CubeComplex":
        """Cubes of ``Omega_j - Omega_{j+1}`` at their own scale; cells outside ``Omega_1`` use the finest."""
        g = seq.geometry
        fine_scale = g.cube_exponent(1)
        n_fine = g.n // g.L**fine_scale
        idx = np.indices((n_fine,) * g.d)
        level = np.ones((n_fine,) * g.d, dtype=int)
        for j in range(1, seq.depth + 1):
            inside = seq.omega(j).refine(fine_scale).cell_mask
            level[inside] = j
        keys = np.zeros((n_fine,) * g.d + (g.d + 1,), dtype=int)
        keys[..., 0] = level
        for axis in range(g.d):
            keys[..., axis + 1] = idx[axis] // g.L ** (level - 1)
        flat = keys.reshape(-1, g.d + 1)
        _, inverse = np.unique(flat, axis=0, return_inverse=True)
        return cls(inverse.reshape((n_fine,) * g.d), periodic=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.block_of.shape

    @property
    def d(self) -> int:
        return self.block_of.ndim

    @cached_property
    def cells(self) -> list[list[Cell]]:
        out: list[list[Cell]] = [[] for _ in range(self.n_cubes)]
        for c in np.argwhere(self.block_of >= 0):
            out[self.block_of[tuple(c)]].append(tuple(int(x) for x in c))
        return out

    @cached_property
    def neighbors(self) -> list[int]:
        """Bitmask of face neighbours of each cube."""
        nb = [0] * self.n_cubes
        b = self.block_of
        for axis in range(self.d):
            if self.periodic:
                a, c = b, np.roll(b, -1, axis=axis)
            else:
                sl_a = [slice(None)] * self.d
                sl_c = [slice(None)] * self.d
                sl_a[axis] = slice(0, -1)
                sl_c[axis] = slice(1, None)
                a, c = b[tuple(sl_a)], b[tuple(sl_c)]
            pairs = np.stack([a.ravel(), c.ravel()], axis=1)
            pairs = pairs[(pairs[:, 0] >= 0) & (pairs[:, 1] >= 0) & (pairs[:, 0] != pairs[:, 1])]
            for i, j in np.unique(pairs, axis=0):
                nb[i] |= 1 << int(j)
                nb[j] |= 1 << int(i)
        return nb

    @property
    def max_degree(self) -> int:
        return max((popcount(m) for m in self.neighbors), default=0)

    def cube_at(self, cell: Sequence[int]) -> int:
        return int(self.block_of[tuple(cell)])

    def mask_of(self, cells: Iterable[Sequence[int]]) -> int:
        out = 0
        for c in cells:
            out |= 1 << self.cube_at(c)
        return out

    @property
    def full_mask(self) -> int:
        return (1 << self.n_cubes) - 1

    def origin(self, cube: int) -> np.ndarray:
        """Lower corner of a unit cube (grid complexes only)."""
        if not self.unit_cubes:
            raise ValueError("lengths are defined for grids of equal cubes")
        return np.array(self.cells[cube][0], dtype=float)

    def is_connected(self, mask: int) -> bool:
        if mask == 0:
            return True
        start = mask & -mask
        seen = start
        frontier = start
        while frontier:
            nxt = 0
            for i in _bits(frontier):
                nxt |= self.neighbors[i]
            frontier = nxt & mask & ~seen
            seen |= frontier
        return seen == mask

    def components(self, mask: int) -> list[int]:
        out = []
        rest = mask
        while rest:
            start = rest & -rest
            comp = start
            frontier = start
            while frontier:
                nxt = 0
                for i in _bits(frontier):
                    nxt |= self.neighbors[i]
                frontier = nxt & rest & ~comp
                comp |= frontier
            out.append(comp)
            rest &= ~comp
        return out

    def enlarge(self, mask: int) -> int:
        """Add every cube sharing a face with ``mask``."""
        out = mask
        for i in _bits(mask):
            out |= self.neighbors[i]
        return out


@dataclass(frozen=True)
class Polymer:
    complex: CubeComplex = field(compare=False, repr=False, hash=False)
    mask: int

    @property
    def cubes(self) -> tuple[int, ...]:
        return tuple(_bits(self.mask))

    @property
    def size(self) -> int:
        return popcount(self.mask)

    @property
    def connected(self) -> bool:
        return self.complex.is_connected(self.mask)

    def canonical(self) -> str:
        """Text encoding: sorted fine cells of every cube, ``;``-separated."""
        cells = sorted(c for i in self.cubes for c in self.complex.cells[i])
        return ";".join(",".join(str(x) for x in c) for c in cells)

    def shape_key(self) -> tuple[Cell, ...]:
        """Translation-normalised cell tuple (grid complexes)."""
        pts = np.array([self.complex.cells[i][0] for i in self.cubes])
        pts = pts - pts.min(axis=0)
        return tuple(sorted(tuple(int(x) for x in p) for p in pts))


# ---------------------------------------------------------------------------
# holes and mod-hole polymers


def hole_components(cx: CubeComplex, omega_mask: int) -> list[int]:
    """Face-connected components of the complement of ``omega_mask``."""
    return cx.components(cx.full_mask & ~omega_mask)


def is_mod_holes(cx: CubeComplex, mask: int, omega_mask: int) -> bool:
    """Connected and every hole component either contained in or disjoint from the polymer."""
    if not cx.is_connected(mask):
        return False
    for h in hole_components(cx, omega_mask):
        inter = mask & h
        if inter and inter != h:
            return False
    return True


# ---------------------------------------------------------------------------
# enumeration


def grow_connected_py(neighbors: Sequence[int], weights: Sequence[int], cap: int) -> list[int]:
    """Redelmeier growth: every connected node set of total weight <= cap exactly once."""
    out: list[int] = []
    n = len(neighbors)

    def rec(current: int, size: int, untried: int, seen: int) -> None:
        out.append(current)
        while untried:
            low = untried & -untried
            untried ^= low
            v = low.bit_length() - 1
            if size + weights[v] > cap:
                continue
            fresh = neighbors[v] & ~seen
            rec(current | low, size + weights[v], untried | fresh, seen | fresh)

    for root in range(n):
        if weights[root] > cap:
            continue
        below = (1 << root) - 1
        start_nb = neighbors[root] & ~below & ~(1 << root)
        rec(1 << root, weights[root], start_nb, below | (1 << root) | start_nb)
    return out


def _grow_connected(neighbors: Sequence[int], weights: Sequence[int], cap: int) -> list[int]:
    if _grow_compiled is not None and len(neighbors) <= 64:
        return _grow_compiled(neighbors, weights, cap)
    return grow_connected_py(neighbors, weights, cap)


PolymerKind = Literal["connected", "mod_holes", "multiscale"]


def enumerate_polymers(
    cx: CubeComplex,
    size_cap: int,
    kind: PolymerKind = "connected",
    omega_mask: int | None = None,
) -> list[Polymer]:
    """All polymers of at most ``size_cap`` cubes, by growth.

    ``mod_holes`` grows over a contracted graph in which each hole component
    of ``omega_mask`` is a single node weighted by its cube count.
    """
    if size_cap > DEFAULT_CAP:
        raise CapExceeded(f"size cap {size_cap} exceeds {DEFAULT_CAP}")
    if kind in ("connected", "multiscale"):
        masks = _grow_connected(cx.neighbors, [1] * cx.n_cubes, size_cap)
    elif kind == "mod_holes":
        if omega_mask is None:
            raise ValueError("mod_holes enumeration needs omega_mask")
        masks = _grow_mod_holes(cx, omega_mask, size_cap)
    else:
        raise ValueError(f"unknown polymer kind {kind!r}")
    return [Polymer(cx, m) for m in sorted(masks)]


def _grow_mod_holes(cx: CubeComplex, omega_mask: int, cap: int) -> list[int]:
    atoms = [1 << i for i in _bits(omega_mask)] + hole_components(cx, omega_mask)
    owner = {}
    for a, m in enumerate(atoms):
        for i in _bits(m):
            owner[i] = a
    nbrs = []
    for m in atoms:
        nb = 0
        for i in _bits(cx.enlarge(m) & ~m):
            nb |= 1 << owner[i]
        nbrs.append(nb)
    weights = [popcount(m) for m in atoms]
    out = []
    for sel in _grow_connected(nbrs, weights, cap):
        mask = 0
        for a in _bits(sel):
            mask |= atoms[a]
        out.append(mask)
    return out


def enumerate_by_filter(
    cx: CubeComplex,
    size_cap: int,
    predicate: Callable[[int], bool] | None = None,
) -> list[Polymer]:
    """Independent route: every cube subset up to the cap, kept by a predicate and deduplicated by canonical form."""
    if size_cap > DEFAULT_CAP:
        raise CapExceeded(f"size cap {size_cap} exceeds {DEFAULT_CAP}")
    pred = predicate or cx.is_connected
    seen: dict[str, int] = {}
    for n in range(1, size_cap + 1):
        for combo in itertools.combinations(range(cx.n_cubes), n):
            mask = sum(1 << i for i in combo)
            if pred(mask):
                seen.setdefault(Polymer(cx, mask).canonical(), mask)
    return [Polymer(cx, m) for m in sorted(seen.values())]


def polymers_containing(polymers: Iterable[Polymer], cube: int) -> list[Polymer]:
    return [p for p in polymers if p.mask >> cube & 1]


# ---------------------------------------------------------------------------
# labelled trees (Cayley)


def prufer_decode(seq: Sequence[int], n: int) -> list[tuple[int, int]]:
    """Edges of the labelled tree on ``0..n-1`` with Prüfer sequence ``seq``."""
    degree = [1] * n
    for x in seq:
        degree[x] += 1
    edges = []
    for x in seq:
        leaf = min(i for i in range(n) if degree[i] == 1)
        edges.append((min(leaf, x), max(leaf, x)))
        degree[leaf] -= 1
        degree[x] -= 1
    u, v = [i for i in range(n) if degree[i] == 1]
    edges.append((u, v))
    return edges


def labelled_trees(n: int) -> list[list[tuple[int, int]]]:
    if n == 1:
        return [[]]
    if n == 2:
        return [[(0, 1)]]
    return [prufer_decode(s, n) for s in itertools.product(range(n), repeat=n - 2)]


def count_labelled_trees(n: int) -> int:
    """Distinct labelled trees from Prüfer decoding (deduplicated by edge set)."""
    return len({frozenset(t) for t in labelled_trees(n)})


def count_spanning_trees_matrix_tree(n: int) -> int:
    """Kirchhoff count of spanning trees of the complete graph ``K_n``."""
    if n == 1:
        return 1
    lap = n * np.eye(n) - np.ones((n, n))
    return int(round(np.linalg.det(lap[1:, 1:])))


# ---------------------------------------------------------------------------
# tree lengths


def _sup(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a[:, None, :] - b[None, :, :]).max(axis=-1)


def _cube_candidates(origin: np.ndarray, step: float) -> np.ndarray:
    ticks = np.arange(0.0, 1.0 + 1e-12, step)
    pts = np.array(list(itertools.product(ticks, repeat=len(origin))))
    return origin + pts


def _box_distance(points: np.ndarray, origin: np.ndarray) -> np.ndarray:
    """Sup distance from points to the unit cube at ``origin``."""
    gap = np.maximum(origin - points, 0.0) + np.maximum(points - (origin + 1.0), 0.0)
    return gap.max(axis=-1)


def _tree_dp(edges: Sequence[tuple[int, int]], pair_cost: dict[tuple[int, int], np.ndarray], n: int) -> float:
    """Minimum over candidate choices of the total edge cost of a fixed tree."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    order, parent = [0], {0: -1}
    for u in order:
        for v in adj[u]:
            if v not in parent:
                parent[v] = u
                order.append(v)
    size = next(iter(pair_cost.values())).shape[0] if pair_cost else 1
    cost = [np.zeros(size) for _ in range(n)]
    for v in reversed(order[1:]):
        p = parent[v]
        D = pair_cost[(p, v)] if (p, v) in pair_cost else pair_cost[(v, p)].T
        cost[p] = cost[p] + (D + cost[v][None, :]).min(axis=1)
    return float(cost[0].min())


@dataclass(frozen=True)
class TreeMetrics:
    """Lengths in cube units; tags say how each one was obtained."""

    ell_prime: float
    ell: float
    ell_tilde: float
    ell_tilde_lower: float
    size: int
    tags: dict[str, str]

    @property
    def chain_holds(self) -> bool:
        tol = 1e-12
        return self.ell_tilde <= self.ell + tol and self.ell <= self.ell_prime + tol

    def length_comparisons(self, d: int) -> tuple[bool, bool, bool]:
        tol = 1e-12
        return (
            self.ell <= 2 * self.ell_tilde + tol,
            self.ell_prime <= self.ell + self.size + tol,
            self.size <= 4 * (2**d + 1) * (self.ell + 1) + tol,
        )


def centers_mst_length(origins: np.ndarray) -> float:
    """``ℓ'``: minimum spanning tree over cube centres in the sup metric."""
    if len(origins) < 2:
        return 0.0
    D = _sup(origins, origins)
    return float(minimum_spanning_tree(csr_matrix(D)).sum())


def one_point_tree_length(origins: np.ndarray, step: float = 0.5, exact_cap: int = EXACT_LENGTH_CAP) -> tuple[float, str]:
    """``ℓ``: shortest tree with one vertex per cube, searched over all labelled trees.

    Vertices range over the ``step`` grid inside each closed cube.  Above
    ``exact_cap`` cubes only the centre-MST topology is optimised, which is an
    upper bound and tagged ``surrogate``.
    """
    n = len(origins)
    if n < 2:
        return 0.0, "exact"
    cands = [_cube_candidates(o, step) for o in origins]
    pair_cost = {(i, j): _sup(cands[i], cands[j]) for i in range(n) for j in range(i + 1, n)}
    if n <= exact_cap:
        best = min(_tree_dp(t, pair_cost, n) for t in labelled_trees(n))
        return best, "search"
    D = _sup(origins, origins)
    mst = minimum_spanning_tree(csr_matrix(D)).tocoo()
    edges = [(int(min(a, b)), int(max(a, b))) for a, b in zip(mst.row, mst.col)]
    return _tree_dp(edges, pair_cost, n), "surrogate"


def _group_steiner(dist: np.ndarray, group_dist: Sequence[np.ndarray]) -> float:
    """Dreyfus-Wagner over terminal groups with a metric ``dist`` on the nodes.

    ``group_dist[i][v]`` is the distance from node ``v`` to group ``i``.
    """
    k = len(group_dist)
    if k <= 1:
        return 0.0
    full = (1 << k) - 1
    dp: dict[int, np.ndarray] = {}
    for i in range(k):
        dp[1 << i] = np.asarray(group_dist[i], dtype=float)
    for S in sorted(range(1, full + 1), key=popcount):
        if popcount(S) < 2:
            continue
        low = S & -S
        best = np.full(dist.shape[0], np.inf)
        rest = S ^ low
        sub = rest
        # splits T = low | sub' with sub' a proper subset of rest
        while True:
            T = low | sub
            if T != S:
                best = np.minimum(best, dp[T] + dp[S ^ T])
            if sub == 0:
                break
            sub = (sub - 1) & rest
        dp[S] = (best[:, None] + dist).min(axis=0)
    return float(dp[full].min())


def _half_grid(lo: np.ndarray, hi: np.ndarray, step: float) -> np.ndarray:
    axes = [np.arange(a, b + 1e-12, step) for a, b in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)))


def steiner_tree_length(origins: np.ndarray, step: float = 0.5) -> tuple[float, float]:
    """``ℓ̃`` bracket ``(lower, grid value)``.

    The grid value is the exact group Steiner optimum with all vertices on the
    ``step`` grid of the bounding box, an upper bound for the continuum value.
    The lower bound is the largest pairwise cube distance.
    """
    n = len(origins)
    if n < 2:
        return 0.0, 0.0
    pts = _half_grid(origins.min(axis=0), origins.max(axis=0) + 1.0, step)
    dist = _sup(pts, pts)
    groups = [_box_distance(pts, o) for o in origins]
    gap = np.maximum(np.abs(origins[:, None, :] - origins[None, :, :]) - 1.0, 0.0).max(axis=-1)
    return float(gap.max()), _group_steiner(dist, groups)


def tree_lengths(Y: Polymer, step: float = 0.5, cap: int = DEFAULT_CAP) -> TreeMetrics:
    if Y.size > cap:
        raise CapExceeded(f"|Y| = {Y.size} exceeds {cap}")
    cx = Y.complex
    origins = np.array([cx.origin(i) for i in Y.cubes])
    lp = centers_mst_length(origins)
    ell, tag = one_point_tree_length(origins, step)
    lower, tilde = steiner_tree_length(origins, step)
    return TreeMetrics(
        ell_prime=lp,
        ell=ell,
        ell_tilde=tilde,
        ell_tilde_lower=lower,
        size=Y.size,
        tags={"ell_prime": "exact", "ell": tag, "ell_tilde": "grid-steiner"},
    )


# ---------------------------------------------------------------------------
# d_M distances


def _inside_graph(cx: CubeComplex, mask: int, step: float) -> tuple[np.ndarray, csr_matrix]:
    """Grid points in the closed union of cubes, joined by king moves whose midpoint stays inside."""
    origins = np.array([cx.origin(i) for i in _bits(mask)])
    pts = _half_grid(origins.min(axis=0), origins.max(axis=0) + 1.0, step)

    def inside(p: np.ndarray) -> np.ndarray:
        lo = origins[None, :, :] - 1e-12
        hi = origins[None, :, :] + 1.0 + 1e-12
        return ((p[:, None, :] >= lo) & (p[:, None, :] <= hi)).all(axis=-1).any(axis=-1)

    pts = pts[inside(pts)]
    index = {tuple(np.round(p / step).astype(int)): i for i, p in enumerate(pts)}
    rows, cols, vals = [], [], []
    d = pts.shape[1]
    for off in itertools.product((-1, 0, 1), repeat=d):
        if not any(off):
            continue
        o = np.array(off)
        for i, p in enumerate(pts):
            key = tuple(np.round(p / step).astype(int) + o)
            j = index.get(key)
            if j is not None and j > i and inside(((p + pts[j]) / 2)[None, :])[0]:
                rows.append(i)
                cols.append(j)
                vals.append(step)
    graph = csr_matrix((vals, (rows, cols)), shape=(len(pts), len(pts)))
    return pts, graph


def distance_dM(
    X: Polymer,
    omega_mask: int | None = None,
    step: float = 0.5,
) -> tuple[float, str]:
    """``d_M(X)`` or, with ``omega_mask``, ``d_M(X mod Omega^c)``.

    Minimal length of a tree inside ``X`` meeting every cube of ``X ∩ Omega``
    (every cube of ``X`` in plain mode).  Computed as a group Steiner problem
    on the ``step`` grid of ``X`` with paths confined to ``X``; tagged
    ``grid-steiner`` (an upper bound for the continuum value, exact when at
    most two cubes must be met and optimal paths run along the grid).
    """
    cx = X.complex
    targets = X.mask if omega_mask is None else X.mask & omega_mask
    if popcount(targets) <= 1:
        return 0.0, "exact"
    pts, graph = _inside_graph(cx, X.mask, step)
    dist = dijkstra(graph, directed=False)
    groups = []
    for i in _bits(targets):
        member = _box_distance(pts, cx.origin(i)) <= 1e-12
        groups.append(dist[member].min(axis=0))
    return _group_steiner(dist, groups), "grid-steiner"


# ---------------------------------------------------------------------------
# reblocking


def coarse_complex(cx: CubeComplex, factor: int) -> CubeComplex:
    if not cx.unit_cubes or any(s % factor for s in cx.shape):
        raise ValueError("coarse factor must divide the grid")
    return CubeComplex.grid([s // factor for s in cx.shape], periodic=cx.periodic)


def reblock(X: Polymer, factor: int) -> Polymer:
    """Smallest connected union of coarse cubes containing ``X``.

    The coarse cover is used when connected; otherwise the fewest extra coarse
    cubes joining it are added, ties broken by the lexicographically smallest
    choice.
    """
    cx = X.complex
    coarse = coarse_complex(cx, factor)
    cover = coarse.mask_of({tuple(c // factor for c in cx.cells[i][0]) for i in X.cubes})
    if coarse.is_connected(cover):
        return Polymer(coarse, cover)
    others = [i for i in range(coarse.n_cubes) if not cover >> i & 1]
    for extra in range(1, len(others) + 1):
        for combo in itertools.combinations(others, extra):
            m = cover | sum(1 << i for i in combo)
            if coarse.is_connected(m):
                return Polymer(coarse, m)
    raise ValueError("cover cannot be connected")


# ---------------------------------------------------------------------------
# sum bounds


@dataclass
class BoundRow:
    name: str
    kappa: float
    lhs: float
    rhs: float
    holds: bool
    truncated: bool
    note: str = ""


@dataclass
class BoundReport:
    rows: list[BoundRow]
    thresholds: dict[str, float]
    notes: list[str]

    def to_csv(self) -> str:
        head = "name,kappa,lhs,rhs,holds,truncated,note"
        lines = [
            f"{r.name},{r.kappa:.6g},{r.lhs:.12g},{r.rhs:.12g},{int(r.holds)},{int(r.truncated)},{r.note}"
            for r in self.rows
        ]
        return "\n".join([head, *lines]) + "\n"


def size_histogram(masks: Iterable[int]) -> dict[int, int]:
    hist: dict[int, int] = {}
    for m in masks:
        n = popcount(m)
        hist[n] = hist.get(n, 0) + 1
    return hist


def _weighted_sum(hist: dict[int, int], kappa: float, shift: int = 0) -> float:
    return sum(c * math.exp(-kappa * (n - shift)) for n, c in hist.items())


def connected_sum(hist: dict[int, int], kappa: float, tail: Callable[[float], float] | None = None) -> float:
    """``Σ_{X ⊃ □} exp(-κ|X|)`` from the size histogram, plus an optional tail bound."""
    return _weighted_sum(hist, kappa) + (tail(kappa) if tail else 0.0)


def smallest_kappa(holds: Callable[[float], bool], lo: float = 0.0, hi: float = 60.0, iters: int = 60) -> float:
    """Smallest κ on ``[lo, hi]`` past which ``holds`` stays true (bisection on a monotone predicate)."""
    if not holds(hi):
        return math.inf
    if holds(lo):
        return lo
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if holds(mid):
            hi = mid
        else:
            lo = mid
    return hi


def connected_sum_proof_threshold(d: int, L: int) -> float:
    """κ* at which the path-counting argument closes: ½κ* = 2 log(2dL^{d-1}) + log 2."""
    return 2 * (2 * math.log(2 * d * L ** (d - 1)) + math.log(2))


def anchored_histogram(cx: CubeComplex, cube: int, cap: int) -> tuple[dict[int, int], Callable[[float], float]]:
    """Sizes of connected polymers through ``cube`` up to the cap, and a tail bound beyond it.

    The tail counts every cube subset through ``cube`` with more than ``cap``
    cubes, which dominates the connected ones.
    """
    masks = [p.mask for p in polymers_containing(enumerate_polymers(cx, cap), cube)]
    hist = size_histogram(masks)
    n = cx.n_cubes

    def tail(kappa: float) -> float:
        return sum(math.comb(n - 1, s - 1) * math.exp(-kappa * s) for s in range(cap + 1, n + 1))

    return hist, tail


def superset_sum(cx: CubeComplex, X: int, kappa: float) -> float:
    """Primed sum over ``Y ⊃ X`` whose components each contain a component of ``X``."""
    return sum(math.exp(-kappa * n) * c for n, c in superset_histogram(cx, X).items())


def superset_histogram(cx: CubeComplex, X: int) -> dict[int, int]:
    if cx.n_cubes - popcount(X) > 20:
        raise CapExceeded("primed sum enumerates all supersets; grid too large")
    x_comps = cx.components(X)
    free = [i for i in range(cx.n_cubes) if not X >> i & 1]
    hist: dict[int, int] = {}
    for r in range(len(free) + 1):
        for combo in itertools.combinations(free, r):
            Y = X | sum(1 << i for i in combo)
            ok = all(any(c & comp == c for c in x_comps) for comp in cx.components(Y))
            if ok:
                hist[r] = hist.get(r, 0) + 1
    return hist


def superset_sum_bound(cx: CubeComplex, X: int, kappa: float, neighbor_bound: int) -> float:
    return math.exp(math.exp(-0.5 * kappa) * (neighbor_bound + 1) * popcount(X))


def lengths_by_subset(
    cx: CubeComplex, anchor: int, cap: int, step: float = 0.5, with_ell: bool = True
) -> list[tuple[int, float, float]]:
    """``(|Y|, ℓ'(Y), ℓ(Y))`` for every cube subset ``Y ∋ anchor`` up to the cap."""
    cache: dict[tuple, tuple[float, float]] = {}
    out = []
    others = [i for i in range(cx.n_cubes) if i != anchor]
    for r in range(cap):
        for combo in itertools.combinations(others, r):
            Y = Polymer(cx, (1 << anchor) | sum(1 << i for i in combo))
            key = Y.shape_key()
            if key not in cache:
                origins = np.array([cx.origin(i) for i in Y.cubes])
                lp = centers_mst_length(origins)
                ell = one_point_tree_length(origins, step)[0] if with_ell else math.nan
                cache[key] = (lp, ell)
            lp, ell = cache[key]
            out.append((Y.size, lp, ell))
    return out


def distance_terms(cx: CubeComplex, omega_mask: int, anchor: int, cap: int, step: float = 0.5) -> list[float]:
    """``d_M(X mod Omega^c)`` for every mod-hole polymer through ``anchor`` up to the cap."""
    out = []
    for X in polymers_containing(enumerate_polymers(cx, cap, "mod_holes", omega_mask), anchor):
        out.append(distance_dM(X, omega_mask, step)[0])
    return out


def sum_bounds_suite(
    cx: CubeComplex,
    kappas: Sequence[float],
    anchor: int = 0,
    cap: int = DEFAULT_CAP,
    superset_bases: Sequence[int] = (),
    omega_mask: int | None = None,
    length_sum_bound: float | None = None,
    distance_sum_bound: float | None = None,
    length_cap: int = 4,
    distance_cap: int = 6,
) -> BoundReport:
    """Evaluate the four sums over ``kappas`` and locate the smallest κ making each bound hold.

    ``length_sum_bound`` and ``distance_sum_bound`` are the right-hand constants of the two
    bounds whose constants are only stated as order one.  By default each is
    twice the number of zero-length terms, the large-κ limit of its sum.
    """
    rows: list[BoundRow] = []
    thresholds: dict[str, float] = {}
    notes: list[str] = []
    d = cx.d
    nb = cx.max_degree

    hist, tail = anchored_histogram(cx, anchor, cap)
    truncated = cx.n_cubes > cap
    if truncated:
        notes.append(f"connected_sum: enumerated to {cap} cubes, tail bounded by all larger subsets")

    def connected_holds(kap: float) -> bool:
        return connected_sum(hist, kap, tail if truncated else None) <= math.exp(-0.5 * kap)

    for kap in kappas:
        lhs = connected_sum(hist, kap, tail if truncated else None)
        rhs = math.exp(-0.5 * kap)
        rows.append(BoundRow("connected_sum", kap, lhs, rhs, lhs <= rhs, truncated))
    thresholds["connected_sum"] = smallest_kappa(connected_holds)
    thresholds["connected_sum_proof"] = 2 * (2 * math.log(nb) + math.log(2)) if nb > 0 else 0.0

    for X in superset_bases:
        h2 = superset_histogram(cx, X)
        label = f"superset_sum[{popcount(X)}]"

        def superset_holds(kap: float, h2=h2, X=X) -> bool:
            return _weighted_sum(h2, kap) <= superset_sum_bound(cx, X, kap, nb) * (1 + 1e-15)

        for kap in kappas:
            lhs = _weighted_sum(h2, kap)
            rhs = superset_sum_bound(cx, X, kap, nb)
            rows.append(BoundRow(label, kap, lhs, rhs, lhs <= rhs * (1 + 1e-15), False))
        thresholds[label] = smallest_kappa(superset_holds)

    data = lengths_by_subset(cx, anchor, length_cap, with_ell=True)
    if cx.n_cubes > length_cap:
        notes.append(f"length_sums: subsets up to {length_cap} cubes; partial sums only")
    for name, col in (("length_sum_centers", 1), ("length_sum_tree", 2)):
        vals = np.array([row[col] for row in data])
        b = length_sum_bound if length_sum_bound is not None else 2.0 * float(np.sum(vals < 1e-12))
        thresholds[name + "_rhs"] = b

        def length_holds(a: float, vals=vals, b=b) -> bool:
            return float(np.exp(-a * vals).sum()) <= b

        for kap in kappas:
            lhs = float(np.exp(-kap * vals).sum())
            rows.append(BoundRow(name, kap, lhs, b, lhs <= b, cx.n_cubes > length_cap))
        thresholds[name] = smallest_kappa(length_holds)

    if omega_mask is not None and omega_mask >> anchor & 1:
        dm = np.array(distance_terms(cx, omega_mask, anchor, distance_cap))
        trunc = cx.n_cubes > distance_cap
        if trunc:
            notes.append(f"distance_sum: mod-hole polymers up to {distance_cap} cubes; partial sums only")
        K = distance_sum_bound if distance_sum_bound is not None else 2.0 * float(np.sum(dm < 1e-12))
        thresholds["distance_sum_rhs"] = K

        def distance_holds(kap: float) -> bool:
            return float(np.exp(-kap * dm).sum()) <= K

        for kap in kappas:
            lhs = float(np.exp(-kap * dm).sum())
            rows.append(BoundRow("distance_sum", kap, lhs, K, lhs <= K, trunc))
        thresholds["distance_sum"] = smallest_kappa(distance_holds)
    return BoundReport(rows, thresholds, notes)


def multiscale_size(cx: CubeComplex, X: Polymer) -> int:
    """``|X|_Ω``: number of elementary cubes of any scale in ``X``."""
    return X.size
