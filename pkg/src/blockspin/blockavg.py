"""Block averaging ``Q_j``, multiscale averaging, adjoints and completions.

Averaging maps the stride ``L**s`` sublattice to the stride ``L**(s+j)``
sublattice by the mean over the ``L**(j*d)`` sites of each block; the block of
a coarse site ``y`` is ``{y + i : 0 <= i_mu < L**(s+j)}`` sampled at stride ``L**s``.
With the weighted inner products of each lattice the adjoint is the
block-constant extension.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .geometry import Field, LatticeGeometry, Region, RegionSequence
from .linalg import DenseOperator


def block_mean(values: np.ndarray, r: int) -> np.ndarray:
    """Mean over aligned blocks of ``r`` sites per side."""
    d = values.ndim
    shape = []
    for size in values.shape:
        if size % r:
            raise ValueError("block side does not divide the lattice")
        shape.extend([size // r, r])
    return values.reshape(shape).mean(axis=tuple(range(1, 2 * d, 2)))


def block_extend(values: np.ndarray, r: int) -> np.ndarray:
    """Block-constant extension (adjoint of ``block_mean`` under lattice weights)."""
    out = values
    for axis in range(values.ndim):
        out = np.repeat(out, r, axis=axis)
    return out


def apply_Q(f: Field, j: int) -> Field:
    """Average ``f`` over blocks of ``L**j`` of its own sites."""
    if j < 0:
        raise ValueError("averaging power must be non-negative")
    g = f.geometry
    vals = block_mean(f.values, g.L**j)
    return Field(g, f.stride + j, vals)


def apply_Q_adjoint(F: Field, j: int) -> Field:
    g = F.geometry
    if F.stride < j:
        raise ValueError("incompatible spacing")
    return Field(g, F.stride - j, block_extend(F.values, g.L**j))


def block_index(geometry: LatticeGeometry, sites: np.ndarray, exponent: int) -> np.ndarray:
    """Flat index of the ``L**exponent`` block containing each grid site."""
    r = geometry.L**exponent
    coords = np.array(np.unravel_index(sites, geometry.shape)) // r
    return np.ravel_multi_index(tuple(coords), (geometry.n // r,) * geometry.d)


def averaging_matrix(
    geometry: LatticeGeometry, rows: np.ndarray, row_stride: int, cols: np.ndarray, col_stride: int
) -> np.ndarray:
    """Dense matrix of ``Q_{row_stride - col_stride}`` between explicit site lists."""
    if row_stride < col_stride:
        raise ValueError("averaging goes to coarser sublattices")
    rb = block_index(geometry, rows, row_stride)
    cb = block_index(geometry, cols, row_stride)
    return (rb[:, None] == cb[None, :]) * float(geometry.L) ** (-geometry.d * (row_stride - col_stride))


def averaging_operator(
    geometry: LatticeGeometry, rows: np.ndarray, row_stride: int, cols: np.ndarray, col_stride: int
) -> DenseOperator:
    mat = averaging_matrix(geometry, rows, row_stride, cols, col_stride)
    return DenseOperator(
        mat,
        cols,
        rows,
        np.full(len(cols), geometry.stride_weight(col_stride)),
        np.full(len(rows), geometry.stride_weight(row_stride)),
    )


@dataclass(frozen=True)
class MultiscaleLayout:
    """Flat indexing of multiscale fields: component ``j`` on ``δΩ_j`` at stride ``L**j``."""

    seq: RegionSequence

    @property
    def geometry(self) -> LatticeGeometry:
        return self.seq.geometry

    @cached_property
    def component_sites(self) -> tuple[np.ndarray, ...]:
        return tuple(self.seq.component_sites(j) for j in range(1, self.seq.depth + 1))

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(s) for s in self.component_sites])])

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def sites(self) -> np.ndarray:
        return np.concatenate(self.component_sites) if self.size else np.zeros(0, dtype=int)

    @cached_property
    def levels(self) -> np.ndarray:
        return np.concatenate(
            [np.full(len(s), j, dtype=int) for j, s in enumerate(self.component_sites, start=1)]
        )

    @cached_property
    def weights(self) -> np.ndarray:
        g = self.geometry
        return np.array([g.stride_weight(int(j)) for j in self.levels])

    def component(self, vec: np.ndarray, j: int) -> np.ndarray:
        return vec[self.offsets[j - 1]:self.offsets[j]]

    def slot(self, j: int) -> slice:
        return slice(int(self.offsets[j - 1]), int(self.offsets[j]))

    def Q_matrix(self, cols: np.ndarray | None = None) -> np.ndarray:
        """Dense ``Q_{k,Ω}`` from grid sites ``cols`` (default: whole torus) to multiscale sites."""
        g = self.geometry
        cols = np.arange(g.n_sites) if cols is None else cols
        blocks = [
            averaging_matrix(g, s, j, cols, 0) for j, s in enumerate(self.component_sites, start=1)
        ]
        return np.vstack(blocks) if blocks else np.zeros((0, len(cols)))

    def Q_operator(self, cols: np.ndarray | None = None) -> DenseOperator:
        g = self.geometry
        cols = np.arange(g.n_sites) if cols is None else cols
        return DenseOperator(
            self.Q_matrix(cols), cols, self.sites, np.full(len(cols), g.site_weight), self.weights
        )


@dataclass(frozen=True)
class MultiscaleField:
    """One value array per increment, each on its own stride sublattice."""

    seq: RegionSequence
    components: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        lay = MultiscaleLayout(self.seq)
        for j, (comp, sites) in enumerate(zip(self.components, lay.component_sites), start=1):
            if len(comp) != len(sites):
                raise ValueError(f"component {j} has {len(comp)} values, expected {len(sites)}")

    @property
    def layout(self) -> MultiscaleLayout:
        return MultiscaleLayout(self.seq)

    def to_vector(self) -> np.ndarray:
        return np.concatenate(self.components) if self.components else np.zeros(0)

    @classmethod
    def from_vector(cls, seq: RegionSequence, vec: np.ndarray) -> "MultiscaleField":
        lay = MultiscaleLayout(seq)
        return cls(seq, tuple(np.array(lay.component(vec, j)) for j in range(1, seq.depth + 1)))


def apply_multiscale_Q(phi: Field, seq: RegionSequence) -> MultiscaleField:
    """``([Q_1 φ]_{δΩ_1}, ..., [Q_k φ]_{Ω_k})`` for a field on the finest lattice."""
    if phi.stride != 0:
        raise ValueError("multiscale averaging starts from the finest lattice")
    comps = []
    for j in range(1, seq.depth + 1):
        avg = apply_Q(phi, j).values
        comps.append(avg[seq.increment_mask(j)])
    return MultiscaleField(seq, tuple(comps))


def completion_matrix(seq: RegionSequence) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``Q_{T^0,Ω}``: multiscale field to the top-stride lattice on ``Omega_1``.

    Component ``j`` is averaged over ``L**(k-j)`` blocks of its own sites.
    Returns the matrix and the target site list.
    """
    g = seq.geometry
    top = seq.depth
    lay = MultiscaleLayout(seq)
    targets = seq.omega(1).sites(top)
    mat = np.zeros((len(targets), lay.size))
    for j, sites in enumerate(lay.component_sites, start=1):
        blk = averaging_matrix(g, targets, top, sites, j)
        mat[:, lay.slot(j)] = blk
    return mat, targets


def completion_compose(seq: RegionSequence, phi: np.ndarray) -> float:
    """Residual of ``Q_{T^0,Ω} Q_{k,Ω} φ = Q_k φ`` on ``Omega_1`` for one field."""
    g = seq.geometry
    lay = MultiscaleLayout(seq)
    comp, targets = completion_matrix(seq)
    lhs = comp @ (lay.Q_matrix() @ phi)
    rhs = block_mean(phi.reshape(g.shape), g.L**seq.depth).ravel()
    rhs = rhs[block_index(g, targets, seq.depth)]
    return float(np.max(np.abs(lhs - rhs))) if len(lhs) else 0.0


@dataclass(frozen=True)
class TildeCompletion:
    exterior: np.ndarray
    exterior_sites: np.ndarray
    field: MultiscaleField


def tilde_completion(Phi: Field, seq: RegionSequence) -> TildeCompletion:
    """Block-constant injection of a top-lattice field into a multiscale field.

    Outside ``Omega_1`` it is ``Q_k^T Φ`` on the finest lattice; on ``δΩ_j`` it is
    ``Q_{k-j}^T Φ`` on the stride ``L**j`` lattice.
    """
    g = seq.geometry
    top = seq.depth
    if Phi.stride != top:
        raise ValueError("tilde completion expects a field on the top lattice")
    fine = block_extend(Phi.values, g.L**top).ravel()
    ext_sites = seq.omega(1).complement().sites(0)
    comps = []
    for j in range(1, top + 1):
        sites = seq.component_sites(j)
        comps.append(fine[sites])
    return TildeCompletion(fine[ext_sites], ext_sites, MultiscaleField(seq, tuple(comps)))


def row_sums(mat: np.ndarray) -> np.ndarray:
    return mat.sum(axis=1)
