"""Dense operators between weighted site sets, and dense Gaussian integrals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla


@dataclass(frozen=True)
class DenseOperator:
    """Linear map acting on value vectors, with inner-product weights on each side.

    ``matrix[i, j]`` is the coefficient of input site ``dom[j]`` in output site
    ``cod[i]``.  The bilinear form is ``<F, A f>_cod = F @ diag(cod_w) @ matrix @ f``.
    """

    matrix: np.ndarray
    dom: np.ndarray
    cod: np.ndarray
    dom_w: np.ndarray
    cod_w: np.ndarray

    def __post_init__(self) -> None:
        if self.matrix.shape != (len(self.cod), len(self.dom)):
            raise ValueError("matrix shape does not match the site sets")
        if len(self.dom_w) != len(self.dom) or len(self.cod_w) != len(self.cod):
            raise ValueError("weights do not match the site sets")

    @classmethod
    def square(cls, matrix: np.ndarray, sites: np.ndarray, weights: np.ndarray) -> "DenseOperator":
        return cls(np.asarray(matrix, dtype=float), sites, sites, weights, weights)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ f

    def adjoint(self) -> "DenseOperator":
        adj = (self.matrix * self.cod_w[:, None]).T / self.dom_w[:, None]
        return DenseOperator(adj, self.cod, self.dom, self.cod_w, self.dom_w)

    def compose(self, other: "DenseOperator") -> "DenseOperator":
        """``self ∘ other``; requires matching site sets."""
        if not np.array_equal(self.dom, other.cod):
            raise ValueError("site sets do not match for composition")
        return DenseOperator(self.matrix @ other.matrix, other.dom, self.cod, other.dom_w, self.cod_w)

    def form(self) -> np.ndarray:
        """Gram matrix of the bilinear form ``<F, A f>_cod``."""
        return self.cod_w[:, None] * self.matrix

    def symmetry_defect(self) -> float:
        f = self.form()
        return float(np.max(np.abs(f - f.T))) if f.size else 0.0

    def inverse(self) -> "DenseOperator":
        if not np.array_equal(self.dom, self.cod):
            raise ValueError("inverse needs a square operator")
        return DenseOperator(np.linalg.inv(self.matrix), self.cod, self.dom, self.cod_w, self.dom_w)


def inner(u: np.ndarray, v: np.ndarray, w: np.ndarray | float) -> float:
    return float(np.sum(np.asarray(w) * u * v))


def gaussian_log_integral(A: np.ndarray, b: np.ndarray) -> float:
    """``log ∫ exp(-x·Ax/2 + b·x) dx`` for symmetric positive definite ``A``."""
    n = A.shape[0]
    if n == 0:
        return 0.0
    chol = sla.cho_factor(A, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    sol = sla.cho_solve(chol, b)
    return 0.5 * n * np.log(2 * np.pi) - 0.5 * logdet + 0.5 * float(b @ sol)


@dataclass
class GaussianDensity:
    """``exp(-x·A x/2 + b·x + c)`` over labelled variables (labels are opaque keys)."""

    labels: list
    A: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def index(self, labels) -> np.ndarray:
        pos = {lab: i for i, lab in enumerate(self.labels)}
        return np.array([pos[lab] for lab in labels], dtype=int)

    def log_value(self, x: np.ndarray) -> float:
        return float(-0.5 * x @ self.A @ x + self.b @ x + self.c)

    def log_value_at(self, assignment: dict) -> float:
        x = np.array([assignment[lab] for lab in self.labels])
        return self.log_value(x)

    def integrate_out(self, labels) -> "GaussianDensity":
        """Integrate the named variables against Lebesgue measure on their values."""
        out = self.index(labels)
        keep = np.setdiff1d(np.arange(len(self.labels)), out)
        Aoo = self.A[np.ix_(out, out)]
        Aok = self.A[np.ix_(out, keep)]
        Akk = self.A[np.ix_(keep, keep)]
        chol = sla.cho_factor(Aoo, lower=True)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
        inv_Aok = sla.cho_solve(chol, Aok)
        inv_bo = sla.cho_solve(chol, self.b[out])
        A_new = Akk - Aok.T @ inv_Aok
        b_new = self.b[keep] - Aok.T @ inv_bo
        c_new = (
            self.c
            + 0.5 * len(out) * np.log(2 * np.pi)
            - 0.5 * logdet
            + 0.5 * float(self.b[out] @ inv_bo)
        )
        return GaussianDensity([self.labels[i] for i in keep], 0.5 * (A_new + A_new.T), b_new, c_new)

    def multiply(self, other: "GaussianDensity") -> "GaussianDensity":
        """Product of two densities over the union of their labels."""
        labels = list(self.labels) + [lab for lab in other.labels if lab not in set(self.labels)]
        n = len(labels)
        A = np.zeros((n, n))
        b = np.zeros(n)
        for dens in (self, other):
            pos = np.array([labels.index(lab) for lab in dens.labels], dtype=int)
            A[np.ix_(pos, pos)] += dens.A
            b[pos] += dens.b
        return GaussianDensity(labels, A, b, self.c + other.c)

    def substitute_scale(self, factor: float, relabel=None) -> "GaussianDensity":
        """Density ``factor**n * rho(factor * x)``: preserves the total integral."""
        n = len(self.labels)
        labels = self.labels if relabel is None else [relabel(lab) for lab in self.labels]
        return GaussianDensity(
            labels, self.A * factor**2, self.b * factor, self.c + n * np.log(factor)
        )
