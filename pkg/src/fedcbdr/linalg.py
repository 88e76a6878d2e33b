"""Dense linear-algebra kernels: random orthogonal masks, thin SVD, masking."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class LinalgError(ValueError):
    """Base error for invalid inputs to the linalg kernels."""


class InvalidDimensionError(LinalgError):
    pass


class InvalidInputError(LinalgError):
    pass


class MaskKind(str, enum.Enum):
    GENERAL = "GeneralOrthogonal"
    PERMUTATION = "Permutation"


@dataclass(frozen=True)
class OrthogonalMatrix:
    inner: np.ndarray
    kind: MaskKind
    # perm[i] = column holding the 1 in row i; only set for permutations
    perm: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.inner.shape[0]

    @property
    def T(self) -> "OrthogonalMatrix":
        perm = None if self.perm is None else np.argsort(self.perm)
        return OrthogonalMatrix(self.inner.T.copy(), self.kind, perm)


@dataclass(frozen=True)
class FactoredMatrix:
    """Thin factorization ``X = U @ diag(S) @ V.T`` with ``r = min(n, d)``."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def r(self) -> int:
        return self.S.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidDimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidDimensionError(f"{name} must be non-empty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def random_orthogonal(n: int, seed: int, kind: MaskKind | str = MaskKind.GENERAL) -> OrthogonalMatrix:
    """Seeded n x n orthogonal matrix.

    ``GeneralOrthogonal`` orthonormalizes a standard-Gaussian matrix by QR,
    with the signs of R's diagonal folded into Q so the draw is Haar
    distributed. ``Permutation`` is a uniform random permutation matrix.
    """
    kind = MaskKind(kind)
    if n < 1:
        raise InvalidDimensionError(f"orthogonal matrix size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    if kind is MaskKind.PERMUTATION:
        perm = rng.permutation(n)
        inner = np.zeros((n, n))
        inner[np.arange(n), perm] = 1.0
        return OrthogonalMatrix(inner, kind, perm)
    g = rng.standard_normal((n, n))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return OrthogonalMatrix(q * signs, kind)


def thin_svd(x) -> FactoredMatrix:
    x = as_matrix(x, "X")
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    return FactoredMatrix(u, s, vt.T.copy())


def singular_values(x) -> np.ndarray:
    return np.linalg.svd(as_matrix(x, "X"), compute_uv=False)


def apply_mask(p: OrthogonalMatrix, x, q: OrthogonalMatrix) -> np.ndarray:
    """Return ``P @ X @ Q``; permutation masks are applied by row indexing."""
    x = as_matrix(x, "X")
    n, d = x.shape
    if p.n != n or q.n != d:
        raise InvalidDimensionError(
            f"mask shapes ({p.n}x{p.n}, {q.n}x{q.n}) do not fit X of shape {x.shape}"
        )
    left = x[p.perm] if p.perm is not None else p.inner @ x
    if q.perm is not None:
        # (A Q)[:, j] = A[:, i] where Q[i, j] = 1
        return left[:, np.argsort(q.perm)]
    return left @ q.inner
