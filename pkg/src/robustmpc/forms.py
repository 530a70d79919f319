"""Sparse linear maps from coordinate vectors to structured matrices.

A MatrixForm represents M(x) = sum_c x_c * E_c for a fixed list of sparse
basis matrices E_c.  Structured decision variables (symmetric, diagonal,
skew, causal gain, block triangular) are a coordinate vector plus one or
more forms that embed it into matrices.
"""

from __future__ import annotations

import numpy as np


class MatrixForm:
    """Linear map from ncoords coordinates to a (rows x cols) matrix."""

    __slots__ = ("shape", "entries", "_transpose")

    def __init__(self, shape, entries):
        self.shape = (int(shape[0]), int(shape[1]))
        self.entries = [
            (
                np.asarray(r, dtype=np.intp),
                np.asarray(c, dtype=np.intp),
                np.asarray(v, dtype=float),
            )
            for r, c, v in entries
        ]
        self._transpose = None

    @property
    def ncoords(self) -> int:
        return len(self.entries)

    def value(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=float)
        if coords.shape != (self.ncoords,):
            raise ValueError(f"expected {self.ncoords} coordinates, got {coords.shape}")
        out = np.zeros(self.shape)
        for x, (r, c, v) in zip(coords, self.entries):
            if x != 0.0 and r.size:
                np.add.at(out, (r, c), x * v)
        return out

    @property
    def T(self) -> "MatrixForm":
        if self._transpose is None:
            t = MatrixForm(
                (self.shape[1], self.shape[0]), [(c, r, v) for r, c, v in self.entries]
            )
            t._transpose = self
            self._transpose = t
        return self._transpose


def full_form(rows: int, cols: int) -> MatrixForm:
    """One coordinate per entry, row-major order."""
    entries = [(np.array([i]), np.array([j]), np.array([1.0])) for i in range(rows) for j in range(cols)]
    return MatrixForm((rows, cols), entries)


def symmetric_form(m: int) -> MatrixForm:
    """Coordinates over the upper triangle (i <= j), mirrored below."""
    entries = []
    for i in range(m):
        for j in range(i, m):
            if i == j:
                entries.append(([i], [j], [1.0]))
            else:
                entries.append(([i, j], [j, i], [1.0, 1.0]))
    return MatrixForm((m, m), entries)


def diagonal_form(m: int) -> MatrixForm:
    entries = [(np.array([i]), np.array([i]), np.array([1.0])) for i in range(m)]
    return MatrixForm((m, m), entries)


def skew_form(m: int) -> MatrixForm:
    """Coordinates over i < j with G[i, j] = x and G[j, i] = -x."""
    entries = []
    for i in range(m):
        for j in range(i + 1, m):
            entries.append(([i, j], [j, i], [1.0, -1.0]))
    return MatrixForm((m, m), entries)


def causal_gain_form(N: int, n_u: int, n: int) -> MatrixForm:
    """Strictly causal stacked gain: u_i may read states x_1..x_i.

    The matrix is (N*n_u) x (N*n), block (i, jj) is free exactly when
    jj < i; coordinates run row-major within each allowed block and over
    blocks in (i, jj) lexicographic order.
    """
    entries = []
    for i in range(N):
        for jj in range(i):
            for a in range(n_u):
                for b in range(n):
                    entries.append(([i * n_u + a], [jj * n + b], [1.0]))
    return MatrixForm((N * n_u, N * n), entries)


def block_lower_triangular_form(N: int, n: int, diagonal_only: bool = False) -> MatrixForm:
    """(N*n) x (N*n) matrix with free n x n blocks at (i, jj), jj <= i.

    With diagonal_only=True only the diagonal blocks are free.
    """
    entries = []
    for i in range(N):
        lo = i if diagonal_only else 0
        for jj in range(lo, i + 1):
            for a in range(n):
                for b in range(n):
                    entries.append(([i * n + a], [jj * n + b], [1.0]))
    return MatrixForm((N * n, N * n), entries)


def merge_forms(shape, forms_with_offsets) -> MatrixForm:
    """Concatenate coordinate spaces of sub-forms placed at row/col offsets."""
    entries = []
    for form, (r0, c0) in forms_with_offsets:
        for r, c, v in form.entries:
            entries.append((r + r0, c + c0, v))
    return MatrixForm(shape, entries)
