"""
Numeric substrate: dense/sparse kernels, normalization, dropout, Adam.

Dense matrices are plain ``numpy.ndarray`` objects of dtype float64.
Sparse matrices use the :class:`SparseMatrix` CSR container defined here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

NORM_EPS = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical seed gives identical stream."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """
    Compressed sparse row matrix.

    Column indices are strictly increasing within each row. The scipy view is
    built lazily and only used as the multiplication kernel.
    """

    rows: int
    cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        offs = np.asarray(self.row_offsets, dtype=np.int64)
        cols = np.asarray(self.col_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if offs.shape != (self.rows + 1,):
            raise ValueError("row_offsets must have rows+1 entries")
        if offs[0] != 0 or np.any(np.diff(offs) < 0) or offs[-1] != len(cols):
            raise ValueError("row_offsets must be nondecreasing from 0 to nnz")
        if len(vals) != len(cols):
            raise ValueError("values and col_indices differ in length")
        if len(cols) and (cols.min() < 0 or cols.max() >= self.cols):
            raise ValueError("column index out of range")
        # strictly increasing columns inside each row
        if len(cols) > 1:
            step = np.diff(cols)
            row_start = np.zeros(len(cols), dtype=bool)
            row_start[offs[:-1][offs[:-1] < len(cols)]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise ValueError("column indices must be strictly increasing within a row")
        object.__setattr__(self, "row_offsets", offs)
        object.__setattr__(self, "col_indices", cols)
        object.__setattr__(self, "values", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @classmethod
    def from_coo(cls, rows: int, cols: int, r, c, v) -> "SparseMatrix":
        """Build from coordinate triplets; duplicate coordinates are summed."""
        m = sp.coo_matrix(
            (np.asarray(v, dtype=np.float64), (np.asarray(r), np.asarray(c))),
            shape=(rows, cols),
        ).tocsr()
        m.sum_duplicates()
        m.sort_indices()
        return cls(rows, cols, m.indptr, m.indices, m.data)

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        a = _as_matrix(a, "a")
        r, c = np.nonzero(a)
        return cls.from_coo(a.shape[0], a.shape[1], r, c, a[r, c])

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n)
        return cls(n, n, np.arange(n + 1), idx, np.ones(n))

    def to_scipy(self) -> sp.csr_matrix:
        if self._csr is None:
            m = sp.csr_matrix(
                (self.values, self.col_indices, self.row_offsets), shape=self.shape
            )
            object.__setattr__(self, "_csr", m)
        return self._csr

    def todense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for i in range(self.rows):
            lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
            out[i, self.col_indices[lo:hi]] = self.values[lo:hi]
        return out

    def row_sums(self) -> np.ndarray:
        return spmm(self, np.ones(self.cols))


def spmm(p: SparseMatrix, x) -> np.ndarray:
    """Sparse-dense product ``p @ x`` (x may also be a vector)."""
    x = np.asarray(x, dtype=np.float64)
    if p.cols != x.shape[0]:
        raise ValueError(f"dimension mismatch: {p.shape} x {x.shape}")
    return np.asarray(p.to_scipy() @ x)


def row_l2_normalize(x, eps: float = NORM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """
    Scale every row to unit Euclidean length.

    Returns the normalized matrix and the raw row norms. Rows whose norm is
    below ``eps`` are divided by ``eps`` instead, so an all-zero row stays zero.
    """
    x = _as_matrix(x, "x")
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    return x / np.maximum(norms, eps)[:, None], norms


def row_l2_normalize_backward(grad_out, x, norms, eps: float = NORM_EPS) -> np.ndarray:
    """
    Adjoint of :func:`row_l2_normalize`.

    Per row: ``(g - (g . z) z) / ||x||`` with ``z = x / ||x||``. Rows with
    norm at or below ``eps`` get zero gradient.
    """
    g = _as_matrix(grad_out, "grad_out")
    x = _as_matrix(x, "x")
    norms = np.asarray(norms, dtype=np.float64)
    if g.shape != x.shape or norms.shape != (x.shape[0],):
        raise ValueError("shape mismatch between grad_out, x and norms")
    live = norms > eps
    safe = np.where(live, norms, 1.0)
    z = x / safe[:, None]
    proj = np.einsum("ij,ij->i", g, z)
    grad = (g - proj[:, None] * z) / safe[:, None]
    grad[~live] = 0.0
    return grad


def dropout_mask(rng: np.random.Generator, rate: float, rows: int, cols: int) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones((rows, cols))
    keep = rng.random((rows, cols)) >= rate
    return keep / (1.0 - rate)


@dataclass
class AdamState:
    size: int
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)
        if len(self.m) != self.size or len(self.v) != self.size:
            raise ValueError("moment vectors must match the parameter size")

    def copy(self) -> "AdamState":
        return AdamState(self.size, self.lr, self.beta1, self.beta2, self.eps,
                         self.step, self.m.copy(), self.v.copy())


def adam_step(params, grads, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.size != state.size:
        raise ValueError(
            f"length mismatch: params {params.size}, grads {grads.size}, state {state.size}"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(state.size, state.lr, state.beta1, state.beta2, state.eps, t, m, v)
