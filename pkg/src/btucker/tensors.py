# Dense K-way tensors and the multilinear algebra used by the Gibbs sampler:
# matricization/refolding, vectorization, Tucker reconstruction, Kronecker
# factor products, and masked design Gram matrices.
#
# Storage convention (fixed for the whole package): a tensor with dimensions
# (n_1, ..., n_K) is stored as a flat float64 array where the mode-1 index
# varies fastest and the mode-K index slowest, i.e. the offset of the 1-based
# multi-index (i_1, ..., i_K) is sum_k (i_k - 1) * prod_{m<k} n_m.  This is
# numpy's Fortran ("F") ordering, and it makes vec(Z) consistent with the
# Kronecker factor ordering U^(K) x ... x U^(1) used everywhere below.

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np


class TensorFormatError(ValueError):
    """Raised when a tensor text file cannot be parsed."""


@dataclass
class DenseTensor:
    """Dense K-way array with an observed/missing mask.

    Attributes
    ----------
    dims : tuple of int
        Mode sizes (n_1, ..., n_K), K >= 2, every dim >= 1.
    values : ndarray, shape (prod(dims),)
        Flat entries in mode-1-fastest order.  Entries at masked-out
        positions are carried along but never read by any computation.
    mask : ndarray of bool, shape (prod(dims),)
        True where the entry is observed.
    """

    dims: tuple
    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2:
            raise ValueError("tensors must have K >= 2 modes")
        if any(d < 1 for d in self.dims):
            raise ValueError("every dimension must be >= 1")
        n = int(np.prod(self.dims))
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size != n:
            raise ValueError(
                f"values has length {self.values.size}, expected {n}"
            )
        if self.mask is None:
            self.mask = np.ones(n, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool).ravel()
            if self.mask.size != n:
                raise ValueError(
                    f"mask has length {self.mask.size}, expected {n}"
                )

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @property
    def n_missing(self) -> int:
        return self.size - self.n_observed

    def to_array(self) -> np.ndarray:
        """K-dimensional view of the values (logical F layout)."""
        return self.values.reshape(self.dims, order="F")

    def mask_array(self) -> np.ndarray:
        return self.mask.reshape(self.dims, order="F")

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Flat values with every masked-out entry replaced by `fill`.

        All sufficient statistics must be computed from this (or from
        explicitly mask-indexed slices) so that unobserved values can never
        leak into the chain.
        """
        return np.where(self.mask, self.values, fill)

    def filled_array(self, fill: float = 0.0) -> np.ndarray:
        return self.filled(fill).reshape(self.dims, order="F")

    def copy(self) -> "DenseTensor":
        return DenseTensor(self.dims, self.values.copy(), self.mask.copy())

    @classmethod
    def from_array(cls, arr: np.ndarray, mask: np.ndarray = None) -> "DenseTensor":
        arr = np.asarray(arr, dtype=np.float64)
        m = None if mask is None else np.asarray(mask, bool).ravel(order="F")
        return cls(arr.shape, arr.ravel(order="F"), m)


def flat_index(index, dims) -> int:
    """Flat offset of a 1-based multi-index, mode-1 index fastest.

    Bijection from {1..n_1} x ... x {1..n_K} onto 0..n-1.
    """
    dims = tuple(int(d) for d in dims)
    if len(index) != len(dims):
        raise IndexError(f"index has {len(index)} components, expected {len(dims)}")
    offset = 0
    stride = 1
    for i, d in zip(index, dims):
        i = int(i)
        if not 1 <= i <= d:
            raise IndexError(f"index component {i} out of range 1..{d}")
        offset += (i - 1) * stride
        stride *= d
    return offset


def multi_index(offset: int, dims) -> tuple:
    """Inverse of flat_index: 1-based multi-index of a flat offset."""
    dims = tuple(int(d) for d in dims)
    n = int(np.prod(dims))
    if not 0 <= offset < n:
        raise IndexError(f"offset {offset} out of range 0..{n - 1}")
    out = []
    for d in dims:
        out.append(offset % d + 1)
        offset //= d
    return tuple(out)


def _check_mode(k: int, ndim: int) -> int:
    if not 0 <= k < ndim:
        raise ValueError(f"mode {k} invalid for a {ndim}-way tensor")
    return k


def matricize(arr: np.ndarray, k: int) -> np.ndarray:
    """Mode-k unfolding: mode-k fibers become the columns.

    The columns follow the standard fiber ordering induced by the flat
    storage convention (remaining modes in increasing order, smallest
    fastest), so that Z_(k) = U^(k) G_(k) W^(-k) holds exactly for
    Tucker-structured Z.  Modes are 0-based here.
    """
    _check_mode(k, arr.ndim)
    return np.moveaxis(arr, k, 0).reshape((arr.shape[k], -1), order="F")


def refold(mat: np.ndarray, k: int, dims) -> np.ndarray:
    """Inverse of matricize: rebuild the K-way array from its mode-k unfolding."""
    dims = tuple(int(d) for d in dims)
    _check_mode(k, len(dims))
    rest = dims[:k] + dims[k + 1:]
    arr = mat.reshape((dims[k],) + rest, order="F")
    return np.moveaxis(arr, 0, k)


def vectorize(arr: np.ndarray) -> np.ndarray:
    """vec(.) under the package storage convention (mode-1 fastest)."""
    return np.asarray(arr).ravel(order="F")


def unvectorize(vec: np.ndarray, dims) -> np.ndarray:
    return np.asarray(vec).reshape(tuple(dims), order="F")


def mode_product(arr: np.ndarray, mat: np.ndarray, k: int) -> np.ndarray:
    """Multiply `arr` along mode k by `mat` (summing over mat's columns)."""
    _check_mode(k, arr.ndim)
    if mat.shape[1] != arr.shape[k]:
        raise ValueError(
            f"mode-{k} product: matrix has {mat.shape[1]} columns, "
            f"tensor mode has size {arr.shape[k]}"
        )
    return np.moveaxis(np.tensordot(mat, arr, axes=(1, k)), 0, k)


def tucker_reconstruct(core: np.ndarray, factors) -> np.ndarray:
    """Full tensor of the Tucker model: core multiplied by a factor matrix
    along each mode.  Entry i equals sum_r g_r prod_k U^(k)[i_k, r_k].
    """
    core = np.asarray(core, dtype=np.float64)
    if len(factors) != core.ndim:
        raise ValueError("need one factor matrix per core mode")
    for k, u in enumerate(factors):
        if u.shape[1] != core.shape[k]:
            raise ValueError(
                f"factor {k} has {u.shape[1]} columns, core mode has "
                f"size {core.shape[k]}"
            )
    out = core
    for k, u in enumerate(factors):
        out = mode_product(out, u, k)
    return out


def kron_exclude(factors, k: int) -> np.ndarray:
    """W^(-k) = (U^(K) x ... x U^(k+1) x U^(k-1) x ... x U^(1))^T.

    Explicit Kronecker product with mode k removed; shape
    (prod_{j!=k} R_j, prod_{j!=k} n_j).  Intended for small instances and
    test oracles; the sampler itself never materializes it at scale.
    """
    _check_mode(k, len(factors))
    if len(factors) < 2:
        raise ValueError("need K >= 2 factors")
    mats = [factors[j] for j in reversed(range(len(factors))) if j != k]
    return reduce(np.kron, mats).T


def design_matrix(factors) -> np.ndarray:
    """W = U^(K) x ... x U^(1), mapping vec(core) to vec(tensor).  Oracle use."""
    return reduce(np.kron, [factors[j] for j in reversed(range(len(factors)))])


def gram_of_design(factors, mask: np.ndarray = None) -> np.ndarray:
    """W^T W restricted to observed rows, without materializing W.

    With no mask this is the Kronecker mixed-product identity
    kron_k(U^(k)T U^(k)); with a mask it accumulates w_i w_i^T over the
    observed flat indices i via per-mode contractions.
    """
    ranks = [u.shape[1] for u in factors]
    r_total = int(np.prod(ranks))
    if mask is None or bool(np.all(mask)):
        grams = [factors[j].T @ factors[j] for j in reversed(range(len(factors)))]
        return reduce(np.kron, grams)
    dims = tuple(u.shape[0] for u in factors)
    x = np.asarray(mask, dtype=np.float64).reshape(dims, order="F")
    for u in factors:
        pair = u[:, :, None] * u[:, None, :]      # (n_k, R_k, R_k)
        x = np.tensordot(x, pair, axes=(0, 0))     # trailing axes (R_k, R_k)
    # x has axes (R_1, R_1', R_2, R_2', ...); regroup into (r, r')
    k2 = x.ndim
    perm = list(range(0, k2, 2)) + list(range(1, k2, 2))
    return x.transpose(perm).reshape((r_total, r_total), order="F")


def masked_mse(truth: DenseTensor, estimate: DenseTensor, eval_mask: np.ndarray) -> float:
    """Mean squared difference over the entries selected by eval_mask."""
    if truth.dims != estimate.dims:
        raise ValueError("tensors must share dimensions")
    eval_mask = np.asarray(eval_mask, dtype=bool).ravel()
    if eval_mask.size != truth.size:
        raise ValueError("eval_mask has wrong length")
    if not eval_mask.any():
        raise ValueError("eval_mask selects no entries")
    d = truth.values[eval_mask] - estimate.values[eval_mask]
    return float(np.mean(d * d))


# ----------------------------------------------------------------------
# Text format: header line "dims: n1 n2 ... nK", then one whitespace-
# separated line per entry "i1 i2 ... iK value" with 1-based indices.
# The token NA in the value column marks a missing entry; indices not
# listed at all are missing too.
# ----------------------------------------------------------------------

def write_tensor_text(t: DenseTensor, path) -> None:
    dims = t.dims
    arr_idx = [multi_index(o, dims) for o in range(t.size)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dims: " + " ".join(str(d) for d in dims) + "\n")
        for off, idx in enumerate(arr_idx):
            head = " ".join(str(i) for i in idx)
            if t.mask[off]:
                fh.write(f"{head} {float(t.values[off])!r}\n")
            else:
                fh.write(f"{head} NA\n")


def read_tensor_text(path) -> DenseTensor:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("dims:"):
            raise TensorFormatError(f"{path}: missing 'dims:' header line")
        try:
            dims = tuple(int(tok) for tok in header[len("dims:"):].split())
        except ValueError as exc:
            raise TensorFormatError(f"{path}: malformed dims header") from exc
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise TensorFormatError(f"{path}: invalid dims {dims}")
        n = int(np.prod(dims))
        values = np.zeros(n)
        mask = np.zeros(n, dtype=bool)
        for lineno, line in enumerate(fh, start=2):
            toks = line.split()
            if not toks:
                continue
            if len(toks) != len(dims) + 1:
                raise TensorFormatError(
                    f"{path}:{lineno}: expected {len(dims)} indices and a value"
                )
            try:
                off = flat_index([int(tok) for tok in toks[:-1]], dims)
            except (ValueError, IndexError) as exc:
                raise TensorFormatError(f"{path}:{lineno}: bad index: {exc}") from exc
            if toks[-1] == "NA":
                mask[off] = False
                continue
            try:
                values[off] = float(toks[-1])
            except ValueError as exc:
                raise TensorFormatError(f"{path}:{lineno}: bad value {toks[-1]!r}") from exc
            mask[off] = True
    return DenseTensor(dims, values, mask)
