import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btucker.tensors import (
    DenseTensor,
    TensorFormatError,
    design_matrix,
    flat_index,
    gram_of_design,
    kron_exclude,
    masked_mse,
    matricize,
    mode_product,
    multi_index,
    read_tensor_text,
    refold,
    tucker_reconstruct,
    vectorize,
    write_tensor_text,
)


def brute_tucker_entry(core, factors, idx):
    """Elementwise oracle: sum_r g_r prod_k U^(k)[i_k, r_k] by explicit loops."""
    total = 0.0
    for r in itertools.product(*(range(s) for s in core.shape)):
        term = core[r]
        for k, (i_k, r_k) in enumerate(zip(idx, r)):
            term *= factors[k][i_k, r_k]
        total += term
    return total


# ---------------------------------------------------------------- flat index

def test_flat_index_examples():
    assert flat_index([1, 1, 1], (2, 3, 4)) == 0
    assert flat_index([2, 1, 1], (2, 3, 4)) == 1
    assert flat_index([2, 3, 4], (2, 3, 4)) == 23


def test_flat_index_matches_numpy_fortran_order():
    dims = (2, 3, 4)
    for idx in itertools.product(*(range(1, d + 1) for d in dims)):
        expected = np.ravel_multi_index([i - 1 for i in idx], dims, order="F")
        assert flat_index(idx, dims) == expected
        assert multi_index(int(expected), dims) == idx


def test_flat_index_bounds():
    with pytest.raises(IndexError):
        flat_index([0, 1], (2, 2))
    with pytest.raises(IndexError):
        flat_index([1, 3], (2, 2))
    with pytest.raises(IndexError):
        flat_index([1], (2, 2))


@given(st.lists(st.integers(min_value=1, max_value=4), min_size=2, max_size=4))
@settings(max_examples=50, deadline=None)
def test_flat_index_bijection(dims):
    dims = tuple(dims)
    seen = set()
    for idx in itertools.product(*(range(1, d + 1) for d in dims)):
        off = flat_index(idx, dims)
        assert 0 <= off < int(np.prod(dims))
        seen.add(off)
    assert len(seen) == int(np.prod(dims))


# ---------------------------------------------------------------- matricize

def test_matricize_matrix_examples():
    t = DenseTensor((2, 2), [1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(matricize(t.to_array(), 0), [[1, 3], [2, 4]])
    np.testing.assert_array_equal(matricize(t.to_array(), 1), [[1, 2], [3, 4]])


def test_matricize_refold_roundtrip_exhaustive():
    rng = np.random.default_rng(0)
    for dims in [(3, 4, 2), (2, 2), (2, 3, 2, 2), (1, 5, 2)]:
        arr = rng.normal(size=dims)
        for k in range(len(dims)):
            back = refold(matricize(arr, k), k, dims)
            np.testing.assert_array_equal(back, arr)  # exact, bitwise


def test_matricize_invalid_mode():
    with pytest.raises(ValueError):
        matricize(np.zeros((2, 2)), 2)


# ---------------------------------------------------------------- vectorize

def test_vectorize_identity_on_flat_storage():
    t = DenseTensor((2, 2), [1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(vectorize(t.to_array()), [1, 2, 3, 4])


def test_vectorize_outer_product():
    u = np.array([1.0, 2.0])
    v = np.array([1.0, 10.0])
    t = np.outer(u, v)  # t[i, j] = u_i v_j
    np.testing.assert_array_equal(vectorize(t), [1.0, 2.0, 10.0, 20.0])


def test_vectorize_consistent_with_flat_index():
    dims = (2, 3, 2)
    rng = np.random.default_rng(1)
    t = DenseTensor(dims, rng.normal(size=12))
    arr = t.to_array()
    vec = vectorize(arr)
    for idx in itertools.product(*(range(1, d + 1) for d in dims)):
        zero_based = tuple(i - 1 for i in idx)
        assert vec[flat_index(idx, dims)] == arr[zero_based]


# ------------------------------------------------------- tucker reconstruct

def test_tucker_identity_case():
    eye = np.eye(2)
    out = tucker_reconstruct(eye.copy(), [eye, eye])
    np.testing.assert_allclose(out, eye)


def test_tucker_rank_one_products():
    core = np.ones((1, 1, 1))
    factors = [np.arange(1.0, n + 1).reshape(-1, 1) for n in (3, 4, 2)]
    out = tucker_reconstruct(core, factors)
    for i, j, k in itertools.product(range(3), range(4), range(2)):
        assert out[i, j, k] == (i + 1) * (j + 1) * (k + 1)


def test_tucker_matches_bruteforce_entries():
    rng = np.random.default_rng(2)
    core = rng.normal(size=(2, 3, 2))
    factors = [rng.normal(size=(n, r)) for n, r in zip((3, 4, 2), core.shape)]
    out = tucker_reconstruct(core, factors)
    for idx in itertools.product(range(3), range(4), range(2)):
        np.testing.assert_allclose(
            out[idx], brute_tucker_entry(core, factors, idx), rtol=1e-12
        )


def test_tucker_dimension_mismatch():
    with pytest.raises(ValueError):
        tucker_reconstruct(np.zeros((2, 2)), [np.zeros((3, 2)), np.zeros((3, 3))])


def test_vec_kronecker_identity():
    rng = np.random.default_rng(3)
    core = rng.normal(size=(2, 3, 2))
    factors = [rng.normal(size=(n, r)) for n, r in zip((3, 4, 2), core.shape)]
    z = tucker_reconstruct(core, factors)
    w = design_matrix(factors)
    lhs = vectorize(z)
    rhs = w @ vectorize(core)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * max(1.0, np.linalg.norm(lhs))


def test_matricized_identity_all_modes():
    rng = np.random.default_rng(4)
    core = rng.normal(size=(2, 2, 3))
    factors = [rng.normal(size=(n, r)) for n, r in zip((4, 3, 5), core.shape)]
    z = tucker_reconstruct(core, factors)
    for k in range(3):
        lhs = matricize(z, k)
        rhs = factors[k] @ matricize(core, k) @ kron_exclude(factors, k)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


# ------------------------------------------------------------- kron exclude

def test_kron_exclude_two_modes():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(4, 2))
    u1 = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(kron_exclude([u1, m], 0), m.T)
    np.testing.assert_array_equal(kron_exclude([u1, m], 1), u1.T)


def test_kron_exclude_identity_factors():
    eyes = [np.eye(n) for n in (2, 3, 4)]
    out = kron_exclude(eyes, 1)
    np.testing.assert_array_equal(out, np.eye(8))


def test_kron_exclude_invalid_mode():
    with pytest.raises(ValueError):
        kron_exclude([np.eye(2), np.eye(2)], 2)


# ----------------------------------------------------------- gram of design

def test_gram_orthonormal_factors():
    qs = [np.linalg.qr(np.random.default_rng(6 + n).normal(size=(n, 2)))[0]
          for n in (4, 5, 6)]
    gram = gram_of_design(qs)
    np.testing.assert_allclose(gram, np.eye(8), atol=1e-10)


def test_gram_matches_materialized_w():
    rng = np.random.default_rng(7)
    factors = [rng.normal(size=(n, r)) for n, r in zip((3, 4, 2), (2, 2, 3))]
    w = design_matrix(factors)
    np.testing.assert_allclose(gram_of_design(factors), w.T @ w, atol=1e-10)
    mask = rng.uniform(size=w.shape[0]) < 0.6
    oracle = w[mask].T @ w[mask]
    np.testing.assert_allclose(gram_of_design(factors, mask), oracle, atol=1e-10)


def test_gram_all_missing_is_zero():
    rng = np.random.default_rng(8)
    factors = [rng.normal(size=(3, 2)), rng.normal(size=(4, 2))]
    gram = gram_of_design(factors, np.zeros(12, dtype=bool))
    np.testing.assert_array_equal(gram, np.zeros((4, 4)))


# ---------------------------------------------------------------- masked mse

def test_masked_mse_trivial():
    a = DenseTensor((2, 1), [0.0, 0.0])
    b = DenseTensor((2, 1), [1.0, 3.0])
    assert masked_mse(a, a, np.ones(2, bool)) == 0.0
    assert masked_mse(a, b, np.ones(2, bool)) == 5.0


def test_masked_mse_oracle():
    rng = np.random.default_rng(9)
    dims = (3, 4, 2)
    a = DenseTensor(dims, rng.normal(size=24))
    b = DenseTensor(dims, rng.normal(size=24))
    mask = rng.uniform(size=24) < 0.5
    if not mask.any():
        mask[0] = True
    total = 0.0
    count = 0
    for i in range(24):
        if mask[i]:
            total += (a.values[i] - b.values[i]) ** 2
            count += 1
    np.testing.assert_allclose(masked_mse(a, b, mask), total / count, rtol=1e-12)


def test_masked_mse_empty_mask_errors():
    a = DenseTensor((2, 1), [0.0, 0.0])
    with pytest.raises(ValueError):
        masked_mse(a, a, np.zeros(2, bool))


# ---------------------------------------------------------------- DenseTensor

def test_dense_tensor_validation():
    with pytest.raises(ValueError):
        DenseTensor((4,), [1.0, 2.0, 3.0, 4.0])       # K must be >= 2
    with pytest.raises(ValueError):
        DenseTensor((2, 2), [1.0, 2.0])               # wrong length
    with pytest.raises(ValueError):
        DenseTensor((2, 0), [])                       # dim >= 1


def test_filled_replaces_masked_values_only():
    t = DenseTensor((2, 2), [1.0, 2.0, 3.0, 4.0], [True, False, True, False])
    np.testing.assert_array_equal(t.filled(), [1.0, 0.0, 3.0, 0.0])
    np.testing.assert_array_equal(t.values, [1.0, 2.0, 3.0, 4.0])


# ---------------------------------------------------------------- text format

def test_text_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    dims = (3, 2, 2)
    mask = rng.uniform(size=12) < 0.7
    t = DenseTensor(dims, rng.normal(size=12), mask)
    path = tmp_path / "t.txt"
    write_tensor_text(t, path)
    back = read_tensor_text(path)
    assert back.dims == t.dims
    np.testing.assert_array_equal(back.mask, t.mask)
    np.testing.assert_array_equal(back.values[t.mask], t.values[t.mask])


def test_text_unlisted_indices_are_missing(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("dims: 2 2\n1 1 5.0\n2 2 NA\n", encoding="utf-8")
    t = read_tensor_text(path)
    np.testing.assert_array_equal(t.mask, [True, False, False, False])
    assert t.values[0] == 5.0


def test_text_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("nope\n", encoding="utf-8")
    with pytest.raises(TensorFormatError):
        read_tensor_text(bad)
    bad.write_text("dims: 2 2\n3 1 1.0\n", encoding="utf-8")
    with pytest.raises(TensorFormatError):
        read_tensor_text(bad)
    bad.write_text("dims: 2 2\n1 1 x\n", encoding="utf-8")
    with pytest.raises(TensorFormatError):
        read_tensor_text(bad)


@given(
    st.integers(min_value=2, max_value=4),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=1, max_value=3),
)
@settings(max_examples=25, deadline=None)
def test_mode_product_matches_matrix_action(n, r, m):
    rng = np.random.default_rng(n * 100 + r * 10 + m)
    arr = rng.normal(size=(n, m))
    mat = rng.normal(size=(r, n))
    out = mode_product(arr, mat, 0)
    np.testing.assert_allclose(out, mat @ arr, rtol=1e-12)
