import numpy as np
import pytest

from robuq.errors import DimensionError
from robuq.hadamard import (
    HadamardPlan,
    block_hadamard_matrix,
    fold_into_weights,
    fwht,
    fwht_inplace,
    hadamard_matrix,
    transform_tokens,
)


def test_order_one_and_two():
    assert np.array_equal(hadamard_matrix(1), [[1.0]])
    h2 = hadamard_matrix(2)
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(h2, [[s, s], [s, -s]], atol=1e-15)


def test_basis_vector_c2():
    np.testing.assert_allclose(fwht(np.array([1.0, 0.0])), [1 / np.sqrt(2), 1 / np.sqrt(2)])


def test_orthogonality_dense():
    h8 = hadamard_matrix(8)
    assert np.abs(h8.T @ h8 - np.eye(8)).max() < 1e-6


@pytest.mark.parametrize("dim", [2, 4, 8, 16, 64, 256, 1024])
def test_fast_matches_dense_oracle(dim):
    rng = np.random.default_rng(dim)
    x = rng.standard_normal(dim)
    dense = hadamard_matrix(dim) @ x
    assert np.abs(fwht(x) - dense).max() < 1e-5


@pytest.mark.parametrize("dim", [2, 16, 129, 1152, 4096])
def test_involution(dim):
    rng = np.random.default_rng(dim)
    x = rng.standard_normal(dim)
    assert np.abs(fwht(fwht(x)) - x).max() < 1e-5


def test_orthogonality_up_to_4096():
    for dim in (2, 64, 1024, 4096):
        h = np.stack([fwht(row) for row in np.eye(dim)])
        assert np.abs(h.T @ h - np.eye(dim)).max() < 1e-5


def test_plan_block_decomposition():
    plan = HadamardPlan.for_dim(1152)
    assert plan.block_size == 128
    assert HadamardPlan.for_dim(64).block_size == 64
    assert HadamardPlan.for_dim(3).block_size == 1  # odd dim degrades to identity
    np.testing.assert_array_equal(fwht(np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])


def test_block_transform_matches_blockdiag_matrix():
    plan = HadamardPlan.for_dim(24)  # 3 blocks of 8
    rng = np.random.default_rng(24)
    x = rng.standard_normal(24)
    dense = block_hadamard_matrix(plan) @ x
    np.testing.assert_allclose(fwht(x, plan), dense, atol=1e-12)


def test_transform_tokens_identity_rows():
    x = np.eye(4)
    y = transform_tokens(x)
    np.testing.assert_allclose(y, hadamard_matrix(4), atol=1e-12)


def test_transform_tokens_eigenstructure():
    # A token equal to a Hadamard row scaled by sqrt(C) maps to a one-hot row.
    c = 16
    h = hadamard_matrix(c)
    token = h[3] * np.sqrt(c)
    y = transform_tokens(token[None, :])
    expected = np.zeros(c)
    expected[3] = np.sqrt(c)
    np.testing.assert_allclose(y[0], expected, atol=1e-10)


def test_norm_preservation_per_token():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((32, 256)) * 3.0
    y = transform_tokens(x)
    before = np.linalg.norm(x, axis=1)
    after = np.linalg.norm(y, axis=1)
    assert np.abs(after - before).max() / before.max() < 1e-6


def test_fold_identity_weight_gives_h():
    np.testing.assert_allclose(fold_into_weights(np.eye(8)), hadamard_matrix(8), atol=1e-12)


def test_fold_algebraic_identity():
    rng = np.random.default_rng(8)
    w = rng.standard_normal((8, 8))
    x = rng.standard_normal(8)
    assert np.abs(fold_into_weights(w) @ fwht(x) - w @ x).max() < 1e-5


def test_fold_twice_recovers():
    rng = np.random.default_rng(9)
    w = rng.standard_normal((6, 16))
    np.testing.assert_allclose(fold_into_weights(fold_into_weights(w)), w, atol=1e-12)


def test_dimension_errors():
    plan = HadamardPlan.for_dim(8)
    with pytest.raises(DimensionError):
        fwht(np.ones(4), plan)
    with pytest.raises(DimensionError):
        transform_tokens(np.ones((2, 4)), plan)
    with pytest.raises(DimensionError):
        hadamard_matrix(12)
    with pytest.raises(DimensionError):
        HadamardPlan(dim=8, block_size=3)


def test_inplace_variant():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(32)
    expected = fwht(x)
    buf = x.copy()
    out = fwht_inplace(buf)
    assert out is buf
    np.testing.assert_array_equal(buf, expected)
    with pytest.raises(DimensionError):
        fwht_inplace(np.ones(8, dtype=np.float32))  # wrong dtype for in-place
