"""Multi-index arithmetic and graded basis enumeration."""

from math import comb, factorial

import numpy as np
import pytest
from hypothesis import given, strategies as st

from skf.polybasis import (
    MomentVector,
    count_basis,
    enumerate_basis,
    enumerate_exact_degree,
    mi_add,
    mi_degree,
    mi_sub,
)
from skf.errors import MissingMoment


def test_enumerate_basis_order_n2_r2():
    basis = enumerate_basis(2, 2)
    assert basis.entries == [(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0)]


def test_enumerate_basis_constant_only():
    basis = enumerate_basis(1, 0)
    assert basis.entries == [(0,)]


def test_enumerate_basis_large_count():
    assert len(enumerate_basis(20, 3)) == 1771


def test_basis_counts_match_independent_formula():
    # binomial identity recomputed from factorials, not math.comb
    for n in range(1, 7):
        for r in range(0, 9):
            expect = factorial(n + r) // (factorial(n) * factorial(r))
            assert len(enumerate_basis(n, r)) == expect
            assert count_basis(n, r) == expect


def test_basis_index_round_trip():
    basis = enumerate_basis(3, 4)
    for k, a in enumerate(basis.entries):
        assert basis.index(a) == k
    with pytest.raises(KeyError):
        basis.index((5, 0, 0))


def test_degree_blocks_are_contiguous():
    basis = enumerate_basis(3, 5)
    for d in range(6):
        block = basis.entries_of_degree(d)
        assert len(block) == comb(d + 2, 2)
        assert all(mi_degree(a) == d for a in block)


def test_mi_add():
    assert mi_add((1, 0), (0, 2)) == (1, 2)
    assert mi_add((0, 0), (3, 1)) == (3, 1)
    assert mi_add((2, 2), (2, 2)) == (4, 4)
    with pytest.raises(ValueError):
        mi_add((1,), (1, 2))


def test_mi_sub():
    assert mi_sub((2, 1), (0, 1)) == (2, 0)
    assert mi_sub((1, 0), (0, 1)) is None
    assert mi_sub((0, 0), (0, 0)) == (0, 0)
    with pytest.raises(ValueError):
        mi_sub((1, 2, 3), (1, 2))


@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(0, 6)),
                min_size=2, max_size=2))
def test_mi_sub_inverts_mi_add(pair):
    a, b = pair
    assert mi_sub(mi_add(a, b), b) == a


def test_enumerate_exact_degree_counts():
    assert len(enumerate_exact_degree(2, 5)) == 6
    assert enumerate_exact_degree(1, 7) == [(7,)]
    assert len(enumerate_exact_degree(3, 2)) == 6
    for n in (1, 2, 4):
        for d in range(7):
            assert len(enumerate_exact_degree(n, d)) == comb(d + n - 1, n - 1)


def test_moment_vector_normalization_enforced():
    basis = enumerate_basis(1, 2)
    with pytest.raises(ValueError):
        MomentVector(basis, [0.9, 0.0, 1.0])
    with pytest.raises(ValueError):
        MomentVector(basis, [1.0, np.nan, 1.0])
    m = MomentVector(basis, [1.0, 0.5, 1.25])
    assert m.get((1,)) == 0.5
    assert m.get(None) == 0.0  # negative multi-index convention
    with pytest.raises(MissingMoment):
        m.get((3,))


def test_moment_vector_mean():
    basis = enumerate_basis(2, 2)
    m = MomentVector(basis, [1.0, -0.25, 0.5, 1.0, 0.0, 1.0])
    assert np.allclose(m.mean(), [0.5, -0.25])
