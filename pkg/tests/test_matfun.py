import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from collective_steer.errors import DomainError, MatrixOverflowError, NotInGLPlusError
from collective_steer.matfun import (
    as_rotation,
    as_spd,
    expm,
    logm_rotation,
    logm_spd,
    min_singular_value,
    operator_norm,
    polar,
    right_polar,
    sqrtm_spd,
)
from conftest import OMEGA, ROT45, random_gl_plus, random_rotation, random_spd

seeds = st.integers(0, 2**32 - 1)


def series_expm(M, terms=40):
    """Taylor series summed term by term."""
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms):
        term = term @ M / k
        out = out + term
    return out


# ---------------------------------------------------------------- expm

def test_expm_of_zero_is_identity():
    assert np.array_equal(expm(np.zeros((3, 3))), np.eye(3))


@pytest.mark.parametrize("t", [0.0, 0.3, 1.0, 7.5, -2.0])
def test_expm_nilpotent_matches_series(t):
    N = np.array([[0.0, 1.0], [0.0, 0.0]]) * t
    np.testing.assert_allclose(expm(N), series_expm(N), rtol=0, atol=1e-14)
    np.testing.assert_allclose(expm(N), [[1.0, t], [0.0, 1.0]], rtol=0, atol=1e-14)


def test_expm_quarter_turn_rotation():
    np.testing.assert_allclose(expm(math.pi / 4 * OMEGA), ROT45, atol=1e-15)


@given(seeds, st.integers(1, 8), st.floats(0.01, 20.0))
@settings(max_examples=60, deadline=None)
def test_expm_diagonalizable_closed_form(seed, n, scale):
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n, n)) + 3 * np.eye(n)
    lam = rng.uniform(-1, 1, n) * scale
    M = V @ np.diag(lam) @ np.linalg.inv(V)
    expected = V @ np.diag(np.exp(lam)) @ np.linalg.inv(V)
    cond = np.linalg.cond(V)
    assert np.linalg.norm(expm(M) - expected) <= 1e-12 * cond**2 * np.linalg.norm(expected) * max(1, scale)


@given(seeds, st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_expm_agrees_with_scipy(seed, n):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n)) * rng.uniform(0.001, 6)
    ref = scipy.linalg.expm(M)
    assert np.linalg.norm(expm(M) - ref) <= 1e-12 * np.linalg.norm(ref) * max(1, np.linalg.norm(M))


def test_expm_is_batched():
    rng = np.random.default_rng(1)
    stack = rng.standard_normal((4, 3, 3, 3)) * np.array([0.001, 0.5, 3.0, 40.0])[:, None, None, None]
    out = expm(stack)
    for idx in np.ndindex(4, 3):
        np.testing.assert_allclose(out[idx], expm(stack[idx]), rtol=1e-13, atol=1e-13)


def test_expm_overflow_is_signalled():
    with pytest.raises(MatrixOverflowError):
        expm(np.array([[800.0]]))


def test_expm_rejects_non_finite():
    with pytest.raises(DomainError):
        expm(np.array([[np.nan]]))


# ---------------------------------------------------------------- logarithms

def test_logm_spd_examples():
    assert np.array_equal(logm_spd(np.eye(3)), np.zeros((3, 3)))
    np.testing.assert_allclose(logm_spd(np.diag([math.e, math.e**2])), np.diag([1.0, 2.0]), atol=1e-15)


@given(seeds, st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_logm_spd_round_trip(seed, n):
    P = random_spd(np.random.default_rng(seed), n)
    S = logm_spd(P)
    assert np.array_equal(S, S.T)
    assert np.linalg.norm(expm(S) - P, 2) / np.linalg.norm(P, 2) <= 1e-10


def test_logm_spd_rejects_indefinite():
    with pytest.raises(DomainError):
        logm_spd(np.diag([1.0, -1.0]))


def test_logm_rotation_examples():
    assert np.allclose(logm_rotation(np.eye(3)), 0.0, atol=1e-15)
    np.testing.assert_allclose(logm_rotation(ROT45), math.pi / 4 * OMEGA, atol=1e-15)


@given(seeds, st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_logm_rotation_round_trip(seed, n):
    Q = random_rotation(np.random.default_rng(seed), n)
    L = logm_rotation(Q)
    np.testing.assert_allclose(L, -L.T, atol=0)
    assert np.linalg.norm(expm(L) - Q, 2) <= 1e-10
    # principal branch: eigen-angles in (-pi, pi]
    assert np.max(np.abs(np.linalg.eigvals(L).imag)) <= math.pi + 1e-12


def test_logm_rotation_half_turn_takes_plus_pi():
    L = logm_rotation(-np.eye(2))
    np.testing.assert_allclose(expm(L), -np.eye(2), atol=1e-14)
    np.testing.assert_allclose(np.abs(L[1, 0]), math.pi, atol=1e-12)
    # -I in dimension 4: two half-turns
    L4 = logm_rotation(-np.eye(4))
    np.testing.assert_allclose(expm(L4), -np.eye(4), atol=1e-13)


def test_logm_rotation_rejects_reflections_and_non_orthogonal():
    with pytest.raises(NotInGLPlusError):
        logm_rotation(np.diag([1.0, -1.0]))
    with pytest.raises(DomainError):
        logm_rotation(np.array([[1.0, 0.1], [0.0, 1.0]]))


# ---------------------------------------------------------------- square roots, polar

def test_sqrtm_spd_examples():
    np.testing.assert_allclose(sqrtm_spd(np.eye(2)), np.eye(2), atol=0)
    np.testing.assert_allclose(sqrtm_spd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-15)
    W = np.array([[1 / 3, -1 / 2], [-1 / 2, 1.0]])
    R = sqrtm_spd(W)
    assert np.linalg.norm(R @ R - W, 2) <= 1e-12
    assert np.all(np.linalg.eigvalsh(R) > 0)


def test_polar_examples():
    P, Q = polar(np.eye(3))
    np.testing.assert_allclose(P, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(Q, np.eye(3), atol=1e-15)
    P, Q = polar(2 * ROT45)
    np.testing.assert_allclose(P, 2 * np.eye(2), atol=1e-14)
    np.testing.assert_allclose(Q, ROT45, atol=1e-15)


def test_polar_of_worked_spd_pair_is_the_rotation():
    s = (math.sqrt(17) - 3) / 4
    S1 = np.array([[1, s], [s, 2 * s * s]])
    S2 = np.array([[2 * s * s, s], [s, 1]])
    _, Q = polar(S2 @ S1)
    np.testing.assert_allclose(Q, ROT45, atol=1e-14)


@given(seeds, st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_polar_reconstruction_and_factor_types(seed, n):
    M = random_gl_plus(np.random.default_rng(seed), n)
    P, Q = polar(M)
    assert np.linalg.norm(P @ Q - M, 2) / np.linalg.norm(M, 2) <= 1e-10
    as_spd(P)
    as_rotation(Q)
    # defining identities P = sqrtm(M M^T), Q = P^{-1} M
    assert np.linalg.norm(P - sqrtm_spd(M @ M.T), 2) <= 1e-9 * np.linalg.norm(P, 2)
    Qr, Pr = right_polar(M)
    assert np.linalg.norm(Qr @ Pr - M, 2) / np.linalg.norm(M, 2) <= 1e-10
    np.testing.assert_allclose(Qr, Q, atol=1e-8 * np.linalg.cond(M))


def test_polar_rejects_negative_determinant():
    with pytest.raises(NotInGLPlusError, match="not in GL\\+"):
        polar(np.diag([1.0, -2.0]))


# ---------------------------------------------------------------- singular values

def test_min_singular_value_examples():
    assert min_singular_value(np.eye(3)) == pytest.approx(1.0)
    assert min_singular_value(np.zeros((2, 2))) == 0.0
    assert min_singular_value(np.diag([3.0, 0.5])) == pytest.approx(0.5)


def _power_iteration(G, iters=5000):
    v = np.ones(G.shape[0]) / math.sqrt(G.shape[0])
    for _ in range(iters):
        v = G @ v
        v /= np.linalg.norm(v)
    return float(v @ G @ v)


@pytest.mark.parametrize("seed", range(10))
def test_singular_values_against_power_iteration(seed):
    M = np.random.default_rng(seed).standard_normal((5, 5))
    G = M.T @ M
    big = math.sqrt(_power_iteration(G))
    small = math.sqrt(1.0 / _power_iteration(np.linalg.inv(G)))
    assert abs(operator_norm(M) - big) <= 1e-8 * big
    assert abs(min_singular_value(M) - small) <= 1e-8 * big


def test_tolerance_projection():
    P = np.diag([2.0, 3.0])
    P[0, 1] = 1e-10
    assert np.array_equal(as_spd(P), as_spd(P).T)
    with pytest.raises(DomainError):
        as_spd(np.array([[2.0, 1e-3], [0.0, 3.0]]))
    Q = ROT45 + 1e-10
    R = as_rotation(Q)
    assert np.linalg.norm(R.T @ R - np.eye(2)) <= 1e-14
