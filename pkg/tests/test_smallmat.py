"""Matrix-kernel tests: trivial identities, independent oracles, invariants.

Oracles used here are deliberately primitive: a truncated Taylor series for
the exponential, cofactor expansion for small inverses, closed-form 2x2
eigenvalues, and the quadrature route cross-checking the Kronecker solve.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smallmass.errors import ConditionError, StabilityError, ValidationError
from smallmass.smallmat import (
    LyapunovSolution,
    expm,
    invert,
    lyapunov_quadrature,
    min_symmetric_eigenvalue,
    solve_lyapunov,
)


def taylor_expm(M, terms=30):
    """30-term Taylor oracle, adequate to 1e-12 for ||M|| <= 1."""
    M = np.asarray(M, dtype=float)
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms + 1):
        term = term @ M / k
        out = out + term
    return out


def adjugate_inverse(A):
    """Cofactor-expansion inverse for d <= 3."""
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    if d == 1:
        return np.array([[1.0 / A[0, 0]]])
    det = np.linalg.det(A)
    cof = np.empty_like(A)
    for i in range(d):
        for j in range(d):
            minor = np.delete(np.delete(A, i, axis=0), j, axis=1)
            cof[i, j] = (-1) ** (i + j) * np.linalg.det(minor)
    return cof.T / det


def random_stable(rng, d, margin=0.3):
    """Random A whose symmetric part is positive definite by at least margin."""
    A = rng.standard_normal((d, d))
    lam = np.linalg.eigvalsh(0.5 * (A + A.T))[0]
    return A + (abs(lam) + margin) * np.eye(d)


# ---------------------------------------------------------------- expm


def test_expm_zero_is_identity():
    assert np.array_equal(expm(np.zeros((3, 3))), np.eye(3))


def test_expm_diagonal():
    a = np.array([0.3, -1.2, 2.0])
    out = expm(np.diag(a))
    assert np.allclose(out, np.diag(np.exp(a)), rtol=1e-13, atol=0)


def test_expm_taylor_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        M = rng.standard_normal((3, 3))
        M *= 1.0 / max(1.0, np.linalg.norm(M, 2))
        assert np.max(np.abs(expm(M) - taylor_expm(M))) <= 1e-12


def test_expm_rejects_nonfinite():
    with pytest.raises(ValidationError):
        expm(np.array([[np.nan, 0.0], [0.0, 1.0]]))


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-2.0, 2.0), min_size=2, max_size=4),
    st.lists(st.floats(-2.0, 2.0), min_size=2, max_size=4),
    st.integers(0, 10_000),
)
def test_expm_commuting_product(diag_a, diag_b, seed):
    # simultaneously diagonalizable pair: exp(A+B) = exp(A) exp(B)
    d = min(len(diag_a), len(diag_b))
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    A = basis @ np.diag(diag_a[:d]) @ basis.T
    B = basis @ np.diag(diag_b[:d]) @ basis.T
    lhs = expm(A + B)
    rhs = expm(A) @ expm(B)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_expm_norm_decay_for_stable_A():
    # computational face of the exp(-lambda t) velocity-damping bound:
    # for sym(A) >= lambda I the norm of expm(-A t) decays monotonically
    rng = np.random.default_rng(11)
    A = random_stable(rng, 4, margin=0.5)
    ts = np.logspace(-2, 1.2, 12)
    norms = [np.linalg.norm(expm(-A * t), 2) for t in ts]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:]))
    lam = min_symmetric_eigenvalue(A)
    # log-slope at the tail should be at least as steep as -lambda
    assert norms[-1] <= np.exp(-lam * ts[-1]) * 10.0


# ------------------------------------------- min_symmetric_eigenvalue


def test_min_sym_eig_identity():
    assert min_symmetric_eigenvalue(np.eye(3)) == pytest.approx(1.0, abs=1e-12)


def test_min_sym_eig_diagonal():
    assert min_symmetric_eigenvalue(np.diag([2.0, 5.0])) == pytest.approx(2.0)


def test_min_sym_eig_nonsymmetric_closed_form():
    # [[2,1],[0,2]] has symmetric part [[2,.5],[.5,2]]; eigenvalues 2 +- 1/2
    val = min_symmetric_eigenvalue(np.array([[2.0, 1.0], [0.0, 2.0]]))
    assert val == pytest.approx(1.5, abs=1e-12)


# ---------------------------------------------------------------- invert


def test_invert_identity():
    assert np.allclose(invert(np.eye(4)), np.eye(4), atol=1e-14)


def test_invert_diagonal():
    out = invert(np.diag([2.0, 4.0]))
    assert np.allclose(out, np.diag([0.5, 0.25]), atol=1e-14)


def test_invert_adjugate_oracle():
    rng = np.random.default_rng(3)
    for d in (1, 2, 3):
        for _ in range(10):
            A = rng.standard_normal((d, d)) + 2.0 * np.eye(d)
            assert np.allclose(invert(A), adjugate_inverse(A), rtol=1e-9, atol=1e-11)


def test_invert_rejects_singular():
    with pytest.raises(ConditionError) as err:
        invert(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert err.value.cond is None or err.value.cond >= 1e12 or not np.isfinite(err.value.cond)


# ------------------------------------------------------------- Lyapunov


def test_lyapunov_scalar():
    sol = solve_lyapunov(np.array([[2.0]]), np.array([[1.0]]))
    assert sol.J[0, 0] == pytest.approx(0.25, abs=1e-14)
    assert sol.residual <= 1e-10 * 2.0


def test_lyapunov_commuting_identity():
    sol = solve_lyapunov(np.eye(3), 2.0 * np.eye(3))
    assert np.allclose(sol.J, np.eye(3), atol=1e-12)


def test_lyapunov_quadrature_scalar():
    out = lyapunov_quadrature(np.array([[2.0]]), np.array([[1.0]]), tol=1e-10)
    assert abs(out[0, 0] - 0.25) <= 1e-8


def test_lyapunov_quadrature_zero_Q():
    out = lyapunov_quadrature(np.eye(2), np.zeros((2, 2)))
    assert np.array_equal(out, np.zeros((2, 2)))


def test_lyapunov_cross_oracle_random_instances():
    # direct Kronecker solve vs integral quadrature, 100 instances d in 1..4
    rng = np.random.default_rng(42)
    for k in range(100):
        d = 1 + k % 4
        A = random_stable(rng, d)
        sigma = rng.standard_normal((d, d))
        Q = sigma @ sigma.T
        sol = solve_lyapunov(A, Q)
        assert sol.residual <= 1e-10 * (1.0 + np.linalg.norm(Q))
        ref = lyapunov_quadrature(A, Q, tol=1e-10)
        assert np.max(np.abs(sol.J - ref)) <= 1e-6


def test_lyapunov_symmetry_and_psd():
    rng = np.random.default_rng(5)
    for _ in range(25):
        d = rng.integers(1, 5)
        A = random_stable(rng, d)
        sigma = rng.standard_normal((d, d))
        Q = sigma @ sigma.T
        sol = solve_lyapunov(A, Q)
        assert np.max(np.abs(sol.J - sol.J.T)) <= 1e-12
        assert np.linalg.eigvalsh(sol.J)[0] >= -1e-12


def test_lyapunov_rejects_unstable():
    with pytest.raises(StabilityError):
        solve_lyapunov(np.array([[-1.0]]), np.array([[1.0]]))
    with pytest.raises(StabilityError):
        lyapunov_quadrature(np.array([[0.0]]), np.array([[1.0]]))


def test_lyapunov_solution_type():
    sol = solve_lyapunov(np.eye(2), np.eye(2))
    assert isinstance(sol, LyapunovSolution)
    assert isinstance(sol.residual, float)
