import itertools

import numpy as np
import pytest

from spde_lab.lattice import DIRICHLET, NEUMANN, GridSpec
from spde_lab.operators import (ImplicitSolver, build_laplacian, explicit_step,
                                implicit_step, spectral_data)


def _dense_kron_oracle(grid):
    # independent Kronecker-sum construction of n^2 * D_n^(d)
    P = grid.points_per_axis
    D1 = np.diag(-2.0 * np.ones(P)) + np.diag(np.ones(P - 1), 1) + np.diag(np.ones(P - 1), -1)
    if grid.bc == NEUMANN:
        D1[0, 0] = D1[-1, -1] = -1.0
    out = np.zeros((P ** grid.d,) * 2)
    for j in range(1, grid.d + 1):
        out += np.kron(np.eye(P ** (grid.d - j)), np.kron(D1, np.eye(P ** (j - 1))))
    return out * grid.n ** 2


def test_dirichlet_n2_single_point():
    g = GridSpec(1, 2, 1)
    L = build_laplacian(g)
    assert L.matrix().shape == (1, 1)
    assert L.matrix()[0, 0] == pytest.approx(-2.0 * 4)


def test_neumann_row_sums_zero():
    g = GridSpec(1, 4, 1, bc=NEUMANN)
    M = build_laplacian(g).matrix()
    assert np.allclose(M.sum(axis=1), 0.0)
    g2 = GridSpec(2, 4, 1, bc=NEUMANN)
    assert np.allclose(build_laplacian(g2).matrix().sum(axis=1), 0.0)


def test_dirichlet_row_sums_nonpositive():
    g = GridSpec(2, 4, 1)
    M = build_laplacian(g).matrix()
    assert np.all(M.sum(axis=1) <= 1e-12)


def test_apply_matches_kron_oracle():
    rng = np.random.default_rng(0)
    for d, bc in itertools.product((1, 2, 3), (DIRICHLET, NEUMANN)):
        g = GridSpec(d, 4, 1, bc=bc)
        L = build_laplacian(g)
        M = _dense_kron_oracle(g)
        assert np.allclose(L.matrix(), M, atol=1e-14)
        v = rng.standard_normal(g.lattice_size)
        assert np.allclose(L.apply(v), M @ v, atol=1e-10)


def test_apply_batched():
    rng = np.random.default_rng(1)
    g = GridSpec(2, 5, 1)
    L = build_laplacian(g)
    V = rng.standard_normal((g.lattice_size, 7))
    out = L.apply(V)
    for c in range(7):
        assert np.allclose(out[:, c], L.apply(V[:, c]))


def test_symmetry_and_negative_semidefiniteness():
    rng = np.random.default_rng(2)
    for bc in (DIRICHLET, NEUMANN):
        g = GridSpec(2, 6, 1, bc=bc)
        L = build_laplacian(g)
        for _ in range(10):
            x = rng.standard_normal(g.lattice_size)
            y = rng.standard_normal(g.lattice_size)
            assert L.apply(x) @ y == pytest.approx(x @ L.apply(y), rel=1e-12, abs=1e-9)
            assert L.apply(x) @ x <= 1e-9
    # Neumann kernel is exactly the constants
    g = GridSpec(1, 8, 1, bc=NEUMANN)
    L = build_laplacian(g)
    ones = np.ones(8)
    assert np.allclose(L.apply(ones), 0.0)
    w = np.linalg.eigvalsh(L.matrix())
    assert np.sum(np.abs(w) < 1e-9) == 1


def test_eigenvalue_closed_form_small():
    # n=2 Dirichlet: lambda_1 = -4*4*sin^2(pi/4) = -8
    g = GridSpec(1, 2, 1)
    s = spectral_data(g)
    assert s.axis_eigenvalues[0] == pytest.approx(-8.0)


def test_eigenvalues_match_dense_solver():
    for n, d, bc in itertools.product((2, 4, 8, 16), (1, 2), (DIRICHLET, NEUMANN)):
        g = GridSpec(d, n, 1, bc=bc)
        s = spectral_data(g)
        dense = np.linalg.eigvalsh(build_laplacian(g).matrix())
        assert np.allclose(np.sort(s.eigenvalues), dense, atol=1e-9)


def test_eigenvectors_are_eigenvectors():
    for bc in (DIRICHLET, NEUMANN):
        g = GridSpec(2, 6, 1, bc=bc)
        s = spectral_data(g)
        L = build_laplacian(g)
        offset = 1 if bc == DIRICHLET else 0
        P = g.points_per_axis
        for k in ((offset, offset), (offset + 1, offset + 2), (P - 1 + offset, offset)):
            v = s.vector(k)
            lam = sum(s.axis_eigenvalues[kj - offset] for kj in k)
            assert np.allclose(L.apply(v), lam * v, atol=1e-8)


def test_c_factors_range():
    for n in (2, 3, 8, 64):
        g = GridSpec(1, n, 1)
        c = spectral_data(g).c_factors()
        assert np.all(c >= 4 / np.pi ** 2 - 1e-12)
        assert np.all(c <= 1.0 + 1e-12)


def test_implicit_step_zero():
    g = GridSpec(1, 8, 4)
    assert np.allclose(implicit_step(np.zeros(7), g), 0.0)


def test_implicit_step_eigenvector_1d():
    g = GridSpec(1, 8, 4, T=1.0)
    s = spectral_data(g)
    phi = s.vector((1,))
    lam = s.axis_eigenvalues[0]
    got = implicit_step(phi, g)
    assert np.allclose(got, phi / (1.0 - g.dt * lam), atol=1e-12)
    # dense cross-check
    A = np.eye(7) - g.dt * _dense_kron_oracle(g)
    assert np.allclose(got, np.linalg.solve(A, phi), atol=1e-12)


def test_implicit_step_matches_dense_lu():
    rng = np.random.default_rng(3)
    for d, bc in itertools.product((1, 2, 3), (DIRICHLET, NEUMANN)):
        n = 6 if d < 3 else 4
        g = GridSpec(d, n, 5, T=0.7, bc=bc)
        A = np.eye(g.lattice_size) - g.dt * _dense_kron_oracle(g)
        rhs = rng.standard_normal(g.lattice_size)
        got = implicit_step(rhs, g)
        assert np.allclose(got, np.linalg.solve(A, rhs), atol=1e-10)
        # residual bound from the contract
        resid = rhs - (got - g.dt * build_laplacian(g).apply(got))
        assert np.max(np.abs(resid)) <= 1e-10 * max(np.max(np.abs(rhs)), 1.0)


def test_implicit_solver_batched():
    rng = np.random.default_rng(4)
    for d in (1, 2):
        g = GridSpec(d, 6, 3, bc=NEUMANN)
        solver = ImplicitSolver(g)
        R = rng.standard_normal((g.lattice_size, 5))
        out = solver.solve(R)
        for c in range(5):
            assert np.allclose(out[:, c], solver.solve(R[:, c]), atol=1e-12)


def test_explicit_step_zero_and_eigenvector():
    g = GridSpec(1, 4, 64)
    assert np.allclose(explicit_step(np.zeros(3), g), 0.0)
    s = spectral_data(g)
    phi = s.vector((1,))
    lam = s.axis_eigenvalues[0]
    assert np.allclose(explicit_step(phi, g), (1.0 + g.dt * lam) * phi, atol=1e-12)


def test_steps_commute():
    rng = np.random.default_rng(5)
    g = GridSpec(2, 5, 50)
    v = rng.standard_normal(g.lattice_size)
    a = explicit_step(implicit_step(v, g), g)
    b = implicit_step(explicit_step(v, g), g)
    assert np.allclose(a, b, atol=1e-12)
