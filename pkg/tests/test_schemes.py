import numpy as np
import pytest

from spde_lab.lattice import NEUMANN, GridSpec, LatticeField
from spde_lab.noise import NoiseModel, NoiseSlab, build_covariance, \
    sample_slab_sequence
from spde_lab.operators import build_laplacian, spectral_data
from spde_lab.schemes import (EXPLICIT, IMPLICIT, CoefficientSet,
                              InitialCondition, SchemeOverflowError,
                              SchemeRun, StabilityError, Trajectory,
                              load_trajectory_binary, run, step_explicit,
                              step_implicit)


def _zero_run(grid, kind=IMPLICIT, **kw):
    return SchemeRun(grid, CoefficientSet.zero(),
                     InitialCondition("zero"), kind=kind, **kw)


# --- coefficient families -----------------------------------------------


def test_coefficient_families():
    c = CoefficientSet(("constant", 3.0), ("affine", 2.0, -1.0))
    u = np.array([0.0, 1.0, -2.0])
    assert np.allclose(c.sigma(0.0, None, u), 3.0)
    assert np.allclose(c.b(0.0, None, u), 2.0 * u - 1.0)
    cos = CoefficientSet(("cosine", 0.5, 2.0), ("constant", 0.0))
    assert np.allclose(cos.sigma(0.0, None, u), 0.5 + 2.0 * np.cos(u))


def test_coefficient_validation():
    with pytest.raises(ValueError):
        CoefficientSet(("constant", 1.0, 2.0), ("constant", 0.0))
    with pytest.raises(ValueError):
        CoefficientSet(("affine", 1.0), ("constant", 0.0))
    with pytest.raises(ValueError):
        CoefficientSet(("quadratic", 1.0), ("constant", 0.0))


def test_lipschitz_bound():
    c = CoefficientSet(("affine", -3.0, 0.5), ("cosine", 10.0, 2.0))
    L = c.lipschitz_bound()
    assert L == pytest.approx(10.0)
    rng = np.random.default_rng(5)
    u, v = rng.standard_normal((2, 400)) * 10
    for f in (c.sigma, c.b):
        assert np.all(np.abs(f(0, None, u) - f(0, None, v))
                      <= L * np.abs(u - v) + 1e-12)
    c2 = CoefficientSet(("constant", 99.0), ("constant", -5.0))
    assert c2.lipschitz_bound() == 0.0


def test_coefficients_batched_shape():
    c = CoefficientSet(("affine", 1.0, 1.0), ("constant", 2.0))
    U = np.ones((5, 3))
    assert c.sigma(0.0, None, U).shape == (5, 3)
    assert c.b(0.0, None, U).shape == (5, 3)


# --- initial conditions --------------------------------------------------


def test_initial_families():
    g = GridSpec(2, 4, 1)
    pts = g.lattice_points()
    ic = InitialCondition("sine_product")
    assert np.allclose(ic.sample(g),
                       np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1]))
    bump = InitialCondition("bump").sample(g)
    assert np.allclose(bump, np.prod(pts * (1 - pts), axis=1))
    assert np.all(InitialCondition("zero").sample(g) == 0.0)


def test_initial_table():
    g = GridSpec(1, 5, 1)
    vals = np.arange(4.0)
    ic = InitialCondition("table", vals)
    out = ic.sample(g)
    assert np.array_equal(out, vals)
    out[0] = 99.0
    assert ic.sample(g)[0] == 0.0  # sample returns a copy

    with pytest.raises(ValueError):
        InitialCondition("table", np.zeros(3)).sample(g)
    with pytest.raises(ValueError):
        InitialCondition("table")
    with pytest.raises(ValueError):
        InitialCondition("zero", np.zeros(4))
    with pytest.raises(ValueError):
        InitialCondition("gaussian")


# --- construction guards -------------------------------------------------


def test_explicit_stability_guard():
    # n^2 T / m = 100/100 = 1 > 0.45
    with pytest.raises(StabilityError) as err:
        _zero_run(GridSpec(1, 10, 100), kind=EXPLICIT)
    assert "n^2 T/m" in str(err.value)
    # boundary case passes: 100/250 = 0.4 <= 0.45
    _zero_run(GridSpec(1, 10, 250), kind=EXPLICIT)
    # implicit never restricted
    _zero_run(GridSpec(1, 10, 100), kind=IMPLICIT)


def test_stability_threshold_must_be_below_half():
    with pytest.raises(StabilityError):
        _zero_run(GridSpec(1, 2, 1000), kind=EXPLICIT, q=0.5)
    _zero_run(GridSpec(1, 2, 1000), kind=EXPLICIT, q=0.49)


def test_recorded_levels_validation():
    g = GridSpec(1, 4, 8)
    r = _zero_run(g, recorded_levels=[8, 0, 4, 4])
    assert r.recorded_levels == [0, 4, 8]
    with pytest.raises(ValueError):
        _zero_run(g, recorded_levels=[9])
    with pytest.raises(ValueError):
        SchemeRun(g, CoefficientSet.zero(), InitialCondition("zero"),
                  noise_model=NoiseModel("riesz", 2, 0.5))
    with pytest.raises(ValueError):
        _zero_run(g, kind="midpoint")


# --- deterministic runs --------------------------------------------------


def test_zero_everything_stays_zero():
    g = GridSpec(2, 4, 6)
    traj = run(_zero_run(g))
    assert traj.levels == list(range(7))
    for lv in traj.levels:
        assert np.all(traj[lv].values == 0.0)
        assert traj[lv].t == pytest.approx(lv * g.dt)


def test_constant_drift_matches_dense_oracle():
    # sigma = 0, b = c: both schemes are affine recursions on the lattice
    c = 0.7
    coeffs = CoefficientSet(("constant", 0.0), ("constant", c))
    for bc in (None, NEUMANN):
        kw = {} if bc is None else {"bc": bc}
        g = GridSpec(2, 4, 5, **kw)
        L = build_laplacian(g).matrix()
        A = np.eye(g.lattice_size) - g.dt * L
        ic = InitialCondition("bump")
        u = ic.sample(g)
        traj = run(SchemeRun(g, coeffs, ic, kind=IMPLICIT))
        for i in range(g.m):
            u = np.linalg.solve(A, u + g.dt * c)
            assert np.allclose(traj[i + 1].values, u, atol=1e-12)

    g = GridSpec(1, 4, 40)  # 16/40 = 0.4 passes the explicit guard
    L = build_laplacian(g).matrix()
    u = InitialCondition("bump").sample(g)
    traj = run(SchemeRun(g, coeffs, InitialCondition("bump"), kind=EXPLICIT))
    for i in range(g.m):
        u = u + g.dt * (L @ u) + g.dt * c
        assert np.allclose(traj[i + 1].values, u, atol=1e-12)


def test_eigenvector_closed_form():
    g = GridSpec(1, 8, 160)  # 64/160 = 0.4 passes the explicit guard
    spec = spectral_data(g)
    lam = spec.eigenvalues[0]
    v = spec.vector((1,))
    ic = InitialCondition("table", v)
    imp = run(SchemeRun(g, CoefficientSet.zero(), ic, kind=IMPLICIT))
    exp = run(SchemeRun(g, CoefficientSet.zero(), ic, kind=EXPLICIT))
    for i in (1, 7, 32):
        assert np.allclose(imp[i].values, (1 - g.dt * lam) ** (-i) * v,
                           atol=1e-12)
        assert np.allclose(exp[i].values, (1 + g.dt * lam) ** i * v,
                           atol=1e-12)


def test_implicit_maximum_principle():
    # no forcing: iterates stay within the initial range and contract
    g = GridSpec(1, 16, 20)
    traj = run(SchemeRun(g, CoefficientSet.zero(),
                         InitialCondition("bump"), kind=IMPLICIT))
    sup = [s for _, s in traj.sup_norms()]
    assert all(traj[lv].values.min() >= -1e-15 for lv in traj.levels)
    assert all(b <= a + 1e-15 for a, b in zip(sup, sup[1:]))


def test_time_refinement_shrinks_error():
    # semigroup error against the spatially-discrete exact solution
    g_ref = GridSpec(1, 8, 1)
    spec = spectral_data(g_ref)
    lam = spec.eigenvalues[0]
    v = spec.vector((1,))
    exact = np.exp(lam * 1.0) * v
    errs = {}
    for m in (16, 64):
        g = GridSpec(1, 8, m)
        traj = run(SchemeRun(g, CoefficientSet.zero(),
                             InitialCondition("table", v), kind=IMPLICIT,
                             recorded_levels=[m]))
        errs[m] = np.max(np.abs(traj[m].values - exact))
    assert errs[64] < errs[16] / 2.0


# --- stochastic runs -----------------------------------------------------


def test_run_matches_manual_stepping():
    model = NoiseModel("riesz", 1, 0.5)
    g = GridSpec(1, 8, 4)
    coeffs = CoefficientSet(("affine", 0.3, 1.0), ("cosine", 0.1, 0.2))
    ic = InitialCondition("sine_product")
    seed = 123
    traj = run(SchemeRun(g, coeffs, ic, noise_model=model, kind=IMPLICIT,
                         seed=seed))

    factor = build_covariance(model, g)
    slabs = sample_slab_sequence(factor, np.random.default_rng(seed), g.m)
    r2 = SchemeRun(g, coeffs, ic, noise_model=model, kind=IMPLICIT)
    field = LatticeField(g, 0, ic.sample(g))
    for i in range(g.m):
        field = step_implicit(field, slabs[i], i * g.dt, r2)
        assert np.array_equal(field.values, traj[i + 1].values)


def test_run_deterministic_given_seed():
    model = NoiseModel("riesz", 1, 0.7)
    g = GridSpec(1, 8, 6)
    mk = lambda: run(SchemeRun(g, CoefficientSet(("constant", 1.0),
                                                 ("constant", 0.0)),
                               InitialCondition("zero"), noise_model=model,
                               seed=42))
    a, b = mk(), mk()
    for lv in a.levels:
        assert np.array_equal(a[lv].values, b[lv].values)


def test_one_step_noise_covariance():
    # u_1 = dt * A^{-1} (sigma W_0) from zero start; check second moments
    model = NoiseModel("riesz", 1, 0.5)
    g = GridSpec(1, 8, 8)
    factor = build_covariance(model, g)
    A = np.eye(g.lattice_size) - g.dt * build_laplacian(g).matrix()
    Ainv = np.linalg.inv(A)
    target = g.dt ** 2 * Ainv @ factor.C @ Ainv.T

    N = 40000
    slabs = sample_slab_sequence(factor, np.random.default_rng(7), N)
    W = np.stack([s.values for s in slabs])
    U1 = g.dt * np.linalg.solve(A, W.T).T
    emp = U1.T @ U1 / N
    se = np.sqrt((np.outer(np.diag(target), np.diag(target))
                  + target ** 2) / N)
    assert np.all(np.abs(emp - target) <= 4.0 * se + 1e-12)


def test_provided_slabs_override_sampling():
    g = GridSpec(1, 4, 3)
    slabs = [NoiseSlab(i, np.full(g.lattice_size, 0.5)) for i in range(3)]
    r = SchemeRun(g, CoefficientSet(("constant", 1.0), ("constant", 0.0)),
                  InitialCondition("zero"))
    traj = run(r, slabs=slabs)
    A = np.eye(g.lattice_size) - g.dt * build_laplacian(g).matrix()
    u = np.zeros(g.lattice_size)
    for _ in range(3):
        u = np.linalg.solve(A, u + g.dt * 0.5)
    assert np.allclose(traj[3].values, u, atol=1e-12)
    with pytest.raises(ValueError):
        run(r, slabs=slabs[:2])


def test_step_kind_mismatch():
    g = GridSpec(1, 4, 40)
    r = _zero_run(g, kind=IMPLICIT)
    field = LatticeField(g, 0, np.zeros(g.lattice_size))
    slab = NoiseSlab(0, np.zeros(g.lattice_size))
    with pytest.raises(ValueError):
        step_explicit(field, slab, 0.0, r)
    out = step_implicit(field, slab, 0.0, r)
    assert out.level == 1


def test_overflow_raises_with_level():
    g = GridSpec(1, 4, 4)
    coeffs = CoefficientSet(("constant", 0.0), ("affine", 1e308, 0.0))
    # dt*a*u0 = 2e308 exceeds the float64 range on the first step
    ic = InitialCondition("table", np.full(3, 8.0))
    r = SchemeRun(g, coeffs, ic, kind=IMPLICIT)
    with pytest.raises(SchemeOverflowError) as err:
        run(r)
    assert err.value.level == 1
    assert "level 1" in str(err.value)


# --- recording and persistence -------------------------------------------


def test_recorded_subset():
    g = GridSpec(1, 6, 10)
    traj = run(_zero_run(g, recorded_levels=[0, 5, 10]))
    assert traj.levels == [0, 5, 10]
    with pytest.raises(KeyError):
        traj[3]


def test_csv_roundtrip(tmp_path):
    import csv as csvmod
    model = NoiseModel("riesz", 1, 0.5)
    g = GridSpec(1, 5, 3)
    traj = run(SchemeRun(g, CoefficientSet(("constant", 1.0),
                                           ("constant", 0.5)),
                         InitialCondition("bump"), noise_model=model,
                         seed=3))
    path = tmp_path / "traj.csv"
    traj.save_csv(path)
    with open(path, newline="") as fh:
        rows = list(csvmod.reader(fh))
    assert rows[0] == ["level", "t", "flat_index", "value"]
    assert len(rows) == 1 + 4 * (g.m + 1)
    # spot-check one row round-trips exactly
    lv, t, idx, val = rows[1 + 4 * 2 + 1]
    assert (int(lv), int(idx)) == (2, 2)
    assert float(t) == traj[2].t
    assert float(val) == traj[2].values[1]


def test_binary_roundtrip(tmp_path):
    model = NoiseModel("riesz", 1, 0.9)
    g = GridSpec(1, 6, 4)
    traj = run(SchemeRun(g, CoefficientSet(("affine", 1.0, 0.0),
                                           ("constant", 0.0)),
                         InitialCondition("sine_product"), noise_model=model,
                         seed=11, recorded_levels=[0, 2, 4]))
    path = tmp_path / "traj.bin"
    traj.save_binary(path)
    back = load_trajectory_binary(path)
    assert back.grid == g
    assert back.levels == [0, 2, 4]
    for lv in back.levels:
        assert np.array_equal(back[lv].values, traj[lv].values)

    with pytest.raises(ValueError):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"nope")
        load_trajectory_binary(bad)
