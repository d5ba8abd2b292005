"""End-to-end acceptance checks, one per shipping criterion.

Each test prints a single PASS/FAIL verdict line (visible with -s or in
the failure report), so the file doubles as a release checklist:

    pytest tests/test_acceptance.py -v -s
"""

import csv
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.linalg import eigvalsh

from spde_lab.green import (IMPLICIT as KERNEL_IMPLICIT, KernelSpec,
                            eval_kernel, rate_check_space, rate_check_time)
from spde_lab.lattice import DIRICHLET, NEUMANN, GridSpec
from spde_lab.noise import (NoiseModel, aggregation_matrix, build_covariance)
from spde_lab.operators import build_laplacian, spectral_data
from spde_lab.schemes import (EXPLICIT, CoefficientSet, InitialCondition,
                              SchemeRun, StabilityError, run)
from spde_lab.study import (SPACE, TIME, StudyPlan, loglog_regression,
                            run_study, theoretical_exponent)


@contextmanager
def _verdict(number, name):
    try:
        yield
    except BaseException:
        print("ACCEPTANCE criterion %02d (%s): FAIL" % (number, name))
        raise
    print("ACCEPTANCE criterion %02d (%s): PASS" % (number, name))


# --- 1: exponent table ----------------------------------------------------


def test_criterion_01_exponent_table():
    time_table = [("white", 0.5), (0.9, 0.55), (0.8, 0.6), (0.7, 0.65),
                  (0.6, 0.7), (0.5, 0.75), (0.4, 0.8), (0.3, 0.85),
                  (0.2, 0.9), (0.1, 0.95)]
    space_table = [("white", 1.0), (0.9, 1.1), (0.8, 1.2), (0.7, 1.3),
                   (0.6, 1.4), (0.5, 1.5), (0.4, 1.6), (0.3, 1.7),
                   (0.2, 1.8), (0.1, 1.9)]
    with _verdict(1, "exponent table"):
        for arg, expected in time_table:
            assert theoretical_exponent(arg, TIME) == expected
        for arg, expected in space_table:
            assert theoretical_exponent(arg, SPACE) == expected


# --- 2: closed-form spectrum vs dense eigensolver -----------------------------


def test_criterion_02_spectrum():
    with _verdict(2, "laplacian spectrum"):
        for d in (1, 2):
            for n in (2, 4, 8, 16):
                for bc in (DIRICHLET, NEUMANN):
                    grid = GridSpec(d, n, 4, 1.0, bc)
                    closed = np.sort(spectral_data(grid).eigenvalues)
                    dense = eigvalsh(build_laplacian(grid).matrix())
                    assert np.max(np.abs(closed - dense)) <= 1e-9


# --- 3: deterministic error orders ------------------------------------------


def _heat_mode_run(grid):
    pts = grid.lattice_points()[:, 0]
    u0 = np.sqrt(2.0) * np.sin(np.pi * pts)
    scheme = SchemeRun(grid, CoefficientSet.zero(),
                       InitialCondition("table", u0),
                       recorded_levels=[grid.m])
    final = run(scheme)[grid.m].values
    exact = np.exp(-np.pi ** 2) * np.sqrt(2.0) * np.sin(np.pi * pts)
    return float(np.max(np.abs(final - exact)))


def test_criterion_03_deterministic_orders():
    with _verdict(3, "deterministic error orders"):
        m_points = [(m, _heat_mode_run(GridSpec(1, 256, m)))
                    for m in (128, 256, 512, 1024, 2048)]
        slope_m, _, _ = loglog_regression(m_points)
        assert abs(slope_m - 1.0) <= 0.25
        n_points = [(n, _heat_mode_run(GridSpec(1, n, 32768)))
                    for n in (4, 8, 16, 32)]
        slope_n, _, _ = loglog_regression(n_points)
        assert abs(slope_n - 2.0) <= 0.25


# --- 4: scheme iterates equal the kernel evolution ---------------------------


def _kernel_evolution_matches(d, n, m, bc):
    grid = GridSpec(d, n, m, 1.0, bc)
    scheme = SchemeRun(grid, CoefficientSet.zero(),
                       InitialCondition("bump"))
    traj = run(scheme)
    spec = KernelSpec(KERNEL_IMPLICIT, grid)
    axis_centers = (np.arange(n) + 0.5) / n
    mesh = np.meshgrid(*(axis_centers,) * d, indexing="ij")
    centers = np.stack([a.reshape(-1) for a in mesh], axis=1)
    # initial data as the scheme sees it: the value at the lattice point
    # owning each cell (grid projection for Dirichlet, center for Neumann)
    owners = np.floor(centers * n) / n if bc == DIRICHLET else centers
    u0_cells = np.prod(owners * (1.0 - owners), axis=1)
    xs = grid.lattice_points()
    for level in (1, m // 2, m):
        t = level * grid.dt
        want = np.array([
            sum(eval_kernel(spec, t, x, y) * u0_cells[c]
                for c, y in enumerate(centers)) / n ** d
            for x in xs])
        got = traj[level].values
        assert np.max(np.abs(got - want)) <= 1e-10


def test_criterion_04_kernel_evolution():
    with _verdict(4, "kernel evolution identity"):
        for bc in (DIRICHLET, NEUMANN):
            for n, m in ((4, 4), (4, 8), (8, 4), (8, 8)):
                _kernel_evolution_matches(1, n, m, bc)
            for n, m in ((4, 4), (8, 8)):
                _kernel_evolution_matches(2, n, m, bc)


# --- 5: noise covariance and aggregation --------------------------------------


def test_criterion_05_noise_covariance():
    with _verdict(5, "noise covariance"):
        grid = GridSpec(1, 16, 4)
        factor = build_covariance(NoiseModel("riesz", 1, 0.5), grid)
        target = factor.C
        samples = 50000
        rng = np.random.default_rng(0)
        draws = rng.standard_normal((samples, factor.rank)) @ factor.L.T
        empirical = draws.T @ draws / samples
        variances = np.diag(target)
        se = np.sqrt((np.outer(variances, variances) + target ** 2)
                     / samples)
        assert np.max(np.abs(empirical - target) / se) < 4.0

        fine = GridSpec(1, 8, 8)
        coarse = GridSpec(1, 4, 4)
        model = NoiseModel("riesz", 1, 0.5)
        C_f = build_covariance(model, fine).C
        C_c = build_covariance(model, coarse).C
        A = aggregation_matrix(fine, coarse)
        rho = fine.m // coarse.m
        stacked = np.kron(np.eye(rho), C_f)
        assert np.max(np.abs(A @ stacked @ A.T - C_c)) <= 1e-10


# --- 6: explicit stability guard ---------------------------------------------


def test_criterion_06_stability_guard():
    with _verdict(6, "explicit stability guard"):
        rejected = [(16, 512, 1.0), (16, 256, 1.0), (8, 32, 0.5),
                    (10, 100, 0.5), (32, 1024, 1.0), (64, 4096, 2.0)]
        for n, m, T in rejected:
            grid = GridSpec(1, n, m, T)
            assert grid.n ** 2 * grid.T / grid.m >= 0.5
            with pytest.raises(StabilityError):
                SchemeRun(grid, CoefficientSet.zero(),
                          InitialCondition("zero"), kind=EXPLICIT)
            # the largest admissible threshold still rejects it
            with pytest.raises(StabilityError):
                SchemeRun(grid, CoefficientSet.zero(),
                          InitialCondition("zero"), kind=EXPLICIT,
                          q=0.499999)
        with pytest.raises(StabilityError):
            StudyPlan(TIME, GridSpec(1, 16, 1024), (512,), 1,
                      CoefficientSet.zero(), InitialCondition("zero"),
                      kind=EXPLICIT)
        # just inside the default threshold is accepted
        SchemeRun(GridSpec(1, 16, 640), CoefficientSet.zero(),
                  InitialCondition("zero"), kind=EXPLICIT)


# --- 7: kernel approximation rates ---------------------------------------


def test_criterion_07_kernel_rates():
    with _verdict(7, "kernel distance rates"):
        space = rate_check_space(0.5)
        assert abs(space.slope - (-1.5)) <= 0.3
        time = rate_check_time(0.5)[0]
        assert abs(time.slope - (-0.75)) <= 0.25


# --- 8-10: reduced-scale convergence studies ------------------------------


def _time_plan(seed=0):
    return StudyPlan(TIME, GridSpec(1, 64, 4096),
                     (64, 128, 256, 512, 1024), 400,
                     CoefficientSet(("affine", 0.2, 1.0),
                                    ("affine", 1.0, 2.0)),
                     InitialCondition("sine_product"),
                     noise=NoiseModel("riesz", 1, 0.5), seed=seed)


@pytest.fixture(scope="module")
def time_study_report():
    return run_study(_time_plan(), threads=2)


def test_criterion_08_time_study(time_study_report, tmp_path):
    rep = time_study_report
    with _verdict(8, "time-axis study"):
        theory = rep.theory_exponent
        assert theory == 0.75
        assert theory - 0.2 <= rep.slope_mid <= theory + 0.5
        rerun = run_study(_time_plan(), threads=1)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        rep.to_csv(a)
        rerun.to_csv(b)
        assert a.read_bytes() == b.read_bytes()


def test_criterion_09_space_study():
    plan = StudyPlan(SPACE, GridSpec(1, 96, 4096),
                     (12, 16, 24, 32, 48), 400,
                     CoefficientSet(("affine", 0.2, 1.0),
                                    ("affine", 1.0, 2.0)),
                     InitialCondition("sine_product"),
                     noise=NoiseModel("riesz", 1, 0.5), seed=0)
    rep = run_study(plan, threads=2)
    with _verdict(9, "space-axis study"):
        assert 1.3 <= rep.slope_mid <= 2.1, \
            "slope_mid=%.4f outside [1.3, 2.1]" % rep.slope_mid


def test_criterion_10_moment_stability(time_study_report):
    with _verdict(10, "second-moment stability"):
        moments = np.asarray(time_study_report.second_moment_sup)
        assert moments.min() > 0.0
        assert moments.max() / moments.min() - 1.0 < 0.20
