import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainbridge.chain_model import integrator_chain, preset
from chainbridge.errors import ConfigError, PreconditionError
from chainbridge.kernels import (
    GaussianKernel,
    gaussian_kernel,
    mc_kernel,
    push_forward,
    tabulate_kernel,
)
from chainbridge.measures import GaussianMeasure, GridMeasure, Lattice
from chainbridge.rng import generator


def integrator_gramian(n, t):
    """Analytic Gramian of the n-fold scalar integrator with unit noise."""
    from math import factorial

    S = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            S[i, j] = t ** (i + j + 1) / (factorial(i) * factorial(j) * (i + j + 1))
    return S


@pytest.mark.parametrize("n", [2, 3, 4])
@pytest.mark.parametrize("t", [0.3, 1.0, 2.5])
def test_gramian_polynomial(n, t):
    gk = gaussian_kernel(integrator_chain(n), 0.0, t)
    assert np.allclose(gk.Sigma, integrator_gramian(n, t), rtol=1e-10, atol=1e-12)


def test_rk4_matches_van_loan():
    spec = preset("damped_chain", gamma=1.3)
    a = gaussian_kernel(spec, 0.2, 1.0)
    b = gaussian_kernel(spec, 0.2, 1.0, n_ode_steps=400)
    assert np.allclose(a.Phi, b.Phi, atol=1e-10)
    assert np.allclose(a.Sigma, b.Sigma, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.1, 3.0))
def test_chapman_kolmogorov(frac, gamma):
    spec = preset("damped_chain", T=1.5, gamma=gamma)
    r = 1.5 * frac
    full, a, b = (gaussian_kernel(spec, 0.0, 1.5), gaussian_kernel(spec, 0.0, r),
                  gaussian_kernel(spec, r, 1.5))
    assert np.allclose(b.Phi @ a.Phi, full.Phi, atol=1e-10)
    assert np.allclose(b.Phi @ a.Sigma @ b.Phi.T + b.Sigma, full.Sigma, atol=1e-10)


def test_identity_kernel():
    gk = GaussianKernel.identity(3)
    assert np.array_equal(gk.Phi, np.eye(3)) and not gk.Sigma.any()


def test_density_integrates_to_one():
    gk = gaussian_kernel(preset("double_integrator"), 0.0, 1.0)
    lat = Lattice.from_bounds([-6, -4], [6, 4], [121, 81])
    q = gk.density(np.array([0.3, -0.2]), lat.nodes)
    assert q.sum() * lat.cell_volume == pytest.approx(1.0, abs=1e-6)


def test_tabulated_rows_normalized():
    gk = gaussian_kernel(preset("double_integrator"), 0.0, 1.0)
    lat = Lattice.from_bounds([-3, -3], [3, 3], 21)
    K = tabulate_kernel(gk, lat, source_nodes=[0, 220, 440], epsilon=0.3)
    assert np.allclose(K.matrix.sum(axis=1), 1.0)
    assert K.raw_mass[1] == pytest.approx(1.0, abs=2e-2)


def test_push_forward_gaussian():
    spec = preset("double_integrator")
    gk = gaussian_kernel(spec, 0.0, 1.0)
    out = push_forward(gk, GaussianMeasure.dirac([1.0, 0.0]))
    assert np.allclose(out.mean, [1.0, 1.0])
    assert np.allclose(out.cov, gk.Sigma)
    with pytest.raises(PreconditionError):
        push_forward(gk, GaussianMeasure.dirac([1.0]))


def test_push_forward_grid_preserves_mass():
    gk = gaussian_kernel(preset("double_integrator"), 0.0, 1.0)
    lat = Lattice.from_bounds([-3, -3], [3, 3], 21)
    mu = GridMeasure.from_points(lat, [[0, 0], [0.6, 0.3]], [0.5, 0.5])
    K = tabulate_kernel(gk, lat, source_nodes=mu.support, epsilon=0.3)
    assert push_forward(K, mu).weights.sum() == pytest.approx(1.0)


def test_mc_kernel_matches_mollified_closed_form():
    spec = preset("double_integrator")
    lat = Lattice.from_bounds([-3, -3], [3, 3], 13)
    eps = 0.5
    mc = mc_kernel(spec, 0.0, [[0.0, 0.0]], 1.0, lat, epsilon=eps, n_paths=20000,
                   dt=5e-3, seed=4)
    ex = tabulate_kernel(gaussian_kernel(spec, 0.0, 1.0), lat, sources=[[0.0, 0.0]],
                         epsilon=eps)
    assert 0.5 * np.abs(mc.matrix - ex.matrix).sum() < 0.03


def test_mc_kernel_thread_invariant():
    spec = preset("double_integrator")
    lat = Lattice.from_bounds([-2, -2], [2, 2], 5)
    args = (spec, 0.0, [[0, 0], [0.5, 0]], 0.5, lat)
    a = mc_kernel(*args, n_paths=500, dt=1e-2, seed=1, threads=1)
    b = mc_kernel(*args, n_paths=500, dt=1e-2, seed=1, threads=2)
    assert np.array_equal(a.values, b.values)


def test_mc_kernel_dimension_mismatch():
    lat = Lattice.from_bounds([-1], [1], 5)
    with pytest.raises(ConfigError):
        mc_kernel(preset("double_integrator"), 0.0, [[0.0]], 1.0, lat, n_paths=10)


def test_rng_is_counter_based():
    a = generator(3, 1, 2).standard_normal(5)
    b = generator(3, 1, 2).standard_normal(5)
    c = generator(3, 2, 1).standard_normal(5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_mc_kernel_refinement_trend():
    """Relative error against the mollified closed form on nodes above 1% of the peak.

    The finest level is the 41 x 41, eps = 0.15, 2e5 path configuration; the
    error must not grow as dt halves and n_paths quadruples.
    """
    spec = preset("double_integrator")
    lat = Lattice.from_bounds([-4, -4], [4, 4], 41)
    oracle = tabulate_kernel(gaussian_kernel(spec, 0.0, 1.0), lat, sources=[[0.0, 0.0]],
                             epsilon=0.15).values[0]
    bulk = oracle > 1e-2 * oracle.max()
    errs = []
    for dt, n in ((4e-3, 12_500), (2e-3, 50_000), (1e-3, 200_000)):
        mc = mc_kernel(spec, 0.0, [[0.0, 0.0]], 1.0, lat, epsilon=0.15, n_paths=n, dt=dt, seed=0)
        errs.append(np.abs(mc.values[0][bulk] / oracle[bulk] - 1).max())
    assert errs[0] >= errs[1] >= errs[2]
    assert errs[2] <= 0.10
