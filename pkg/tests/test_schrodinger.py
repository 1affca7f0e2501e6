import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainbridge.chain_model import preset
from chainbridge.errors import AbsoluteContinuityError, ConfigError, ConvergenceError
from chainbridge.kernels import gaussian_kernel, push_forward, tabulate_kernel
from chainbridge.measures import GaussianMeasure, GridMeasure, Lattice
from chainbridge.schrodinger import coupling_measure, relative_entropy, solve_schrodinger_system

LAT = Lattice.from_bounds([-2, -2], [2, 2], 17)
GK = gaussian_kernel(preset("double_integrator"), 0.0, 1.0)


def setup(mu0):
    K = tabulate_kernel(GK, LAT, source_nodes=mu0.support, epsilon=0.4)
    return K


def test_grid_measure_validation():
    with pytest.raises(ConfigError):
        GridMeasure(LAT, np.full(LAT.size, 2.0 / LAT.size))
    with pytest.raises(ConfigError):
        GridMeasure(LAT, -np.ones(LAT.size))


def test_gaussian_kl_closed_form():
    p = GaussianMeasure([1.0], [[2.0]])
    q = GaussianMeasure([0.0], [[1.0]])
    assert relative_entropy(p, q) == pytest.approx(0.5 * (2 + 1 - 1 - np.log(2)))
    assert relative_entropy(q, q) == 0.0
    assert relative_entropy(GaussianMeasure.dirac([0.0]), q) == np.inf


def test_grid_kl_off_support_is_inf():
    a = GridMeasure.dirac(LAT, 3)
    b = GridMeasure.dirac(LAT, 4)
    assert relative_entropy(a, b) == np.inf


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 0.9), st.floats(-0.8, 0.8), st.floats(-0.8, 0.8))
def test_marginals_recovered(w, mx, my):
    mu0 = GridMeasure.from_points(LAT, [[-0.5, 0], [0.5, 0.25]], [w, 1 - w])
    muT = GridMeasure.from_density(LAT, GaussianMeasure([mx, my], 0.3 * GK.Sigma).density)
    K = setup(mu0)
    pot = solve_schrodinger_system(K, mu0, muT, tol=1e-9)
    cp = coupling_measure(pot, K)
    assert 0.5 * np.abs(cp.marginal0.weights - mu0.weights).sum() < 1e-8
    assert 0.5 * np.abs(cp.marginalT.weights - muT.weights).sum() < 1e-8
    assert np.exp(pot.log_nu0[np.isfinite(pot.log_nu0)]).sum() == pytest.approx(1.0)


def test_pushforward_target_is_fixed_point():
    """With muT = K mu0 the bridge is the reference itself: rho is constant."""
    mu0 = GridMeasure.from_points(LAT, [[-0.5, 0], [0.5, 0.25]], [0.3, 0.7])
    K = setup(mu0)
    pot = solve_schrodinger_system(K, mu0, push_forward(K, mu0), tol=1e-10)
    rho = pot.rho[np.isfinite(pot.log_rho) & (pot.rho > 0)]
    assert np.ptp(np.log(rho)) < 1e-6


def test_gauge_rescaling_keeps_coupling():
    mu0 = GridMeasure.from_points(LAT, [[-0.5, 0], [0.5, 0.25]], [0.3, 0.7])
    muT = GridMeasure.from_density(LAT, GaussianMeasure([0.5, 0.5], 0.3 * GK.Sigma).density)
    K = setup(mu0)
    pot = solve_schrodinger_system(K, mu0, muT)
    a = coupling_measure(pot, K).joint
    b = coupling_measure(pot.rescaled(7.0), K).joint
    assert np.allclose(a, b, atol=1e-14)


def test_absolute_continuity_error():
    lat = Lattice.from_bounds([-30, -30], [30, 30], 13)
    mu0 = GridMeasure.dirac(lat, lat.nearest_node([0, 0]))
    K = tabulate_kernel(GK, lat, source_nodes=mu0.support)
    with pytest.raises(AbsoluteContinuityError) as exc:
        solve_schrodinger_system(K, mu0, GridMeasure.dirac(lat, 0))
    assert exc.value.node == 0


def test_convergence_error_carries_iterate():
    mu0 = GridMeasure.from_points(LAT, [[-0.5, 0], [0.5, 0.25]], [0.3, 0.7])
    muT = GridMeasure.from_density(LAT, GaussianMeasure([1.0, 1.0], 0.1 * GK.Sigma).density)
    K = setup(mu0)
    with pytest.raises(ConvergenceError) as exc:
        solve_schrodinger_system(K, mu0, muT, tol=1e-14, max_iter=3)
    assert exc.value.history.shape == (3, 3)
    assert exc.value.last_iterate is not None
