import numpy as np
import pytest

from chainbridge.chain_model import LinearChainSpec, preset
from chainbridge.costs import (
    Estimate,
    closed_form_dirac_value,
    coarse_tv,
    grid_bridge,
    mean_preserving_directions,
    optimality_check,
    terminal_moment_check,
    verify_prop4,
    witness_family,
)
from chainbridge.errors import PreconditionError
from chainbridge.htransform import control_law, simulate_controlled
from chainbridge.kernels import gaussian_kernel, push_forward, tabulate_kernel
from chainbridge.measures import GaussianMeasure, GridMeasure, Lattice
from chainbridge.rng import generator
from chainbridge.schrodinger import relative_entropy


def test_estimate_within():
    e = Estimate(1.0, 0.1)
    assert e.within(1.25) and not e.within(1.35)
    assert Estimate(2.0, 0.0).within(2.0)


def test_small_prop4_run(di, di_target):
    rep = verify_prop4(di, np.zeros(2), di_target, dt=2e-3, n_paths=4000, seed=9)
    assert rep.verdict, rep.checks
    assert rep.target == pytest.approx(2.636294, abs=1e-6)
    assert rep.path_kl.consistent
    assert rep.ensemble.n_paths == 4000


def test_prop4_refuses_uncontrollable(di_target):
    frozen = LinearChainSpec(np.zeros((2, 2)), np.eye(1), 1.0, 2, 1, "frozen")
    with pytest.raises(PreconditionError):
        verify_prop4(frozen, np.zeros(2), di_target, n_paths=10)


def test_prop4_refuses_dirac_target(di):
    with pytest.raises(PreconditionError):
        verify_prop4(di, np.zeros(2), GaussianMeasure.dirac([1.0, 1.0]), n_paths=10)


def test_terminal_moments_detect_shift(di_target):
    x = di_target.sample(20000, generator(0, 1))
    assert terminal_moment_check(x, di_target)["passed"]
    assert not terminal_moment_check(x + [0.05, 0.0], di_target)["passed"]


def test_coarse_tv_noise_level():
    lat = Lattice.from_bounds([-3, -3], [3, 3], 31)
    g = GaussianMeasure([0.0, 0.0], np.eye(2))
    mu = GridMeasure.from_density(lat, g.density)
    x = lat.nodes[generator(1, 2).choice(lat.size, 20000, p=mu.weights)]
    tv, noise = coarse_tv(x, mu, 5)
    assert tv <= 3 * noise


def test_closed_form_dirac_value(di, di_target):
    ref = gaussian_kernel(di, 0.0, 1.0).endpoint(np.zeros(2))
    assert closed_form_dirac_value(di, np.zeros(2), di_target) == pytest.approx(
        relative_entropy(di_target, ref))
    assert closed_form_dirac_value(di, np.zeros(2), di_target, 0.3) < \
        closed_form_dirac_value(di, np.zeros(2), di_target)


def test_grid_bridge_pushforward_target_has_zero_value():
    spec = preset("double_integrator")
    lat = Lattice.from_bounds([-3, -3], [3, 3], 25)
    mu0 = GridMeasure.from_points(lat, [[-0.5, 0.0], [0.5, 0.0]], [0.4, 0.6])
    eps = 0.75 * lat.spacing.max()
    K = tabulate_kernel(gaussian_kernel(spec, 0.0, 1.0), lat, source_nodes=mu0.support,
                        epsilon=eps)
    gb = grid_bridge(spec, mu0, push_forward(K, mu0), epsilon=eps)
    assert abs(gb.grid_value) < 1e-8


def test_mean_preserving_directions_leave_terminal_states_unchanged(di, di_h):
    dt = 1e-2
    dirs, _ = mean_preserving_directions(di_h, di, dt)
    assert len(dirs) == 2
    law = control_law(di_h, di)
    coef = dirs[0]

    def pert(t, x):
        return law(t, x) + sum(c * t**p for p, c in enumerate(coef))

    a = simulate_controlled(di, di_h, np.zeros(2), dt, 200, seed=3)
    b = simulate_controlled(di, pert, np.zeros(2), dt, 200, seed=3)
    # same noise, affine feedback: the paths differ by the deterministic mean shift
    assert np.abs(a.terminal - b.terminal).max() < 1e-8
    assert b.energy.mean() > a.energy.mean()


def test_small_optimality_check(di, di_h):
    fam = witness_family(di_h, di, 5e-3, thetas=(1.0,))
    rep = optimality_check(di, di_h, np.zeros(2), fam, dt=5e-3, n_paths=3000, seed=4)
    assert rep.verdict, rep.checks
    assert set(rep.checks) == {w.name for w in fam}
