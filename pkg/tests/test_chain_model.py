import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainbridge.chain_model import (
    ChainSpec,
    apply_generator,
    embedding_matrix,
    integrator_chain,
    kalman_rank_check,
    nonlinear_preset,
    preset,
    validate_chain,
)
from chainbridge.errors import ConfigError


def test_integrator_structure():
    spec = integrator_chain(3, d=2)
    assert spec.nd == 6
    assert np.array_equal(spec.A[2:4, 0:2], np.eye(2))
    assert np.array_equal(spec.A[4:6, 2:4], np.eye(2))
    assert np.count_nonzero(spec.A) == 4


def test_embedding_matrix():
    G = embedding_matrix(3, 2)
    assert G.shape == (6, 2)
    assert np.array_equal(G[:2], np.eye(2)) and not G[2:].any()


@pytest.mark.parametrize("name", ["double_integrator", "triple_integrator", "damped_chain"])
def test_presets_are_controllable(name):
    rc = kalman_rank_check(preset(name))
    assert rc.controllable and rc.rank == preset(name).nd


def test_broken_coupling_loses_rank():
    spec = integrator_chain(2)
    A = np.zeros_like(spec.A)
    broken = type(spec)(A, spec.sigma0, spec.T, 2, 1, "broken")
    rc = kalman_rank_check(broken)
    assert not rc.controllable and rc.rank == 1


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("quadruple")
    with pytest.raises(ConfigError):
        nonlinear_preset("nope")


def test_validate_linear_and_nonlinear():
    assert validate_chain(preset("double_integrator")).passed
    assert validate_chain(nonlinear_preset("cubic_chain")).passed


def test_validate_flags_noise_outside_first_block():
    # block 3 reads block 1 directly, skipping the cascade
    def drift(t, x):
        return np.stack([np.zeros(len(x)), x[:, 0], x[:, 1] + x[:, 0]], axis=1)

    bad = ChainSpec(3, 1, drift, lambda t, x: np.array([[1.0]]), 1.0, name="bad")
    rep = validate_chain(bad)
    assert not rep.passed and not rep["dependency"].passed


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.0, 1.0))
def test_generator_on_quadratic(x1, x2, t):
    """Exact on a quadratic test function."""
    spec = preset("double_integrator").to_chain()
    x = np.array([x1, x2])

    def f(z):
        return z[0] ** 2 + z[0] * z[1]

    # drift (0, x1), a = 1 on block 1: L f = 0.5 * 2 + x1 * x1
    got = apply_generator(spec, f, t, x)
    assert got == pytest.approx(1.0 + x1 * x1, abs=1e-5)
