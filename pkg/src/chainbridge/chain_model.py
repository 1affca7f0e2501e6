"""Chain-of-subsystems diffusions with noise entering the first block only.

The state is ``x = (x^1, ..., x^n)`` with blocks in ``R^d``. Block ``j >= 2``
evolves deterministically with drift ``m_j`` that may only read blocks
``j-1, ..., n``; block 1 carries the diffusion ``sigma``.

Drift and sigma evaluators are vectorized: ``drift(t, x)`` takes ``x`` of
shape ``(N, n*d)`` and returns the same shape, ``sigma(t, x)`` returns
``(N, d, d)`` or a single ``(d, d)`` matrix that is broadcast.
"""

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, NumericalError

DEP_REL_PERTURB = 1e-3
DEP_TOL = 1e-10
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class ChainSpec:
    n: int
    d: int
    drift: Callable
    sigma: Callable
    T: float
    lambda_min: float = 1e-8
    name: str = "custom"
    linear: "LinearChainSpec | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"a chain needs n >= 2 subsystems, got {self.n}")
        if self.d < 1:
            raise ConfigError(f"block dimension must be >= 1, got {self.d}")
        if not self.T > 0:
            raise ConfigError(f"horizon must be positive, got {self.T}")
        if not self.lambda_min > 0:
            raise ConfigError("lambda_min must be positive")

    @property
    def nd(self):
        return self.n * self.d

    def drift_batch(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.drift(t, x), dtype=float).reshape(x.shape)

    def sigma_batch(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        s = np.asarray(self.sigma(t, x), dtype=float)
        if s.ndim == 2:
            s = np.broadcast_to(s, (x.shape[0], self.d, self.d))
        return s

    def diffusion(self, t, x):
        """``a = sigma sigma^T`` per sample, shape ``(N, d, d)``."""
        s = self.sigma_batch(t, x)
        return s @ np.swapaxes(s, -1, -2)


@dataclass(frozen=True)
class LinearChainSpec:
    """Linear chain ``dx = A x dt + G sigma0 dW``."""

    A: np.ndarray
    sigma0: np.ndarray
    T: float
    n: int
    d: int
    name: str = "linear"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        s0 = np.atleast_2d(np.asarray(self.sigma0, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "sigma0", s0)
        nd = self.n * self.d
        if self.n < 2:
            raise ConfigError(f"a chain needs n >= 2 subsystems, got {self.n}")
        if A.shape != (nd, nd):
            raise ConfigError(f"A must be {nd}x{nd}, got {A.shape}")
        if s0.shape != (self.d, self.d):
            raise ConfigError(f"sigma0 must be {self.d}x{self.d}, got {s0.shape}")
        if not self.T > 0:
            raise ConfigError("horizon must be positive")
        d = self.d
        for j in range(1, self.n):
            for k in range(0, j - 1):
                blk = A[j * d:(j + 1) * d, k * d:(k + 1) * d]
                if np.any(blk != 0):
                    raise ConfigError(
                        f"A block ({j + 1},{k + 1}) must vanish: block {j + 1} "
                        f"may only depend on blocks {j}..{self.n}")
        a = s0 @ s0.T
        if not np.allclose(a, a.T) or np.linalg.eigvalsh(a).min() <= 0:
            raise ConfigError("sigma0 sigma0^T must be symmetric positive definite")

    @property
    def nd(self):
        return self.n * self.d

    @property
    def a(self):
        return self.sigma0 @ self.sigma0.T

    @property
    def G(self):
        return embedding_matrix(self.n, self.d)

    def to_chain(self):
        A = self.A
        s0 = self.sigma0
        lam = float(np.linalg.eigvalsh(self.a).min())

        def drift(t, x):
            return x @ A.T

        def sigma(t, x):
            return s0

        return ChainSpec(n=self.n, d=self.d, drift=drift, sigma=sigma, T=self.T,
                         lambda_min=lam, name=self.name, linear=self)

    def with_horizon(self, T):
        return LinearChainSpec(self.A, self.sigma0, T, self.n, self.d, self.name)


def integrator_chain(n, d=1, T=1.0, sigma=1.0, name=None):
    """n-fold integrator: block j+1 integrates block j."""
    nd = n * d
    A = np.zeros((nd, nd))
    for j in range(1, n):
        A[j * d:(j + 1) * d, (j - 1) * d:j * d] = np.eye(d)
    return LinearChainSpec(A, sigma * np.eye(d), T, n, d, name or f"integrator{n}")


def preset(name, T=1.0, gamma=0.5):
    """Named linear presets used by the CLI and the test-suite."""
    if name == "double_integrator":
        return integrator_chain(2, 1, T, name=name)
    if name == "triple_integrator":
        return integrator_chain(3, 1, T, name=name)
    if name == "damped_chain":
        spec = integrator_chain(2, 1, T, name=name)
        A = spec.A.copy()
        A[0, 0] = -gamma
        return LinearChainSpec(A, spec.sigma0, T, 2, 1, name)
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = ("double_integrator", "triple_integrator", "damped_chain")
NONLINEAR_PRESETS = ("cubic_chain",)


def nonlinear_preset(name, T=1.0, sigma=1.0):
    """Named nonlinear chains (no closed-form kernel)."""
    if name == "cubic_chain":
        def drift(t, x):
            return np.stack([-x[:, 0] ** 3, x[:, 0]], axis=1)

        def sig(t, x):
            return np.array([[sigma]])

        return ChainSpec(2, 1, drift, sig, T, lambda_min=sigma**2, name=name)
    raise ConfigError(f"unknown nonlinear preset {name!r}")


def embedding_matrix(n, d):
    """``G = [I_d, 0, ..., 0]^T`` of shape ``(n*d, d)``."""
    if n < 2 or d < 1:
        raise ConfigError(f"invalid counts n={n}, d={d}")
    G = np.zeros((n * d, d))
    G[:d, :d] = np.eye(d)
    return G


# -- validation ---------------------------------------------------------------

@dataclass
class Finding:
    check: str
    passed: bool
    detail: str = ""
    t: float | None = None
    x: list | None = None


@dataclass
class ValidationReport:
    findings: list
    valid: bool = True

    @property
    def passed(self):
        return self.valid and all(f.passed for f in self.findings)

    def __getitem__(self, check):
        for f in self.findings:
            if f.check == check:
                return f
        raise KeyError(check)


def _eval_point(spec, t, x):
    m = spec.drift_batch(t, x[None])[0]
    s = spec.sigma_batch(t, x[None])[0]
    return m, s


def validate_chain(spec, n_probe=32, seed=0, scale=2.0):
    """Probe the structural assumptions on ``spec`` at random points.

    Returns one finding per check: ``totality``, ``dependency``,
    ``ellipticity`` and ``local_lipschitz``. Failing findings carry the
    offending probe.
    """
    if n_probe < 1:
        raise ValueError("n_probe must be >= 1")
    from .rng import generator
    if isinstance(spec, LinearChainSpec):
        spec = spec.to_chain()
    gen = generator(seed, 7)
    ts = gen.uniform(0.0, spec.T, n_probe)
    xs = scale * gen.standard_normal((n_probe, spec.nd))
    d, n = spec.d, spec.n

    findings = []
    valid = True
    values = []
    bad = None
    for t, x in zip(ts, xs):
        try:
            m, s = _eval_point(spec, t, x)
            ok = np.all(np.isfinite(m)) and np.all(np.isfinite(s))
        except Exception as exc:  # evaluator failure is reported, not raised
            ok = False
            m = s = None
            detail = f"evaluator raised {type(exc).__name__}: {exc}"
        else:
            detail = "non-finite evaluator output"
        if not ok:
            bad = Finding("totality", False, detail, float(t), x.tolist())
            break
        values.append((m, s))
    if bad is not None:
        findings.append(bad)
        return ValidationReport(findings, valid=False)
    findings.append(Finding("totality", True, f"{n_probe} probes finite"))

    dep_fail = None
    worst = 0.0
    for (t, x), (m, _) in zip(zip(ts, xs), values):
        for j in range(1, n):
            mj = m[j * d:(j + 1) * d]
            for k in range(0, j - 1):
                xp = x.copy()
                blk = slice(k * d, (k + 1) * d)
                xp[blk] += DEP_REL_PERTURB * (1.0 + np.abs(xp[blk]))
                mp = spec.drift_batch(t, xp[None])[0][j * d:(j + 1) * d]
                change = np.max(np.abs(mp - mj))
                worst = max(worst, change)
                if change > DEP_TOL * (1.0 + np.max(np.abs(mj))) and dep_fail is None:
                    dep_fail = Finding(
                        "dependency", False,
                        f"m_{j + 1} changes by {change:.3e} when block {k + 1} is perturbed",
                        float(t), x.tolist())
    findings.append(dep_fail or Finding("dependency", True, f"max change {worst:.1e}"))

    ell_fail = None
    lam_seen = np.inf
    for (t, x), (_, s) in zip(zip(ts, xs), values):
        lam = np.linalg.eigvalsh(s @ s.T).min()
        lam_seen = min(lam_seen, lam)
        if lam < spec.lambda_min - 1e-12 and ell_fail is None:
            ell_fail = Finding("ellipticity", False,
                               f"smallest eigenvalue of sigma sigma^T is {lam:.3e} "
                               f"< lambda_min {spec.lambda_min:.3e}", float(t), x.tolist())
    findings.append(ell_fail or Finding("ellipticity", True, f"min eigenvalue {lam_seen:.3e}"))

    lip = 0.0
    lip_fail = None
    for (t, x), (m, s) in zip(zip(ts, xs), values):
        dx = 1e-4 * (1.0 + np.abs(x))
        mp, sp = _eval_point(spec, t, x + dx)
        q = max(np.linalg.norm(mp - m), np.linalg.norm(sp - s)) / np.linalg.norm(dx)
        if not np.isfinite(q) and lip_fail is None:
            lip_fail = Finding("local_lipschitz", False, "unbounded difference quotient",
                               float(t), x.tolist())
        lip = max(lip, q)
    findings.append(lip_fail or Finding("local_lipschitz", True, f"max quotient {lip:.3e}"))
    return ValidationReport(findings, valid)


# -- generator ----------------------------------------------------------------

def fd_step_for(x):
    return 1e-4 * (1.0 + np.linalg.norm(x))


def fd_gradient_hessian(fun, x, d, step):
    """Central-difference gradient of ``fun`` and Hessian of its first ``d`` coordinates."""
    x = np.asarray(x, dtype=float)
    nd = x.size
    f0 = fun(x)
    if not np.isfinite(f0):
        raise NumericalError(f"non-finite value {f0} at probe {x.tolist()}")
    e = np.eye(nd) * step
    fp = np.array([fun(x + e[i]) for i in range(nd)])
    fm = np.array([fun(x - e[i]) for i in range(nd)])
    if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
        raise NumericalError(f"non-finite value near probe {x.tolist()} (step {step:.1e})")
    grad = (fp - fm) / (2 * step)
    hess = np.empty((d, d))
    for i in range(d):
        hess[i, i] = (fp[i] - 2 * f0 + fm[i]) / step**2
        for j in range(i + 1, d):
            fpp = fun(x + e[i] + e[j])
            fpm = fun(x + e[i] - e[j])
            fmp = fun(x - e[i] + e[j])
            fmm = fun(x - e[i] - e[j])
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * step**2)
    return f0, grad, hess


def apply_generator(spec, f, t, x, fd_step=None):
    """Apply the generator of ``spec`` to the scalar field ``f`` at ``(t, x)``.

    ``0.5 tr(a D^2_{x^1} f) + M . D f``, where only block 1 carries second
    order terms. Derivatives are central finite differences.
    """
    x = np.asarray(x, dtype=float)
    step = fd_step if fd_step is not None else fd_step_for(x)
    if step <= 0:
        raise ValueError("fd_step must be positive")
    _, grad, hess = fd_gradient_hessian(f, x, spec.d, step)
    m = spec.drift_batch(t, x[None])[0]
    a = spec.diffusion(t, x[None])[0]
    return 0.5 * np.trace(a @ hess) + m @ grad


# -- controllability ----------------------------------------------------------

class RankCheck(NamedTuple):
    controllable: bool
    rank: int


def controllability_matrix(spec):
    B = spec.G @ spec.sigma0
    blocks = [B]
    for _ in range(spec.nd - 1):
        blocks.append(spec.A @ blocks[-1])
    return np.hstack(blocks)


def kalman_rank_check(spec):
    """Kalman rank of ``[G s0, A G s0, ..., A^{nd-1} G s0]``."""
    sv = np.linalg.svd(controllability_matrix(spec), compute_uv=False)
    rank = int(np.sum(sv > RANK_RTOL * sv[0])) if sv[0] > 0 else 0
    return RankCheck(rank == spec.nd, rank)
