"""Transition densities of the chain: closed form for linear chains, Monte
Carlo with Gaussian mollifier smoothing otherwise, plus the push-forward
operator and the killed-diffusion estimator."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .chain_model import embedding_matrix
from .errors import ConfigError, NumericalError, PreconditionError
from .measures import DENSITY_FLOOR, GaussianMeasure, GridMeasure, Lattice
from .rng import STREAM_NOISE
from .sde import simulate, time_grid

COND_CAP = 1e14
MASS_TOL = 1e-9
RENORM_BAND = 0.2


@dataclass(frozen=True)
class GaussianKernel:
    """``q(s, x, t, y) = N(y; Phi x + b, Sigma)``."""

    s: float
    t: float
    Phi: np.ndarray
    b: np.ndarray
    Sigma: np.ndarray
    spec: object = field(default=None, repr=False, compare=False)

    @classmethod
    def identity(cls, nd, s=0.0):
        return cls(s, s, np.eye(nd), np.zeros(nd), np.zeros((nd, nd)))

    @property
    def nd(self):
        return self.Phi.shape[0]

    def mean(self, x):
        return np.atleast_2d(x) @ self.Phi.T + self.b

    def logpdf(self, x, y, extra_cov=0.0):
        """Log density for paired rows of ``x`` and ``y`` (broadcast)."""
        cov = self.Sigma + extra_cov * np.eye(self.nd)
        L = np.linalg.cholesky(cov)
        r = np.atleast_2d(y) - self.mean(x)
        z = np.linalg.solve(L, r.T)
        return (-0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L)))
                - 0.5 * self.nd * np.log(2 * np.pi))

    def density(self, x, y, extra_cov=0.0):
        return np.exp(self.logpdf(x, y, extra_cov))

    def endpoint(self, x):
        """The law of the state at ``t`` started from ``x`` at ``s``."""
        return GaussianMeasure(self.mean(x)[0], self.Sigma)


def _van_loan(A, Q, tau):
    nd = A.shape[0]
    M = np.zeros((2 * nd, 2 * nd))
    M[:nd, :nd] = -A
    M[:nd, nd:] = Q
    M[nd:, nd:] = A.T
    F = expm(M * tau)
    Phi = F[nd:, nd:].T
    return Phi, Phi @ F[:nd, nd:]


def _rk4(A, Q, tau, n_steps):
    nd = A.shape[0]
    Phi, S = np.eye(nd), np.zeros((nd, nd))
    h = tau / n_steps

    def f(P, C):
        return A @ P, A @ C + C @ A.T + Q

    for _ in range(n_steps):
        k1 = f(Phi, S)
        k2 = f(Phi + 0.5 * h * k1[0], S + 0.5 * h * k1[1])
        k3 = f(Phi + 0.5 * h * k2[0], S + 0.5 * h * k2[1])
        k4 = f(Phi + h * k3[0], S + h * k3[1])
        Phi = Phi + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        S = S + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return Phi, S


def gaussian_kernel(spec, s, t, n_ode_steps=None, check_condition=True):
    """Closed-form kernel of a linear chain between times ``s < t``.

    The state transition matrix and controllability Gramian come from a
    Van Loan block exponential; pass ``n_ode_steps`` to integrate the
    moment ODEs with fixed-step RK4 instead.
    """
    if not s < t:
        raise ValueError(f"need s < t, got s={s}, t={t}")
    G = embedding_matrix(spec.n, spec.d)
    Q = G @ spec.a @ G.T
    if n_ode_steps:
        Phi, Sigma = _rk4(spec.A, Q, t - s, int(n_ode_steps))
    else:
        Phi, Sigma = _van_loan(spec.A, Q, t - s)
    Sigma = 0.5 * (Sigma + Sigma.T)
    if check_condition:
        w = np.linalg.eigvalsh(Sigma)
        if w[0] <= 0 or w[-1] / w[0] > COND_CAP:
            raise NumericalError(
                f"transition covariance is numerically singular on [{s}, {t}]: "
                f"smallest eigenvalue {w[0]:.3e}, largest {w[-1]:.3e}")
    return GaussianKernel(float(s), float(t), Phi, np.zeros(spec.nd), Sigma, spec)


# -- mollifier ----------------------------------------------------------------

@dataclass(frozen=True)
class Mollifier:
    """Isotropic Gaussian bump of width ``epsilon`` centred at ``center``."""

    center: np.ndarray
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("mollifier width must be positive")
        object.__setattr__(self, "center", np.atleast_1d(np.asarray(self.center, dtype=float)))

    @property
    def peak(self):
        return (2 * np.pi * self.epsilon**2) ** (-self.center.size / 2)

    def __call__(self, x):
        r2 = np.sum((np.atleast_2d(x) - self.center) ** 2, axis=1)
        return self.peak * np.exp(-0.5 * r2 / self.epsilon**2)

    def tail_sup(self, c):
        """``sup_{|x| > c} phi(x)``, attained on the sphere nearest the centre."""
        gap = max(0.0, c - np.linalg.norm(self.center))
        return self.peak * np.exp(-0.5 * gap**2 / self.epsilon**2)


# -- grid kernels -------------------------------------------------------------

@dataclass(frozen=True)
class GridKernel:
    """Tabulated ``q(s, x_i, t, y_j)`` for sources ``x_i`` and lattice targets ``y_j``.

    Rows are normalized so that ``sum_j values[i, j] * vol = 1``; the factor
    that was divided out is kept in ``raw_mass``.
    """

    lattice: Lattice
    sources: np.ndarray
    values: np.ndarray
    s: float
    t: float
    epsilon: float
    raw_mass: np.ndarray
    source_nodes: np.ndarray | None = None
    seed: int | None = None
    method: str = "gaussian"
    warnings: tuple = field(default=())

    @property
    def matrix(self):
        """Transition masses ``values * cell_volume`` (rows sum to one)."""
        return self.values * self.lattice.cell_volume

    def log_matrix(self):
        return np.log(np.maximum(self.values, DENSITY_FLOOR)) + np.log(self.lattice.cell_volume)

    def row_of_node(self, node):
        if self.source_nodes is None:
            raise PreconditionError("kernel sources are not lattice nodes")
        hits = np.flatnonzero(self.source_nodes == node)
        if hits.size == 0:
            raise PreconditionError(f"lattice node {node} is not a kernel source")
        return int(hits[0])

    def header(self):
        return {"lattice": self.lattice.header(), "s": self.s, "t": self.t,
                "epsilon": self.epsilon, "seed": self.seed, "method": self.method,
                "n_sources": int(self.sources.shape[0]),
                "source_nodes": None if self.source_nodes is None else self.source_nodes.tolist()}


def _normalize_rows(values, vol):
    mass = values.sum(axis=1) * vol
    if np.any(mass <= 0):
        row = int(np.flatnonzero(mass <= 0)[0])
        raise NumericalError(f"kernel row {row} carries no mass on the lattice")
    return values / mass[:, None], mass


def _resolve_sources(lattice, sources, source_nodes):
    if sources is None and source_nodes is None:
        source_nodes = np.arange(lattice.size)
    if source_nodes is not None:
        source_nodes = np.asarray(source_nodes, dtype=int)
        return lattice.nodes[source_nodes], source_nodes
    return np.atleast_2d(np.asarray(sources, dtype=float)), None


def tabulate_kernel(gk, lattice, sources=None, source_nodes=None, epsilon=0.0):
    """Tabulate a Gaussian kernel on a lattice, optionally mollified.

    With ``epsilon > 0`` entries are ``E[phi_eps(X_t - y_j)]``, the exact
    value of what :func:`mc_kernel` estimates.
    """
    src, nodes = _resolve_sources(lattice, sources, source_nodes)
    cov = gk.Sigma + epsilon**2 * np.eye(gk.nd)
    L = np.linalg.cholesky(cov)
    Linv = np.linalg.inv(L)
    tgt = lattice.nodes @ Linv.T
    mu = gk.mean(src) @ Linv.T
    logc = -np.sum(np.log(np.diag(L))) - 0.5 * gk.nd * np.log(2 * np.pi)
    d2 = (np.sum(mu * mu, axis=1)[:, None] + np.sum(tgt * tgt, axis=1)[None, :]
          - 2 * mu @ tgt.T)
    values = np.exp(logc - 0.5 * np.maximum(d2, 0.0))
    values, mass = _normalize_rows(values, lattice.cell_volume)
    return GridKernel(lattice, src, values, gk.s, gk.t, float(epsilon), mass, nodes,
                      method="gaussian")


def _mollified_counts(x, lattice, epsilon, chunk=2048):
    """Sum over rows of ``x`` of ``phi_eps(x - node)`` for every lattice node."""
    peak = (2 * np.pi * epsilon**2) ** (-lattice.dim / 2)
    total = np.zeros(lattice.size)
    for start in range(0, x.shape[0], chunk):
        xs = x[start:start + chunk]
        factors = [np.exp(-0.5 * ((xs[:, k, None] - ax[None, :]) / epsilon) ** 2)
                   for k, ax in enumerate(lattice.axes)]
        acc = factors[0]
        for f in factors[1:-1]:
            acc = (acc[:, :, None] * f[:, None, :]).reshape(xs.shape[0], -1)
        if lattice.dim > 1:
            total += (acc.T @ factors[-1]).ravel()
        else:
            total += acc.sum(axis=0)
    return peak * total


def mc_kernel(spec, s, sources, t, lattice, epsilon=None, n_paths=10_000, dt=1e-3, seed=0,
              source_nodes=None, threads=1):
    """Monte Carlo transition density with mollifier smoothing.

    From every source, ``n_paths`` Euler-Maruyama paths run from ``s`` to
    ``t``; entry ``(i, j)`` is the path average of ``phi_eps(X_t - y_j)``.
    Source ``i`` draws from its own counter-based stream, so results do not
    depend on ``threads``.
    """
    if epsilon is None:
        epsilon = 2.0 * float(lattice.spacing.max())
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    src, nodes = _resolve_sources(lattice, sources, source_nodes)
    if src.shape[1] != spec.nd or lattice.dim != spec.nd:
        raise ConfigError("source/lattice dimension does not match the chain")

    def row(i):
        x0 = np.broadcast_to(src[i], (n_paths, spec.nd))
        sim = simulate(spec, x0, s, t, dt, seed, stream=i)
        return _mollified_counts(sim.states[:, -1], lattice, epsilon) / n_paths

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(src.shape[0])))
    else:
        rows = [row(i) for i in range(src.shape[0])]
    values, mass = _normalize_rows(np.array(rows), lattice.cell_volume)
    warnings = tuple(
        f"source {i}: mollifier mass {m:.3f} leaks off the lattice"
        for i, m in enumerate(mass) if abs(m - 1.0) > RENORM_BAND)
    return GridKernel(lattice, src, values, float(s), float(t), float(epsilon), mass, nodes,
                      seed=int(seed), method="monte_carlo", warnings=warnings)


# -- push-forward -------------------------------------------------------------

def push_forward(kernel, mu):
    """Image of ``mu`` under the transition kernel."""
    if isinstance(kernel, GaussianKernel):
        if not isinstance(mu, GaussianMeasure):
            raise PreconditionError("a Gaussian kernel pushes Gaussian measures only")
        if mu.dim != kernel.nd:
            raise PreconditionError("measure and kernel dimensions differ")
        mean = kernel.Phi @ mu.mean + kernel.b
        cov = kernel.Phi @ mu.cov @ kernel.Phi.T + kernel.Sigma
        return GaussianMeasure(mean, 0.5 * (cov + cov.T))
    if not isinstance(mu, GridMeasure):
        raise PreconditionError("a grid kernel pushes grid measures only")
    if kernel.source_nodes is None or not mu.lattice.same_as(kernel.lattice):
        raise PreconditionError("measure is not supported on the kernel's source lattice")
    w = np.zeros(kernel.sources.shape[0])
    for node in mu.support:
        w[kernel.row_of_node(node)] = mu.weights[node]
    out = w @ kernel.matrix
    return GridMeasure(kernel.lattice, out, sigma_finite=mu.sigma_finite)


def default_box(endpoint, n_std=5.0):
    """Bounds ``mean +- n_std * std`` of a Gaussian endpoint law."""
    std = np.sqrt(np.diag(endpoint.cov))
    return endpoint.mean - n_std * std, endpoint.mean + n_std * std


# -- killed diffusion ---------------------------------------------------------

def killed_kernel_mc(spec, kappa, s, x, T, g, n_paths=10_000, dt=1e-3, seed=0):
    """Estimate ``E_{s,x}[g(X_T) exp(-int_s^T kappa(X_r) dr)]`` and its standard error."""
    x0 = np.broadcast_to(np.asarray(x, dtype=float), (n_paths, spec.nd))
    log_disc = np.zeros(n_paths)
    ts = time_grid(s, T, dt)

    def observe(k, t, xk):
        if k == ts.size - 1:
            return
        kv = np.asarray(kappa(xk), dtype=float)
        if np.any(kv < 0):
            i = int(np.flatnonzero(kv < 0)[0])
            raise PreconditionError(
                f"negative killing rate {kv[i]:.3e} on path {i} at t={t:.6g}, x={xk[i].tolist()}")
        log_disc[:] -= kv * (ts[k + 1] - ts[k])

    sim = simulate(spec, x0, s, T, dt, seed, STREAM_NOISE, observers=(observe,))
    gv = np.asarray(g(sim.states[:, -1]), dtype=float)
    if np.any(gv < 0):
        raise PreconditionError("terminal function g must be nonnegative")
    vals = gv * np.exp(log_disc)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
