"""Space-time harmonic functions ``h``, the optimal control ``a D_1 log h``
and the controlled simulation it drives.

Two representations of ``h`` are provided. For linear chains the terminal
data is a sum of quadratic exponentials and the kernel integral is done in
closed form, so ``log h`` and its gradient are exact at every ``(t, x)``.
For tabulated kernels ``log h`` is stored on lattice time slices and
interpolated.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import logsumexp

from .chain_model import ChainSpec, fd_gradient_hessian, fd_step_for
from .errors import ConfigError, ExtrapolationError, NumericalError, PreconditionError
from .kernels import GaussianKernel, GridKernel, gaussian_kernel
from .measures import DENSITY_FLOOR, GaussianMeasure, GridMeasure
from .rng import BLOCK_SIZE, STREAM_INIT, STREAM_NOISE, generator
from .sde import simulate

LOG_FLOOR = float(np.log(DENSITY_FLOOR))
DEFAULT_CONTROL_CAP = 1e6
_CHUNK = 4096


# -- terminal data ------------------------------------------------------------

@dataclass(frozen=True)
class QuadExp:
    """Terminal data ``r(y) = sum_k exp(c_k - y.P.y / 2 + b_k . y)``.

    All terms share the symmetric matrix ``P``; ``B`` holds one ``b_k`` per
    row.
    """

    P: np.ndarray
    B: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if P.shape != (B.shape[1], B.shape[1]) or c.size != B.shape[0]:
            raise ConfigError(f"inconsistent shapes P{P.shape}, B{B.shape}, c{c.shape}")
        object.__setattr__(self, "P", 0.5 * (P + P.T))
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)

    @property
    def nd(self):
        return self.P.shape[0]

    def log_value(self, y):
        y = np.atleast_2d(y)
        quad = -0.5 * np.einsum("ni,ij,nj->n", y, self.P, y)
        return logsumexp(quad[:, None] + y @ self.B.T + self.c[None, :], axis=1)


def constant_terminal(nd, value=1.0):
    """Terminal data identically equal to ``value``."""
    if not value > 0:
        raise PreconditionError("terminal data must be positive somewhere")
    return QuadExp(np.zeros((nd, nd)), np.zeros((1, nd)), [np.log(value)])


def gaussian_ratio(target, reference):
    """Density ratio ``d target / d reference`` of two nondegenerate Gaussians."""
    if target.is_dirac or reference.is_dirac:
        raise PreconditionError("both Gaussian laws must be nondegenerate")
    Ct = np.linalg.inv(target.cov)
    Cr = np.linalg.inv(reference.cov)
    P = Ct - Cr
    b = Ct @ target.mean - Cr @ reference.mean
    logdet_t = np.linalg.slogdet(target.cov)[1]
    logdet_r = np.linalg.slogdet(reference.cov)[1]
    c = (-0.5 * target.mean @ Ct @ target.mean + 0.5 * reference.mean @ Cr @ reference.mean
         - 0.5 * logdet_t + 0.5 * logdet_r)
    return QuadExp(P, b[None, :], [c])


def node_terminal(lattice, rho, epsilon):
    """Lattice terminal factors ``rho`` spread by a Gaussian bump of width ``epsilon``.

    ``r(y) = sum_j vol rho_j phi_eps(y - z_j)``, i.e. the mollified
    version of the discrete terminal measure ``rho_j vol``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    rho = np.asarray(rho, dtype=float).ravel()
    keep = np.flatnonzero(rho > 0)
    if keep.size == 0:
        raise PreconditionError("terminal data is identically zero")
    z = lattice.nodes[keep]
    nd = lattice.dim
    e2 = epsilon**2
    c = (np.log(rho[keep] * lattice.cell_volume) - 0.5 * np.sum(z * z, axis=1) / e2
         - 0.5 * nd * np.log(2 * np.pi * e2))
    return QuadExp(np.eye(nd) / e2, z / e2, c)


# -- h fields -----------------------------------------------------------------

class HField:
    """Positive space-time harmonic function, accessed through ``log h``."""

    t0 = 0.0
    T = 1.0
    nd = 1
    mode = "abstract"

    def log_h(self, t, x):
        raise NotImplementedError

    def grad_log_h(self, t, x):
        """Full-state gradient of ``log h``, shape ``(N, nd)``."""
        raise NotImplementedError

    def h(self, t, x):
        return np.exp(self.log_h(t, x))

    def _check_time(self, t):
        if not (self.t0 - 1e-12 <= t <= self.T + 1e-12):
            raise PreconditionError(f"t={t} outside [{self.t0}, {self.T}]")


class AnalyticH(HField):
    """``h(t, x) = E[r(X_T) | X_t = x]`` for a linear chain and quadratic-exponential ``r``.

    With ``mu = Phi(t,T) x``, ``S = Sigma(t,T) (+ eps^2 I)`` and
    ``M = (I + S P)^-1`` each term integrates to
    ``-logdet(I+SP)/2 - mu.PM.mu/2 + b.M.mu + b.MS.b/2 + c``, which stays
    finite as ``S -> 0``.
    """

    mode = "analytic"

    def __init__(self, spec, terms, t0, T, epsilon=0.0):
        self.spec = spec
        self.terms = tuple(terms)
        self.t0, self.T = float(t0), float(T)
        self.nd = spec.nd
        self.epsilon = float(epsilon)
        for q in self.terms:
            if q.nd != self.nd:
                raise ConfigError("terminal data dimension does not match the chain")
        if all(np.all(np.isneginf(q.c)) for q in self.terms):
            raise PreconditionError("terminal data is identically zero")
        self._cache = {}

    def _slice(self, t):
        key = float(t)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        nd = self.nd
        if self.T - key > 1e-14:
            gk = gaussian_kernel(self.spec, key, self.T, check_condition=False)
            Phi, S = gk.Phi, gk.Sigma
        else:
            Phi, S = np.eye(nd), np.zeros((nd, nd))
        S = S + self.epsilon**2 * np.eye(nd)
        groups = []
        for q in self.terms:
            IpSP = np.eye(nd) + S @ q.P
            sign, logdet = np.linalg.slogdet(IpSP)
            if sign <= 0:
                raise NumericalError(
                    f"terminal data is not integrable against the kernel at t={key}")
            M = np.linalg.inv(IpSP)
            PM = q.P @ M
            BM = q.B @ M
            const = q.c - 0.5 * logdet + 0.5 * np.einsum("ki,kj,ij->k", BM, q.B, S)
            groups.append((0.5 * (PM + PM.T), BM, const))
        out = (Phi, groups)
        if len(self._cache) > 8192:
            self._cache.clear()
        self._cache[key] = out
        return out

    def _eval(self, t, x, grad):
        """``log h`` (and its gradient) for one chunk of states."""
        Phi, groups = self._slice(t)
        mu = x @ Phi.T
        logs = []
        for PMs, BM, const in groups:
            L = mu @ BM.T
            L += const[None, :]
            L -= 0.5 * np.einsum("ni,ij,nj->n", mu, PMs, mu)[:, None]
            logs.append(L)
        top = np.max([L.max(axis=1) for L in logs], axis=0)
        total = np.zeros(x.shape[0])
        g = np.zeros_like(mu) if grad else None
        for L, (PMs, BM, _) in zip(logs, groups):
            L -= top[:, None]
            np.exp(L, out=L)
            s = L.sum(axis=1)
            total += s
            if grad:
                g += L @ BM - s[:, None] * (mu @ PMs)
        logh = top + np.log(total)
        return (logh, (g / total[:, None]) @ Phi) if grad else (logh, None)

    def log_h(self, t, x):
        self._check_time(t)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(x.shape[0])
        for s in range(0, x.shape[0], _CHUNK):
            out[s:s + _CHUNK] = self._eval(t, x[s:s + _CHUNK], False)[0]
        return out

    def grad_log_h(self, t, x):
        self._check_time(t)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        for s in range(0, x.shape[0], _CHUNK):
            out[s:s + _CHUNK] = self._eval(t, x[s:s + _CHUNK], True)[1]
        return out


class GridH(HField):
    """``log h`` on lattice time slices, multilinear in space and linear in time.

    Gradients are central differences of the stored ``log h`` (one-sided
    at the lattice faces), interpolated the same way.
    """

    mode = "grid"

    def __init__(self, lattice, times, log_slices):
        self.lattice = lattice
        self.times = np.asarray(times, dtype=float)
        if self.times.ndim != 1 or self.times.size < 2 or np.any(np.diff(self.times) <= 0):
            raise ConfigError("slice times must be increasing, at least two of them")
        L = np.asarray(log_slices, dtype=float).reshape(self.times.size, lattice.size)
        if not np.all(np.isfinite(L)):
            raise NumericalError("log h slices must be finite")
        self.log_slices = L
        self.t0, self.T = float(self.times[0]), float(self.times[-1])
        self.nd = lattice.dim
        shape = lattice.shape
        self._val = []
        self._grad = []
        for row in L:
            arr = row.reshape(shape)
            self._val.append(RegularGridInterpolator(lattice.axes, arr))
            grads = np.gradient(arr, *lattice.axes, edge_order=1)
            if lattice.dim == 1:
                grads = [grads]
            self._grad.append([RegularGridInterpolator(lattice.axes, g) for g in grads])

    def _bracket(self, t, x):
        self._check_time(t)
        ok = self.lattice.inside(x)
        if not np.all(ok):
            i = int(np.flatnonzero(~ok)[0])
            raise ExtrapolationError(
                f"h evaluated outside the lattice at t={t:.6g}, x={x[i].tolist()}")
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2))
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return k, float(np.clip(w, 0.0, 1.0))

    def log_h(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k, w = self._bracket(t, x)
        return (1 - w) * self._val[k](x) + w * self._val[k + 1](x)

    def grad_log_h(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k, w = self._bracket(t, x)
        lo = np.stack([g(x) for g in self._grad[k]], axis=1)
        hi = np.stack([g(x) for g in self._grad[k + 1]], axis=1)
        return (1 - w) * lo + w * hi


class FunctionH(HField):
    """Wrap a user ``log h(t, x)``; the gradient defaults to central differences.

    No harmonicity is assumed, which makes this the vehicle for negative
    controls.
    """

    mode = "function"

    def __init__(self, log_h, nd, T, t0=0.0, grad_log_h=None):
        self._f = log_h
        self._g = grad_log_h
        self.nd, self.T, self.t0 = int(nd), float(T), float(t0)

    def log_h(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self._f(t, x), dtype=float).reshape(x.shape[0])

    def grad_log_h(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self._g is not None:
            return np.asarray(self._g(t, x), dtype=float).reshape(x.shape)
        out = np.empty_like(x)
        for i, xi in enumerate(x):
            step = fd_step_for(xi)
            e = np.eye(self.nd) * step
            out[i] = (self.log_h(t, xi + e) - self.log_h(t, xi - e)) / (2 * step)
        return out


def build_h(kernel, terminal, epsilon=0.0):
    """Build ``h(t, x) = int q(t, x, T, y) r(y) dy`` from a kernel and terminal data.

    ``kernel`` is either a :class:`GaussianKernel` on ``[s, T]`` produced by
    :func:`gaussian_kernel` (``terminal`` then a :class:`QuadExp` or a list
    of them, with optional mollifier width ``epsilon`` added to the kernel
    covariance), or a sequence of :class:`GridKernel` objects from the slice
    times to a common ``T`` with ``terminal`` the node values of ``r``.
    """
    if isinstance(kernel, GaussianKernel):
        if kernel.spec is None:
            raise ConfigError("the Gaussian kernel does not carry its chain")
        terms = [terminal] if isinstance(terminal, QuadExp) else list(terminal)
        return AnalyticH(kernel.spec, terms, kernel.s, kernel.t, epsilon)
    kernels = [kernel] if isinstance(kernel, GridKernel) else list(kernel)
    if not kernels or not all(isinstance(k, GridKernel) for k in kernels):
        raise ConfigError("expected a Gaussian kernel or grid kernels")
    lat = kernels[0].lattice
    T = kernels[0].t
    r = np.asarray(terminal, dtype=float).ravel()
    if r.size != lat.size:
        raise ConfigError(f"terminal data needs {lat.size} node values")
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise PreconditionError("terminal data must be finite and nonnegative")
    if not np.any(r > 0):
        raise PreconditionError("terminal data is identically zero")
    with np.errstate(divide="ignore"):
        logr = np.log(r)
    order = sorted(kernels, key=lambda k: k.s)
    slices = []
    for k in order:
        if not (k.lattice.same_as(lat) and abs(k.t - T) < 1e-12):
            raise ConfigError("grid kernels must share the lattice and terminal time")
        if k.source_nodes is None or not np.array_equal(k.source_nodes, np.arange(lat.size)):
            raise ConfigError("grid kernels must have every lattice node as a source")
        row = logsumexp(k.log_matrix() + logr[None, :], axis=1)
        if not np.any(np.isfinite(row)):
            raise PreconditionError("terminal data vanishes on the reachable support")
        slices.append(np.maximum(row, LOG_FLOOR))
    slices.append(np.maximum(logr, LOG_FLOOR))
    times = [k.s for k in order] + [T]
    return GridH(lat, times, np.array(slices))


def bridge_h(spec, x0, muT, t0=0.0, T=None):
    """``h`` for a Dirac start at ``x0`` and Gaussian target ``muT`` on a linear chain.

    The terminal data is ``d muT / d S_T delta_x0``, so ``h(t0, x0) = 1``.
    """
    T = spec.T if T is None else T
    gk = gaussian_kernel(spec, t0, T)
    return build_h(gk, gaussian_ratio(muT, gk.endpoint(np.asarray(x0, dtype=float))))


# -- control ------------------------------------------------------------------

def _as_chain(spec):
    return spec if isinstance(spec, ChainSpec) else spec.to_chain()


def optimal_control(h, spec, t, x):
    """``u* = a(t, x) D_{x^1} log h(t, x)``; ``(N, d)`` for batched ``x``."""
    if not t < h.T:
        raise PreconditionError(f"the control is defined for t < T={h.T}, got t={t}")
    chain = _as_chain(spec)
    x = np.asarray(x, dtype=float)
    xb = np.atleast_2d(x)
    g = h.grad_log_h(t, xb)[:, :chain.d]
    a = chain.diffusion(t, xb)
    u = np.einsum("nij,nj->ni", a, g)
    return u[0] if x.ndim == 1 else u


def control_law(h, spec):
    """Feedback ``(t, x) -> u*`` for :func:`simulate_controlled`."""
    chain = _as_chain(spec)

    def law(t, x):
        return optimal_control(h, chain, t, x)

    return law


# -- simulation ---------------------------------------------------------------

@dataclass
class PathEnsemble:
    times: np.ndarray
    states: np.ndarray          # (n_paths, n_times, nd)
    energy: np.ndarray
    girsanov_logw: np.ndarray
    seed: int
    dt: float
    saturations: int = 0
    controls: np.ndarray | None = field(default=None, repr=False)
    energy_trace: np.ndarray | None = None
    logw_trace: np.ndarray | None = None

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def initial(self):
        return self.states[:, 0]

    @property
    def terminal(self):
        return self.states[:, -1]


def sample_initial(init, n_paths, seed, nd):
    """Draw ``n_paths`` initial states blockwise from the init stream."""
    if isinstance(init, (GaussianMeasure, GridMeasure)):
        dim = init.dim if isinstance(init, GaussianMeasure) else init.lattice.dim
        if dim != nd:
            raise ConfigError(f"initial law has dimension {dim}, chain has {nd}")
        out = np.empty((n_paths, nd))
        for k, s in enumerate(range(0, n_paths, BLOCK_SIZE)):
            e = min(s + BLOCK_SIZE, n_paths)
            out[s:e] = init.sample(e - s, generator(seed, STREAM_INIT, k))
        return out
    x = np.asarray(init, dtype=float)
    if x.shape == (nd,):
        return np.broadcast_to(x, (n_paths, nd)).copy()
    if x.shape == (n_paths, nd):
        return x.copy()
    raise ConfigError(f"cannot read an initial state of shape {x.shape}")


def simulate_controlled(spec, control, init, dt, n_paths, seed, t0=0.0, T=None,
                        control_cap=DEFAULT_CONTROL_CAP, record_every=None, record_times=None,
                        store_controls=False):
    """Euler-Maruyama ensemble of the chain under ``control`` (or none).

    ``control`` is a callable ``(t, x) -> (N, d)`` or an :class:`HField`,
    in which case its optimal control is used. Only the initial and final
    states are recorded unless ``record_every``/``record_times`` ask for
    more. Controls above ``control_cap`` in norm are clipped and counted.
    """
    chain = _as_chain(spec)
    T = chain.T if T is None else T
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if isinstance(control, HField):
        control = control_law(control, chain)
    x0 = sample_initial(init, int(n_paths), seed, chain.nd)
    sim = simulate(chain, x0, t0, T, dt, seed, STREAM_NOISE, control=control,
                   control_cap=control_cap, record_every=record_every,
                   record_times=record_times, store_controls=store_controls)
    return PathEnsemble(sim.times, sim.states, sim.energy, sim.girsanov_logw, int(seed),
                        float(dt), sim.saturations, sim.controls, sim.energy_trace,
                        sim.logw_trace)


# -- transformed kernel, martingale, value function ---------------------------

def h_transform_density(kernel, h, s, x, t, y):
    """``q^h(s, x, t, y) = q(s, x, t, y) h(t, y) / h(s, x)`` for each row of ``y``.

    For a :class:`GridKernel`, ``x`` must be one of its sources and ``y``
    lattice nodes.
    """
    if not s < t:
        raise ValueError(f"need s < t, got s={s}, t={t}")
    x = np.asarray(x, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if isinstance(kernel, GaussianKernel):
        if abs(kernel.s - s) > 1e-12 or abs(kernel.t - t) > 1e-12:
            raise PreconditionError("kernel times do not match (s, t)")
        logq = kernel.logpdf(x, y)
    else:
        hits = np.flatnonzero(np.all(np.isclose(kernel.sources, x, rtol=0, atol=1e-12), axis=1))
        if hits.size == 0:
            raise PreconditionError("x is not a source of the grid kernel")
        cols = np.array([kernel.lattice.nearest_node(yi) for yi in y])
        with np.errstate(divide="ignore"):
            logq = np.log(kernel.values[hits[0], cols])
    return np.exp(logq + h.log_h(t, y) - h.log_h(s, x[None])[0])


@dataclass
class MartingaleStats:
    times: np.ndarray
    mean_z: np.ndarray
    se_z: np.ndarray
    mean_zlogz: np.ndarray
    se_zlogz: np.ndarray

    def martingale_ok(self, n_se=3.0):
        return bool(np.all(np.abs(self.mean_z - 1.0) <= n_se * self.se_z + 1e-12))

    def submartingale_ok(self, n_se=3.0):
        """``E[z log z]`` never drops by more than ``n_se`` combined standard errors."""
        m, s = self.mean_zlogz, self.se_zlogz
        drops = m[:-1] - m[1:]
        band = n_se * np.sqrt(s[:-1] ** 2 + s[1:] ** 2) + 1e-12
        return bool(np.all(drops <= band))


def martingale_check(h, ensemble):
    """Per recorded time, mean and standard error of ``z_t = h(t, x_t) / h(t0, x_t0)``
    and of ``z_t log z_t``, for an ensemble of the uncontrolled chain."""
    log0 = h.log_h(ensemble.times[0], ensemble.states[:, 0])
    n = ensemble.n_paths
    rows = []
    for k, t in enumerate(ensemble.times):
        lz = h.log_h(t, ensemble.states[:, k]) - log0
        z = np.exp(lz)
        zl = z * lz
        rows.append((z.mean(), z.std(ddof=1) / np.sqrt(n), zl.mean(), zl.std(ddof=1) / np.sqrt(n)))
    r = np.array(rows)
    return MartingaleStats(np.asarray(ensemble.times), r[:, 0], r[:, 1], r[:, 2], r[:, 3])


def value_function(h, t, x):
    """``J = -log h``."""
    lh = h.log_h(t, np.atleast_2d(x))
    if np.any(lh <= LOG_FLOOR):
        raise NumericalError(f"h underflows at t={t}")
    return -lh if np.ndim(x) > 1 else float(-lh[0])


def hjb_residual(h, spec, t, x, fd_step=None, quadratic_sign=-1.0):
    """Finite-difference residual of ``dJ/dt + L J + s a D_1 J . D_1 J / 2`` for ``J = -log h``.

    ``quadratic_sign = -1`` is the equation ``-log h`` satisfies when ``h``
    solves the backward equation. ``+1`` is the variant satisfied by
    ``+log h``; it is kept for comparison.
    """
    chain = _as_chain(spec)
    x = np.asarray(x, dtype=float)
    step = fd_step if fd_step is not None else fd_step_for(x)

    def J(z):
        return value_function(h, t, z)

    _, grad, hess = fd_gradient_hessian(J, x, chain.d, step)
    m = chain.drift_batch(t, x[None])[0]
    a = chain.diffusion(t, x[None])[0]
    LJ = 0.5 * np.trace(a @ hess) + m @ grad
    g1 = grad[:chain.d]

    dt = 1e-5 * max(1.0, abs(h.T))
    if t - dt >= h.t0 and t + dt <= h.T:
        dJdt = (value_function(h, t + dt, x) - value_function(h, t - dt, x)) / (2 * dt)
    elif t + 2 * dt <= h.T:
        j0, j1, j2 = (value_function(h, t + k * dt, x) for k in range(3))
        dJdt = (-3 * j0 + 4 * j1 - j2) / (2 * dt)
    else:
        j0, j1, j2 = (value_function(h, t - k * dt, x) for k in range(3))
        dJdt = (3 * j0 - 4 * j1 + j2) / (2 * dt)
    return float(dJdt + LJ + quadratic_sign * 0.5 * g1 @ a @ g1)
