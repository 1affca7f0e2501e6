"""Action functionals of the chain, their minimizers and small-tube statistics.

Only the first block carries noise, so a path of finite action must follow
the drift exactly in blocks ``j >= 2``. Those relations are imposed as hard
constraints and only the block-1 defect is penalized.

Discretization: nodes ``t_k = t0 + k dt``; on each step the block-1
defect is ``(phi_{k+1} - phi_k) / dt - (b_k + b_{k+1}) / 2`` with ``b`` the
(possibly ``h``-modified) block-1 drift, weighted by ``sigma^-1`` at the
step midpoint. The constraints use the same trapezoid average.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import MatrixRankWarning, splu

from .chain_model import ChainSpec
from .errors import (
    ConfigError,
    InfeasibleError,
    InsufficientStatisticsError,
    PreconditionError,
)
from .htransform import hjb_residual
from .rng import STREAM_NOISE
from .sde import simulate, time_grid

MIN_STEPS = 16
DEFECT_TOL = 1e-6
STATIONARITY_TOL = 1e-10
FEASIBILITY_TOL = 1e-8
MIN_TUBE_HITS = 100


def _as_chain(spec):
    return spec if isinstance(spec, ChainSpec) else spec.to_chain()


# -- pointwise Lagrangians ----------------------------------------------------

def _lagrangian(chain, drift, t, phi, phidot, tol):
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    phidot = np.atleast_2d(np.asarray(phidot, dtype=float))
    d = chain.d
    defect = phidot - drift
    scale = 1.0 + np.abs(phidot[:, d:]) + np.abs(drift[:, d:])
    bad = np.any(np.abs(defect[:, d:]) > tol * scale, axis=1)
    sig = chain.sigma_batch(t, phi)
    v = np.linalg.solve(sig, defect[:, :d, None])[..., 0]
    out = 0.5 * np.sum(v * v, axis=1)
    out[bad] = np.inf
    return out if out.size > 1 else float(out[0])


def lagrangian(spec, t, phi, phidot, tol=DEFECT_TOL):
    """``|sigma^-1 (phidot^1 - m_1)|^2 / 2``, or ``inf`` when a deterministic
    block leaves its drift (``|phidot^j - m_j| > tol`` relative, ``j >= 2``)."""
    chain = _as_chain(spec)
    drift = chain.drift_batch(t, phi)
    return _lagrangian(chain, drift, t, phi, phidot, tol)


def _h_drift(chain, h, t, phi):
    drift = chain.drift_batch(t, phi)
    g = h.grad_log_h(t, np.atleast_2d(phi))[:, :chain.d]
    a = chain.diffusion(t, phi)
    drift[:, :chain.d] += np.einsum("nij,nj->ni", a, g)
    return drift


def lagrangian_h(spec, h, t, phi, phidot, tol=DEFECT_TOL):
    """The same functional for the drift ``M + G a D_1 log h``."""
    chain = _as_chain(spec)
    return _lagrangian(chain, _h_drift(chain, h, t, np.atleast_2d(phi)), t, phi, phidot, tol)


# -- discrete action ----------------------------------------------------------

class _Problem:
    """Residual and constraint maps of the discrete action on a fixed grid."""

    def __init__(self, chain, h, times):
        self.chain, self.h, self.times = chain, h, times
        self.dt = np.diff(times)
        self.d, self.nd = chain.d, chain.nd

    def drift_nodes(self, phi):
        out = np.empty_like(phi)
        for k, t in enumerate(self.times):
            x = phi[k:k + 1]
            out[k] = (self.chain.drift_batch(t, x)[0] if self.h is None
                      else _h_drift(self.chain, self.h, t, x)[0])
        return out

    def maps(self, phi):
        d = self.d
        m = self.drift_nodes(phi)
        vel = np.diff(phi, axis=0) / self.dt[:, None]
        avg = 0.5 * (m[:-1] + m[1:])
        tm = 0.5 * (self.times[:-1] + self.times[1:])
        xm = 0.5 * (phi[:-1] + phi[1:])
        r = np.empty((len(self.dt), d))
        for k in range(len(self.dt)):
            sig = self.chain.sigma_batch(tm[k], xm[k:k + 1])[0]
            r[k] = np.sqrt(self.dt[k]) * np.linalg.solve(sig, vel[k, :d] - avg[k, :d])
        c = vel[:, d:] - avg[:, d:]
        return r.ravel(), c.ravel()

    def jacobians(self, phi, step=1e-6):
        """Central differences, two interleaved colours of interior nodes per coordinate."""
        n_int = phi.shape[0] - 2
        r0, c0 = self.maps(phi)
        Jr = np.zeros((r0.size, n_int * self.nd))
        Jc = np.zeros((c0.size, n_int * self.nd))
        nr, nc = r0.size // (n_int + 1), c0.size // (n_int + 1)
        for colour in (0, 1):
            nodes = np.arange(1 + colour, n_int + 1, 2)
            for comp in range(self.nd):
                hstep = step * (1.0 + np.abs(phi[nodes, comp]))
                pp, pm = phi.copy(), phi.copy()
                pp[nodes, comp] += hstep
                pm[nodes, comp] -= hstep
                rp, cp = self.maps(pp)
                rm, cm = self.maps(pm)
                dr = (rp - rm).reshape(-1, nr)
                dc = (cp - cm).reshape(-1, nc) if nc else None
                for node, hs in zip(nodes, hstep):
                    col = (node - 1) * self.nd + comp
                    for k in (node - 1, node):
                        Jr[k * nr:(k + 1) * nr, col] = dr[k] / (2 * hs)
                        if nc:
                            Jc[k * nc:(k + 1) * nc, col] = dc[k] / (2 * hs)
        return r0, c0, Jr, Jc


def _sparse_solve(K, rhs):
    """Banded systems go through a sparse LU; singular ones fall back to least squares."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            sol = splu(sparse.csc_matrix(K)).solve(rhs)
        if np.all(np.isfinite(sol)):
            return sol
    except (RuntimeError, MatrixRankWarning):
        pass
    return np.linalg.lstsq(K, rhs, rcond=None)[0]


def _kkt(Jr, Jc, r, c):
    n = Jr.shape[1]
    m = Jc.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = Jr.T @ Jr
    K[:n, n:] = Jc.T
    K[n:, :n] = Jc
    rhs = np.concatenate([-Jr.T @ r, -c])
    sol = _sparse_solve(K, rhs)
    return sol[:n], sol[n:]


def _stationarity(Jr, Jc, r):
    """``min_lambda |J_r^T r + J_c^T lambda|_inf``: the discrete Euler-Lagrange residual."""
    g = Jr.T @ r
    if Jc.shape[0] == 0:
        return float(np.abs(g).max(initial=0.0))
    lam = _sparse_solve(Jc @ Jc.T, -Jc @ g)
    return float(np.abs(g + Jc.T @ lam).max(initial=0.0))


@dataclass
class ExtremalPath:
    times: np.ndarray
    phi: np.ndarray
    phidot: np.ndarray
    action: float
    residual: float
    which: str = "L"
    iterations: int = 0
    constraint_violation: float = 0.0

    def header(self):
        nd = self.phi.shape[1]
        return ["t"] + [f"phi{i}" for i in range(nd)] + [f"phidot{i}" for i in range(nd)]

    def rows(self):
        return np.column_stack([self.times, self.phi, self.phidot])


def solve_euler_lagrange(spec, phi0, phiT, n_steps=256, h=None, t0=0.0, T=None,
                         max_iter=50, init=None):
    """Minimize the discrete action between fixed end states.

    ``h`` switches to the ``h``-modified drift. The problem is solved by
    Gauss-Newton steps on the constrained least-squares form (exact in one
    step when the drift is affine) until the Euler-Lagrange residual or the
    step falls below ``1e-10``.
    """
    chain = _as_chain(spec)
    T = chain.T if T is None else float(T)
    if n_steps < MIN_STEPS:
        raise ConfigError(f"n_steps must be at least {MIN_STEPS}")
    phi0 = np.asarray(phi0, dtype=float)
    phiT = np.asarray(phiT, dtype=float)
    if phi0.shape != (chain.nd,) or phiT.shape != (chain.nd,):
        raise ConfigError(f"boundary states must have {chain.nd} components")
    times = np.linspace(t0, T, int(n_steps) + 1)
    prob = _Problem(chain, h, times)
    if init is None:
        s = (times - t0) / (T - t0)
        phi = phi0[None, :] * (1 - s)[:, None] + phiT[None, :] * s[:, None]
    else:
        phi = np.array(init, dtype=float, copy=True)
        phi[0], phi[-1] = phi0, phiT
    it = 0
    for it in range(1, max_iter + 1):
        r, c, Jr, Jc = prob.jacobians(phi)
        delta, _ = _kkt(Jr, Jc, r, c)
        phi[1:-1] += delta.reshape(-1, chain.nd)
        if np.abs(delta).max(initial=0.0) <= 1e-12 * (1.0 + np.abs(phi).max()):
            break
        if it >= 2 and _stationarity(Jr, Jc, r) <= STATIONARITY_TOL and \
                np.abs(c).max(initial=0.0) <= FEASIBILITY_TOL:
            break
    r, c, Jr, Jc = prob.jacobians(phi)
    viol = float(np.abs(c).max(initial=0.0))
    if viol > FEASIBILITY_TOL:
        raise InfeasibleError(
            f"no path on {n_steps} steps satisfies the drift constraints between "
            f"{phi0.tolist()} and {phiT.tolist()} (violation {viol:.3e})")
    phidot = np.gradient(phi, times, axis=0, edge_order=2)
    return ExtremalPath(times, phi, phidot, float(0.5 * r @ r), _stationarity(Jr, Jc, r),
                        "L" if h is None else "Lh", it, viol)


def path_action(spec, path, h=None):
    """Discrete action of an arbitrary node path (``inf`` if it breaks the constraints)."""
    chain = _as_chain(spec)
    r, c = _Problem(chain, h, path.times).maps(path.phi)
    if np.abs(c).max(initial=0.0) > FEASIBILITY_TOL:
        return np.inf
    return float(0.5 * r @ r)


def euler_lagrange_residual(spec, path, h=None):
    """Discrete Euler-Lagrange residual of ``path`` for the (``h``-modified) action."""
    r, c, Jr, Jc = _Problem(_as_chain(spec), h, path.times).jacobians(path.phi)
    return _stationarity(Jr, Jc, r)


# -- tube probabilities -------------------------------------------------------

def tube_sup_distances(spec, paths, n_paths, dt, seed, t0=None):
    """Per simulated path and per reference path, the sup over simulation
    times of the Euclidean distance to the (linearly interpolated) reference."""
    chain = _as_chain(spec)
    start = paths[0].phi[0]
    for p in paths[1:]:
        if not np.allclose(p.phi[0], start, atol=1e-12):
            raise PreconditionError("all reference paths must start at the same state")
    t0 = paths[0].times[0] if t0 is None else t0
    T = paths[0].times[-1]
    sup = np.zeros((int(n_paths), len(paths)))

    def observe(k, t, x):
        for i, p in enumerate(paths):
            ref = np.array([np.interp(t, p.times, p.phi[:, j]) for j in range(chain.nd)])
            np.maximum(sup[:, i], np.linalg.norm(x - ref, axis=1), out=sup[:, i])

    x0 = np.broadcast_to(start, (int(n_paths), chain.nd))
    simulate(chain, x0, t0, T, dt, seed, STREAM_NOISE, observers=(observe,))
    return sup


@dataclass
class TubeRatio:
    epsilon: float
    ratio: float
    stderr: float
    prediction: float
    hits_a: int
    hits_b: int
    delta_action: float

    @property
    def relative_error(self):
        return self.ratio / self.prediction - 1.0


def _ratio_from_sup(sup_a, sup_b, eps, action_a, action_b, min_hits):
    ia, ib = sup_a < eps, sup_b < eps
    ha, hb = int(ia.sum()), int(ib.sum())
    if min(ha, hb) < min_hits:
        raise InsufficientStatisticsError(
            f"only {min(ha, hb)} paths stay in a tube of radius {eps:g} "
            f"(need {min_hits}); use a larger radius or more paths")
    n = sup_a.size
    pa, pb, pab = ha / n, hb / n, float(np.mean(ia & ib))
    ratio = hb / ha
    var_log = (1 - pa) / (n * pa) + (1 - pb) / (n * pb) - 2 * (pab - pa * pb) / (n * pa * pb)
    dA = action_b - action_a
    return TubeRatio(float(eps), ratio, ratio * float(np.sqrt(max(var_log, 0.0))),
                     float(np.exp(-dA)), ha, hb, float(dA))


def tube_probability_ratio(spec, phiA, phiB, epsilon, n_paths=100_000, dt=1e-3, seed=0,
                           min_hits=MIN_TUBE_HITS):
    """``P(tube around phiB) / P(tube around phiA)`` with its standard error,
    next to the small-tube prediction ``exp(-(action_B - action_A))``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    sup = tube_sup_distances(spec, [phiA, phiB], n_paths, dt, seed)
    return _ratio_from_sup(sup[:, 0], sup[:, 1], epsilon, phiA.action, phiB.action, min_hits)


def action_ratio(phiA, phiB):
    return float(np.exp(phiB.action - phiA.action))


def tube_family(spec, paths, epsilons, n_paths=100_000, dt=1e-3, seed=0,
                min_hits=MIN_TUBE_HITS):
    """Ratios of every path against ``paths[0]`` at the finest radius in
    ``epsilons`` that keeps ``min_hits`` hits in every tube."""
    sup = tube_sup_distances(spec, paths, n_paths, dt, seed)
    for eps in sorted(epsilons):
        if np.all((sup < eps).sum(axis=0) >= min_hits):
            return [_ratio_from_sup(sup[:, 0], sup[:, i], eps, paths[0].action,
                                    p.action, min_hits) for i, p in enumerate(paths)]
    raise InsufficientStatisticsError(
        f"no radius in {sorted(epsilons)} keeps {min_hits} hits in every tube")


# -- invariance under the h-transform ----------------------------------------

@dataclass
class Prop6Report:
    path_L: ExtremalPath
    path_Lh: ExtremalPath
    sup_distance: float
    residual_L_in_Lh: float
    residual_Lh_in_L: float
    backward_residual: float
    hypothesis_holds: bool
    tolerance: float
    forced: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.hypothesis_holds and self.sup_distance <= self.tolerance

    def to_json(self):
        return {"sup_distance": self.sup_distance, "residual_L_in_Lh": self.residual_L_in_Lh,
                "residual_Lh_in_L": self.residual_Lh_in_L,
                "backward_residual": self.backward_residual,
                "hypothesis_holds": self.hypothesis_holds, "forced": self.forced,
                "tolerance": self.tolerance, "passed": self.passed,
                "action_L": self.path_L.action, "action_Lh": self.path_Lh.action,
                "n_steps": len(self.path_L.times) - 1}


def backward_residual(spec, h, phi0, phiT, n_probe=16, t0=0.0, T=None):
    """Largest residual of the backward equation for ``h`` (in log form) on
    probes along the segment from ``phi0`` to ``phiT``."""
    chain = _as_chain(spec)
    T = chain.T if T is None else T
    s = (np.arange(n_probe) + 0.5) / n_probe
    worst = 0.0
    for sk in s:
        x = (1 - sk) * np.asarray(phi0, dtype=float) + sk * np.asarray(phiT, dtype=float)
        t = t0 + sk * (T - t0)
        worst = max(worst, abs(hjb_residual(h, chain, t, x)))
    return worst


def prop6_check(spec, h, phi0, phiT, n_steps=512, force=False, tol=1e-4,
                residual_tol=1e-4, n_probe=16):
    """Compare the minimizers of the plain and ``h``-modified actions.

    Refuses unless ``h`` solves the backward equation on probe points;
    ``force=True`` runs the comparison anyway, which is how negative controls
    are produced.
    """
    res = backward_residual(spec, h, phi0, phiT, n_probe)
    holds = res <= residual_tol
    if not holds and not force:
        raise PreconditionError(
            f"h does not solve the backward equation (residual {res:.3e} > {residual_tol:.1e}); "
            "the two actions need not share extremals")
    pL = solve_euler_lagrange(spec, phi0, phiT, n_steps)
    pH = solve_euler_lagrange(spec, phi0, phiT, n_steps, h=h, init=pL.phi)
    dist = float(np.abs(pL.phi - pH.phi).max())
    return Prop6Report(pL, pH, dist, euler_lagrange_residual(spec, pL, h),
                       euler_lagrange_residual(spec, pH), float(res), bool(holds), tol,
                       forced=bool(force))


def prop6_convergence(spec, h, phi0, phiT, levels=(128, 256, 512)):
    """Sup distances at successive refinements and the observed orders."""
    dists = [prop6_check(spec, h, phi0, phiT, n).sup_distance for n in levels]
    orders = [float(np.log2(a / b)) if b > 0 else np.inf for a, b in zip(dists[:-1], dists[1:])]
    return dists, orders


__all__ = [
    "ExtremalPath", "Prop6Report", "TubeRatio", "action_ratio", "backward_residual",
    "euler_lagrange_residual", "lagrangian", "lagrangian_h", "path_action", "prop6_check",
    "prop6_convergence", "solve_euler_lagrange", "time_grid", "tube_family",
    "tube_probability_ratio", "tube_sup_distances",
]
