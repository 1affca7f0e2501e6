"""Schrödinger system on a lattice and relative entropies.

Given a grid kernel ``K`` and marginals ``mu0``, ``muT``, find factors
``nu0`` (on the sources) and ``rho`` (on the targets) such that the
coupling ``pi_ij = nu0_i K_ij rho_j`` has marginals ``mu0`` and ``muT``.
The alternating updates run entirely in log space.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import AbsoluteContinuityError, ConvergenceError, PreconditionError
from .measures import GaussianMeasure, GridMeasure

ZERO_MASS = 1e-15
GAUGE = "sum_nu0=1"


@dataclass
class BridgePotentials:
    """Solution of the Schrödinger system in log form.

    ``log_nu0`` lives on the lattice nodes (``-inf`` off the support of
    ``mu0``); ``log_rho`` is the terminal density ratio on target nodes.
    The pair is only defined up to ``(c nu0, rho / c)``; the stored one has
    ``sum(nu0) = 1``.
    """

    lattice: object
    log_nu0: np.ndarray
    log_rho: np.ndarray
    gauge: str = GAUGE
    history: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    iterations: int = 0

    @property
    def nu0(self):
        return GridMeasure(self.lattice, np.exp(self.log_nu0), sigma_finite=True)

    @property
    def rho(self):
        return np.exp(self.log_rho)

    def rescaled(self, c):
        """The gauge-equivalent pair ``(c nu0, rho / c)``."""
        return BridgePotentials(self.lattice, self.log_nu0 + np.log(c), self.log_rho - np.log(c),
                                gauge=f"scaled:{c}", history=self.history,
                                iterations=self.iterations)

    def to_json(self):
        def enc(v):
            return [None if not np.isfinite(e) else float(e) for e in v]
        return {"gauge": self.gauge, "lattice": self.lattice.header(),
                "log_nu0": enc(self.log_nu0), "log_rho": enc(self.log_rho),
                "iterations": self.iterations}


def _support_rows(kernel, mu0):
    nodes = mu0.support
    rows = np.array([kernel.row_of_node(n) for n in nodes], dtype=int)
    return nodes, rows


def solve_schrodinger_system(kernel, mu0, muT, tol=1e-8, max_iter=10_000):
    """Alternating (Fortet / IPF) iteration for the Schrödinger factors.

    Stops when the larger of the two marginal total-variation errors is
    below ``tol``. Raises :class:`ConvergenceError` carrying the last iterate
    and error curve if ``max_iter`` is exhausted.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not (mu0.lattice.same_as(kernel.lattice) and muT.lattice.same_as(kernel.lattice)):
        raise PreconditionError("marginals must live on the kernel lattice")
    nodes0, rows = _support_rows(kernel, mu0)
    logK = kernel.log_matrix()[rows]
    tgt = np.flatnonzero(muT.weights >= ZERO_MASS)
    logK = logK[:, tgt]
    a = mu0.weights[nodes0]
    b = muT.weights[tgt]
    la, lb = np.log(a), np.log(b)

    # absolute continuity of muT w.r.t. the pushed-forward mu0
    reach = logsumexp(logK + la[:, None], axis=0)
    raw = kernel.values[rows][:, tgt]
    dead = np.flatnonzero(raw.max(axis=0) <= 1e-300)
    if dead.size:
        j = int(tgt[dead[0]])
        raise AbsoluteContinuityError(
            f"target node {j} at {kernel.lattice.nodes[j].tolist()} has mass "
            f"{muT.weights[j]:.3e} but the reference law puts none there", node=j)

    log_rho = lb - reach
    rowlse = logsumexp(logK + log_rho[None, :], axis=1)
    hist = []
    err0 = errT = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        log_nu = la - rowlse
        col = logsumexp(logK + log_nu[:, None], axis=0)
        log_rho = lb - col
        rowlse = logsumexp(logK + log_rho[None, :], axis=1)
        err0 = 0.5 * np.abs(np.exp(log_nu + rowlse) - a).sum()
        errT = 0.5 * np.abs(np.exp(log_rho + col) - b).sum()
        hist.append((it, err0, errT))
        if max(err0, errT) < tol:
            break
    history = np.array(hist)

    shift = logsumexp(log_nu)
    full_nu = np.full(kernel.lattice.size, -np.inf)
    full_nu[nodes0] = log_nu - shift
    full_rho = np.full(kernel.lattice.size, -np.inf)
    full_rho[tgt] = log_rho + shift
    pot = BridgePotentials(kernel.lattice, full_nu, full_rho, GAUGE, history, it)
    if max(err0, errT) >= tol:
        raise ConvergenceError(
            f"Schrödinger iteration stopped after {max_iter} steps with marginal "
            f"error {max(err0, errT):.3e} >= {tol:.1e}", last_iterate=pot, history=history)
    return pot


@dataclass
class Coupling:
    joint: np.ndarray      # (n_source_nodes, n_lattice) masses
    source_nodes: np.ndarray
    marginal0: GridMeasure
    marginalT: GridMeasure

    @property
    def total_mass(self):
        return float(self.joint.sum())


def coupling_measure(potentials, kernel):
    """Joint law ``nu0_i q_ij vol rho_j`` on sources x targets, with both marginals."""
    if not potentials.lattice.same_as(kernel.lattice):
        raise PreconditionError("potentials and kernel live on different lattices")
    nodes = np.flatnonzero(np.isfinite(potentials.log_nu0))
    rows = np.array([kernel.row_of_node(n) for n in nodes], dtype=int)
    logK = kernel.log_matrix()[rows]
    with np.errstate(invalid="ignore"):
        logj = potentials.log_nu0[nodes][:, None] + logK + potentials.log_rho[None, :]
    joint = np.where(np.isfinite(logj), np.exp(logj), 0.0)
    m0 = np.zeros(kernel.lattice.size)
    m0[nodes] = joint.sum(axis=1)
    lat = kernel.lattice
    return Coupling(joint, nodes, GridMeasure(lat, m0, sigma_finite=True),
                    GridMeasure(lat, joint.sum(axis=0), sigma_finite=True))


def relative_entropy(nu2, nu1):
    """``H(nu2 | nu1)``; ``inf`` when ``nu2`` is not absolutely continuous."""
    if isinstance(nu2, GaussianMeasure) and isinstance(nu1, GaussianMeasure):
        return _gaussian_kl(nu2, nu1)
    if isinstance(nu2, GridMeasure) and isinstance(nu1, GridMeasure):
        if not nu2.lattice.same_as(nu1.lattice):
            raise PreconditionError("grid measures must share the lattice")
        w2, w1 = nu2.weights, nu1.weights
        pos = w2 > 0
        if np.any(w1[pos] <= 0):
            return np.inf
        return float(np.sum(w2[pos] * (np.log(w2[pos]) - np.log(w1[pos]))))
    raise TypeError("relative_entropy needs two grid or two Gaussian measures")


def _gaussian_kl(p, q):
    if np.array_equal(p.mean, q.mean) and np.array_equal(p.cov, q.cov):
        return 0.0
    if p.is_dirac or q.is_dirac:
        return np.inf
    k = p.dim
    Lq = np.linalg.cholesky(q.cov)
    Lp = np.linalg.cholesky(p.cov)
    A = np.linalg.solve(Lq, Lp)
    dm = np.linalg.solve(Lq, q.mean - p.mean)
    logdet = 2 * (np.sum(np.log(np.diag(Lq))) - np.sum(np.log(np.diag(Lp))))
    return float(0.5 * (np.sum(A * A) + dm @ dm - k + logdet))
