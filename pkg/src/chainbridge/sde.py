"""Euler-Maruyama for the chain SDE, optionally with a control on block 1.

Noise and control both enter through ``G``: only the first ``d`` state
coordinates receive ``sigma dW`` and ``u dt``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .rng import STREAM_NOISE, PathNoise


def time_grid(t0, t1, dt):
    """Uniform steps from ``t0`` to ``t1`` with step as close to ``dt`` as possible."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    span = t1 - t0
    if span < 0:
        raise ValueError(f"t1={t1} precedes t0={t0}")
    n = max(int(round(span / dt)), 1) if span > 0 else 0
    return np.linspace(t0, t1, n + 1)


@dataclass
class SimResult:
    times: np.ndarray          # recorded times
    states: np.ndarray         # (n_paths, n_recorded, nd)
    energy: np.ndarray         # (n_paths,)
    girsanov_logw: np.ndarray  # (n_paths,)
    saturations: int = 0
    controls: np.ndarray | None = field(default=None, repr=False)
    energy_trace: np.ndarray | None = None  # path means at recorded times
    logw_trace: np.ndarray | None = None


def simulate(spec, x0, t0, t1, dt, seed, stream=STREAM_NOISE, control=None,
             control_cap=None, record_every=None, record_times=None,
             observers=(), store_controls=False):
    """Simulate ``n_paths = len(x0)`` paths of the (controlled) chain.

    ``record_every`` keeps every k-th step (the last step is always kept);
    ``record_times`` keeps the steps nearest to the given times instead.
    ``observers`` are called as ``obs(k, t, x)`` at every grid time.
    """
    if not hasattr(spec, "drift_batch"):
        spec = spec.to_chain()
    x = np.array(x0, dtype=float, copy=True)
    if x.ndim != 2 or x.shape[1] != spec.nd:
        raise ValueError(f"x0 must have shape (n_paths, {spec.nd})")
    n_paths, d = x.shape[0], spec.d
    ts = time_grid(t0, t1, dt)
    n_steps = ts.size - 1
    if record_times is not None:
        keep = np.unique(np.clip(np.rint((np.asarray(record_times) - t0) /
                                         max(ts[1] - ts[0], 1e-300)), 0, n_steps).astype(int))
    else:
        stride = record_every or max(n_steps, 1)
        keep = np.unique(np.r_[np.arange(0, n_steps + 1, stride), n_steps])
    keep_set = {int(k): i for i, k in enumerate(keep)}
    states = np.empty((n_paths, keep.size, spec.nd))
    e_trace = np.zeros(keep.size)
    w_trace = np.zeros(keep.size)
    energy = np.zeros(n_paths)
    logw = np.zeros(n_paths)
    controls = np.empty((n_paths, n_steps, d)) if (store_controls and control is not None) else None
    noise = PathNoise(seed, stream, n_paths, d)
    saturations = 0

    for k in range(n_steps + 1):
        t = ts[k]
        if k in keep_set:
            i = keep_set[k]
            states[:, i] = x
            e_trace[i] = energy.mean()
            w_trace[i] = logw.mean()
        for obs in observers:
            obs(k, t, x)
        if k == n_steps:
            break
        h = ts[k + 1] - t
        dW = noise.normal() * np.sqrt(h)
        m = spec.drift_batch(t, x)
        sig = spec.sigma_batch(t, x)
        if sig.ndim == 3 and np.all(sig == sig[0]):
            sig = sig[0]
        if sig.ndim == 2:
            kick = dW @ sig.T
        else:
            kick = np.einsum("nij,nj->ni", sig, dW)
        x_new = x + m * h
        x_new[:, :d] += kick
        if control is not None:
            u = np.asarray(control(t, x), dtype=float).reshape(n_paths, d)
            if not np.all(np.isfinite(u)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(u), axis=1))[0])
                raise NumericalError(f"control is non-finite on path {bad} at t={t:.6g}")
            if control_cap is not None:
                norm = np.linalg.norm(u, axis=1)
                over = norm > control_cap
                if np.any(over):
                    saturations += int(over.sum())
                    u[over] *= (control_cap / norm[over])[:, None]
            if controls is not None:
                controls[:, k] = u
            x_new[:, :d] += u * h
            sinv = np.linalg.inv(sig)
            v = u @ sinv.T if sinv.ndim == 2 else np.einsum("nij,nj->ni", sinv, u)
            e = 0.5 * np.sum(v * v, axis=1) * h
            energy += e
            logw += np.sum(v * dW, axis=1) - e
        if not np.all(np.isfinite(x_new)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x_new), axis=1))[0])
            raise NumericalError(f"trajectory blow-up on path {bad} at t={ts[k + 1]:.6g}")
        x = x_new

    return SimResult(ts[keep], states, energy, logw, saturations, controls, e_trace, w_trace)
