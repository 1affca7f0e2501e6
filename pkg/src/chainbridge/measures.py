"""Lattices and the two measure representations: on a grid and Gaussian."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ExtrapolationError

MASS_TOL = 1e-12
DENSITY_FLOOR = 1e-300


@dataclass(frozen=True)
class Lattice:
    """Uniform rectangular lattice; nodes are enumerated in C order."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in axes:
            if a.ndim != 1 or a.size < 2:
                raise ConfigError("each lattice axis needs at least two nodes")
            step = np.diff(a)
            if not np.allclose(step, step[0], rtol=1e-9, atol=0) or step[0] <= 0:
                raise ConfigError("lattice axes must be uniform and increasing")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def from_bounds(cls, lows, highs, counts):
        lows, highs = np.atleast_1d(lows), np.atleast_1d(highs)
        counts = np.broadcast_to(np.atleast_1d(counts), lows.shape)
        return cls(tuple(np.linspace(lo, hi, int(c)) for lo, hi, c in zip(lows, highs, counts)))

    @property
    def dim(self):
        return len(self.axes)

    @property
    def shape(self):
        return tuple(a.size for a in self.axes)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def spacing(self):
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @property
    def lows(self):
        return np.array([a[0] for a in self.axes])

    @property
    def highs(self):
        return np.array([a[-1] for a in self.axes])

    @property
    def nodes(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def nearest_node(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.rint((x - self.lows) / self.spacing).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.array(self.shape)):
            raise ExtrapolationError(f"point {x.tolist()} lies outside the lattice")
        return int(np.ravel_multi_index(tuple(idx), self.shape))

    def inside(self, x, margin=0.0):
        x = np.atleast_2d(x)
        return np.all((x >= self.lows + margin) & (x <= self.highs - margin), axis=1)

    def header(self):
        return {"lows": self.lows.tolist(), "highs": self.highs.tolist(),
                "counts": list(self.shape)}

    @classmethod
    def from_header(cls, header):
        return cls.from_bounds(header["lows"], header["highs"], header["counts"])

    def same_as(self, other):
        return self.shape == other.shape and all(
            np.allclose(a, b, rtol=0, atol=1e-12) for a, b in zip(self.axes, other.axes))


@dataclass(frozen=True)
class GridMeasure:
    """Node masses on a lattice (cell volumes folded into the weights).

    ``sigma_finite`` exempts the measure from unit normalization, which is
    how the Schrödinger factors are stored.
    """

    lattice: Lattice
    weights: np.ndarray
    sigma_finite: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size != self.lattice.size:
            raise ConfigError(f"expected {self.lattice.size} weights, got {w.size}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConfigError("weights must be finite and nonnegative")
        if not self.sigma_finite and abs(w.sum() - 1.0) > MASS_TOL:
            raise ConfigError(f"probability weights sum to {w.sum():.15f}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_density(cls, lattice, density):
        """Discretize ``density`` (callable on ``(N, dim)`` points) and normalize."""
        w = np.asarray(density(lattice.nodes), dtype=float) * lattice.cell_volume
        total = w.sum()
        if not total > 0:
            raise ConfigError("density has no mass on the lattice")
        return cls(lattice, w / total)

    @classmethod
    def dirac(cls, lattice, node):
        w = np.zeros(lattice.size)
        w[node] = 1.0
        return cls(lattice, w)

    @classmethod
    def from_points(cls, lattice, points, masses):
        w = np.zeros(lattice.size)
        for p, m in zip(np.atleast_2d(points), masses):
            w[lattice.nearest_node(p)] += m
        return cls(lattice, w / w.sum())

    @property
    def density(self):
        """Mass per unit volume at each node."""
        return self.weights / self.lattice.cell_volume

    @property
    def support(self):
        return np.flatnonzero(self.weights > 0)

    def mean(self):
        return self.weights @ self.lattice.nodes / self.weights.sum()

    def cov(self):
        x = self.lattice.nodes - self.mean()
        return (x * self.weights[:, None]).T @ x / self.weights.sum()

    def sample(self, n, gen):
        idx = gen.choice(self.lattice.size, size=n, p=self.weights / self.weights.sum())
        return self.lattice.nodes[idx]


@dataclass(frozen=True)
class GaussianMeasure:
    """``N(mean, cov)``; ``cov = 0`` encodes a Dirac mass."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        c = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if c.shape != (m.size, m.size):
            raise ConfigError(f"covariance shape {c.shape} does not match mean of size {m.size}")
        if np.max(np.abs(c - c.T), initial=0.0) > 1e-12 * max(1.0, np.abs(c).max()):
            raise ConfigError("covariance must be symmetric")
        c = 0.5 * (c + c.T)
        if m.size and np.linalg.eigvalsh(c).min() < -1e-12:
            raise ConfigError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", c)

    @classmethod
    def dirac(cls, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x, np.zeros((x.size, x.size)))

    @property
    def dim(self):
        return self.mean.size

    @property
    def is_dirac(self):
        return not np.any(self.cov)

    def logpdf(self, y):
        y = np.atleast_2d(y)
        L = np.linalg.cholesky(self.cov)
        z = np.linalg.solve(L, (y - self.mean).T)
        logdet = 2 * np.sum(np.log(np.diag(L)))
        return -0.5 * np.sum(z * z, axis=0) - 0.5 * logdet - 0.5 * self.dim * np.log(2 * np.pi)

    def density(self, y):
        return np.exp(self.logpdf(y))

    def sample(self, n, gen):
        xi = gen.standard_normal((n, self.dim))
        if self.is_dirac:
            return np.broadcast_to(self.mean, (n, self.dim)).copy()
        w, V = np.linalg.eigh(self.cov)
        root = V * np.sqrt(np.clip(w, 0, None))
        return self.mean + xi @ root.T

    def to_json(self):
        return {"type": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}
