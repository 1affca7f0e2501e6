"""CSV and JSON artifacts. Everything written here is deterministic given its
inputs: keys are sorted and floats use round-trip formatting."""

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .kernels import GridKernel
from .measures import Lattice

SCHEMA_VERSION = 1
TRAJECTORY_LIMIT = 2_000_000


def plain(obj):
    """Convert numpy containers and non-finite floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if np.isfinite(v):
            return v
        return "nan" if np.isnan(v) else ("inf" if v > 0 else "-inf")
    return obj


def dumps(obj):
    return json.dumps(plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"# schema_version={SCHEMA_VERSION}"])
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as f:
        lines = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
    return lines[0], np.array(lines[1:], dtype=float)


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, names):
    """Hashes of the reproducible artifacts (summaries with timestamps are left out)."""
    out = Path(out_dir)
    write_json(out / "manifest.json", {"schema_version": SCHEMA_VERSION,
                                       "sha256": {n: sha256(out / n) for n in sorted(names)}})


# -- kernels ------------------------------------------------------------------

def write_grid_kernel(kernel, out_dir, stem="grid_kernel"):
    """Header JSON plus a dense CSV with one row per source."""
    out = Path(out_dir)
    header = dict(kernel.header(), schema_version=SCHEMA_VERSION,
                  raw_mass=kernel.raw_mass, sources=kernel.sources,
                  warnings=list(kernel.warnings))
    write_json(out / f"{stem}.json", header)
    write_csv(out / f"{stem}.csv", [f"y{j}" for j in range(kernel.values.shape[1])],
              kernel.values)
    return [f"{stem}.json", f"{stem}.csv"]


def read_grid_kernel(out_dir, stem="grid_kernel"):
    out = Path(out_dir)
    h = json.loads((out / f"{stem}.json").read_text())
    _, values = read_csv(out / f"{stem}.csv")
    nodes = None if h["source_nodes"] is None else np.array(h["source_nodes"], dtype=int)
    return GridKernel(Lattice.from_header(h["lattice"]), np.array(h["sources"], dtype=float),
                      values.reshape(h["n_sources"], -1), h["s"], h["t"], h["epsilon"],
                      np.array(h["raw_mass"]), nodes, h["seed"], h["method"],
                      tuple(h["warnings"]))


# -- bridge -------------------------------------------------------------------

def iteration_rows(history):
    return [(int(r[0]), float(r[1]), float(r[2])) for r in np.asarray(history).reshape(-1, 3)]


def ensemble_summary_rows(ensemble):
    nd = ensemble.states.shape[2]
    iu = np.triu_indices(nd)
    header = (["time"] + [f"mean{i}" for i in range(nd)]
              + [f"cov{i}{j}" for i, j in zip(*iu)] + ["mean_energy", "mean_girsanov_logw"])
    rows = []
    for k, t in enumerate(ensemble.times):
        x = ensemble.states[:, k]
        C = np.atleast_2d(np.cov(x.T)) if x.shape[0] > 1 else np.zeros((nd, nd))
        e = ensemble.energy_trace[k] if ensemble.energy_trace is not None else np.nan
        w = ensemble.logw_trace[k] if ensemble.logw_trace is not None else np.nan
        rows.append([float(t), *x.mean(axis=0), *C[iu], float(e), float(w)])
    return header, rows


def write_trajectories(ensemble, path):
    """Path-major dump of the recorded states; refuses beyond the size guard."""
    n, m, nd = ensemble.states.shape
    if n * m * nd > TRAJECTORY_LIMIT:
        raise ValueError(f"{n * m * nd} values exceed the trajectory dump limit "
                         f"{TRAJECTORY_LIMIT}")
    rows = ([p, float(t), *ensemble.states[p, k]] for p in range(n)
            for k, t in enumerate(ensemble.times))
    write_csv(path, ["path", "time"] + [f"x{i}" for i in range(nd)], rows)


# -- extremals ----------------------------------------------------------------

def write_extremal(path_obj, path):
    write_csv(path, path_obj.header(), path_obj.rows())
