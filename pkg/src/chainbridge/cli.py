"""Command-line front end: a JSON experiment config in, CSV/JSON artifacts out.

Exit codes: 0 pass, 1 a check failed, 2 configuration error, 3 numerical
or precondition failure.
"""

import argparse
import copy
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .chain_model import (
    NONLINEAR_PRESETS,
    PRESETS,
    LinearChainSpec,
    kalman_rank_check,
    nonlinear_preset,
    preset,
)
from .costs import grid_bridge, verify_prop4, verify_prop5
from .errors import BridgeError, ConfigError
from .extremal import prop6_check
from .htransform import FunctionH, bridge_h, hjb_residual, martingale_check, simulate_controlled
from .kernels import gaussian_kernel, mc_kernel, push_forward, tabulate_kernel
from .measures import GaussianMeasure, GridMeasure, Lattice
from .rng import generator

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "solver": {"tol": 1e-8, "max_iter": 5000, "epsilon": None},
    "sim": {"dt": 1e-3, "n_paths": 20000, "control_cap": 1e6, "record_every": 100},
    "kernel": {"s": 0.0, "t": None, "method": None, "epsilon": None, "n_paths": 2000,
               "dt": 1e-3, "sources": None},
    "extremal": {"n_steps": 512, "negative_control": True},
    "verify": {"n_paths": 20000, "dt": 2e-3, "n_probe": 100},
    "outputs": {"trajectories": False},
}


# -- config -------------------------------------------------------------------

def resolve_config(raw, seed=None):
    if not isinstance(raw, dict) or not raw:
        raise ConfigError("empty configuration; see the README for the expected layout")
    cfg = copy.deepcopy(raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if "seed" not in cfg:
        raise ConfigError("a seed is mandatory (config key 'seed' or --seed)")
    if "model" not in cfg:
        raise ConfigError("missing 'model' section")
    for key, vals in DEFAULTS.items():
        sec = cfg.setdefault(key, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"section {key!r} must be an object")
        for k, v in vals.items():
            sec.setdefault(k, v)
    cfg["schema_version"] = io.SCHEMA_VERSION
    return cfg


def load_config(path, seed=None):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return resolve_config(raw, seed)


def build_model(mcfg):
    """Return ``(linear spec or None, chain)``."""
    if "preset" in mcfg:
        name = mcfg["preset"]
        T = float(mcfg.get("T", 1.0))
        if name in PRESETS:
            lin = preset(name, T=T, gamma=float(mcfg.get("gamma", 0.5)))
            return lin, lin.to_chain()
        if name in NONLINEAR_PRESETS:
            return None, nonlinear_preset(name, T=T, sigma=float(mcfg.get("sigma", 1.0)))
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS + NONLINEAR_PRESETS}")
    if "linear" in mcfg:
        m = mcfg["linear"]
        try:
            lin = LinearChainSpec(np.array(m["A"], dtype=float), np.array(m["sigma0"], dtype=float),
                                  float(m["T"]), int(m["n"]), int(m["d"]), m.get("name", "linear"))
        except KeyError as e:
            raise ConfigError(f"linear model is missing {e}") from e
        return lin, lin.to_chain()
    raise ConfigError("model needs 'preset' or 'linear'")


def build_lattice(gcfg, nd):
    try:
        lat = Lattice.from_bounds(gcfg["lows"], gcfg["highs"], gcfg["counts"])
    except KeyError as e:
        raise ConfigError(f"grid is missing {e}") from e
    if lat.dim != nd:
        raise ConfigError(f"grid has dimension {lat.dim}, the chain {nd}")
    return lat


def _gaussian(g, lin):
    mean = np.array(g["mean"], dtype=float)
    if "cov" in g:
        cov = np.array(g["cov"], dtype=float)
    elif "gramian_scale" in g:
        if lin is None:
            raise ConfigError("gramian_scale needs a linear model")
        cov = float(g["gramian_scale"]) * gaussian_kernel(lin, 0.0, lin.T).Sigma
    else:
        raise ConfigError("a Gaussian needs 'cov' or 'gramian_scale'")
    return GaussianMeasure(mean, cov)


def parse_measure(m, lin, lattice=None):
    if not isinstance(m, dict) or len(m) != 1:
        raise ConfigError(f"cannot read measure {m!r}")
    (kind, v), = m.items()
    if kind == "dirac":
        if lattice is not None:
            return GridMeasure.dirac(lattice, lattice.nearest_node(v))
        return GaussianMeasure.dirac(v)
    if kind == "gaussian":
        g = _gaussian(v, lin)
        return g if lattice is None else GridMeasure.from_density(lattice, g.density)
    if kind == "mixture":
        if lattice is None:
            raise ConfigError("mixtures are only supported on a grid")
        w = np.array(v.get("weights", [1.0] * len(v["means"])), dtype=float)
        comps = [_gaussian(dict(v, mean=mu), lin) for mu in v["means"]]
        return GridMeasure.from_density(
            lattice, lambda y: sum(wi * c.density(y) for wi, c in zip(w / w.sum(), comps)))
    if kind == "points":
        if lattice is None:
            raise ConfigError("point masses are only supported on a grid")
        return GridMeasure.from_points(lattice, v["points"], v["masses"])
    if kind == "weights":
        if lattice is None:
            raise ConfigError("weights need a grid")
        return GridMeasure(lattice, np.array(v, dtype=float))
    raise ConfigError(f"unknown measure type {kind!r}")


# -- helpers ------------------------------------------------------------------

class Stage:
    name = "config"


def _artifact(cfg, **body):
    return dict(body, schema_version=io.SCHEMA_VERSION, config=cfg, seed=cfg["seed"])


def _finish(out, cfg, command, hashed, lines, passed):
    io.write_manifest(out, hashed)
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    text = [f"generated_at {stamp}", f"command {command} seed {cfg['seed']}"] + lines
    text.append(f"verdict {'pass' if passed else 'fail'}")
    (out / "summary.txt").write_text("\n".join(text) + "\n")
    for line in lines:
        print(line)
    return EXIT_PASS if passed else EXIT_FAIL


# -- commands -----------------------------------------------------------------

def cmd_kernel(cfg, out, threads=1):
    Stage.name = "model"
    lin, chain = build_model(cfg["model"])
    kc = cfg["kernel"]
    s = float(kc["s"])
    t = float(kc["t"] if kc["t"] is not None else chain.T)
    method = kc["method"] or ("gaussian" if lin is not None else "monte_carlo")
    lattice = build_lattice(cfg["grid"], chain.nd) if "grid" in cfg else None
    hashed, lines, body = [], [], {"s": s, "t": t, "method": method}
    passed = True
    Stage.name = "kernel"
    if method == "gaussian":
        if lin is None:
            raise ConfigError("the closed-form kernel needs a linear model")
        gk = gaussian_kernel(lin, s, t)
        r = 0.5 * (s + t)
        a, b = gaussian_kernel(lin, s, r), gaussian_kernel(lin, r, t)
        ck_phi = float(np.abs(b.Phi @ a.Phi - gk.Phi).max())
        ck_sig = float(np.abs(b.Phi @ a.Sigma @ b.Phi.T + b.Sigma - gk.Sigma).max())
        passed = max(ck_phi, ck_sig) <= 1e-10
        body.update(Phi=gk.Phi, Sigma=gk.Sigma,
                    chapman_kolmogorov={"Phi_error": ck_phi, "Sigma_error": ck_sig,
                                        "passed": passed})
        lines.append(f"Gramian {np.array2string(gk.Sigma, precision=10)}")
        lines.append(f"Chapman-Kolmogorov max error {max(ck_phi, ck_sig):.3e}")
        if lattice is not None:
            grid = tabulate_kernel(gk, lattice, sources=kc["sources"],
                                   epsilon=float(kc["epsilon"] or 0.0))
            hashed += io.write_grid_kernel(grid, out)
    else:
        if lattice is None:
            raise ConfigError("a Monte Carlo kernel needs a 'grid' section")
        grid = mc_kernel(chain, s, kc["sources"], t, lattice, epsilon=kc["epsilon"],
                         n_paths=int(kc["n_paths"]), dt=float(kc["dt"]), seed=cfg["seed"],
                         threads=threads)
        mass = np.asarray(grid.raw_mass)
        body.update(epsilon=grid.epsilon, raw_mass_range=[float(mass.min()), float(mass.max())],
                    warnings=list(grid.warnings))
        lines.append(f"Monte Carlo kernel: {grid.values.shape[0]} sources, raw mass "
                     f"{mass.min():.4f}..{mass.max():.4f}, {len(grid.warnings)} warnings")
        hashed += io.write_grid_kernel(grid, out)
    io.write_json(out / "kernel.json", _artifact(cfg, **body))
    hashed.append("kernel.json")
    return _finish(out, cfg, "kernel", hashed, lines, passed)


def cmd_bridge(cfg, out, threads=1):
    Stage.name = "model"
    lin, chain = build_model(cfg["model"])
    if lin is None:
        raise ConfigError("the bridge pipeline needs a linear model")
    marg = cfg.get("marginals") or {}
    if "mu0" not in marg or "muT" not in marg:
        raise ConfigError("marginals need 'mu0' and 'muT'")
    sim, sol = cfg["sim"], cfg["solver"]
    seed = cfg["seed"]
    hashed, lines = [], []
    if "grid" in cfg:
        lattice = build_lattice(cfg["grid"], chain.nd)
        mu0 = parse_measure(marg["mu0"], lin, lattice)
        if marg["muT"] == {"pushforward": True}:
            eps = sol["epsilon"] or 0.75 * float(lattice.spacing.max())
            K = tabulate_kernel(gaussian_kernel(lin, 0.0, lin.T), lattice,
                                source_nodes=mu0.support, epsilon=eps)
            muT = push_forward(K, mu0)
        else:
            muT = parse_measure(marg["muT"], lin, lattice)
        Stage.name = "schrodinger"
        gb = grid_bridge(lin, mu0, muT, sol["epsilon"], sol["tol"], int(sol["max_iter"]))
        io.write_json(out / "potentials.json", _artifact(cfg, **gb.potentials.to_json()))
        io.write_csv(out / "iterations.csv", ["iteration", "error_mu0", "error_muT"],
                     io.iteration_rows(gb.potentials.history))
        hashed += ["potentials.json", "iterations.csv"]
        Stage.name = "simulation"
        rep = verify_prop5(lin, mu0, muT, gb.epsilon, sol["tol"], int(sol["max_iter"]),
                           float(sim["dt"]), int(sim["n_paths"]), seed,
                           control_cap=float(sim["control_cap"]),
                           record_every=sim["record_every"], bridge=gb)
    else:
        mu0 = parse_measure(marg["mu0"], lin)
        if not mu0.is_dirac:
            raise ConfigError("without a grid the initial law must be a Dirac mass")
        if marg["muT"] == {"pushforward": True}:
            muT = gaussian_kernel(lin, 0.0, lin.T).endpoint(mu0.mean)
        else:
            muT = parse_measure(marg["muT"], lin)
        Stage.name = "simulation"
        rep = verify_prop4(lin, mu0.mean, muT, float(sim["dt"]), int(sim["n_paths"]), seed,
                           control_cap=float(sim["control_cap"]),
                           record_every=sim["record_every"])
    Stage.name = "output"
    io.write_json(out / "cost_report.json", _artifact(cfg, **rep.to_json()))
    header, rows = io.ensemble_summary_rows(rep.ensemble)
    io.write_csv(out / "ensemble_summary.csv", header, rows)
    hashed += ["cost_report.json", "ensemble_summary.csv"]
    if cfg["outputs"].get("trajectories"):
        io.write_trajectories(rep.ensemble, out / "trajectories.csv")
        hashed.append("trajectories.csv")
    lines.append(f"{rep.which}: cost {rep.j_estimate.value:.6f} +- {rep.j_estimate.stderr:.6f}, "
                 f"target {rep.target:.6f}")
    for name, c in rep.checks.items():
        lines.append(f"  {name}: {'pass' if c['passed'] else 'FAIL'}")
    return _finish(out, cfg, "bridge", hashed, lines, rep.verdict)


def negative_control_h(nd, T):
    """``h = 1 + (x^1)^2 t``, which does not solve the backward equation."""
    def log_h(t, x):
        return np.log1p(x[:, 0] ** 2 * t)

    def grad(t, x):
        g = np.zeros_like(x)
        g[:, 0] = 2 * x[:, 0] * t / (1 + x[:, 0] ** 2 * t)
        return g

    return FunctionH(log_h, nd, T, grad_log_h=grad)


def _bridge_for(cfg, lin, section):
    spec = section.get("bridge") or {}
    x0 = np.array(spec.get("x0", np.zeros(lin.nd)), dtype=float)
    muT = parse_measure(spec["muT"], lin) if "muT" in spec else GaussianMeasure(
        gaussian_kernel(lin, 0.0, lin.T).endpoint(x0).mean + 1.0,
        0.25 * gaussian_kernel(lin, 0.0, lin.T).Sigma)
    return x0, muT, bridge_h(lin, x0, muT)


def cmd_extremal(cfg, out, threads=1):
    Stage.name = "model"
    lin, chain = build_model(cfg["model"])
    if lin is None:
        raise ConfigError("the extremal pipeline needs a linear model for its bridge h")
    ec = cfg["extremal"]
    try:
        phi0 = np.array(ec["phi0"], dtype=float)
        phiT = np.array(ec["phiT"], dtype=float)
    except KeyError as e:
        raise ConfigError(f"extremal section is missing {e}") from e
    _, _, h = _bridge_for(cfg, lin, ec)
    Stage.name = "extremal"
    rep = prop6_check(lin, h, phi0, phiT, int(ec["n_steps"]))
    io.write_extremal(rep.path_L, out / "extremal_L.csv")
    io.write_extremal(rep.path_Lh, out / "extremal_Lh.csv")
    body = {"bridge": rep.to_json()}
    lines = [f"prop6: sup distance {rep.sup_distance:.3e} (tolerance {rep.tolerance:.0e}), "
             f"{'pass' if rep.passed else 'FAIL'}"]
    if ec["negative_control"]:
        neg = prop6_check(lin, negative_control_h(lin.nd, lin.T), phi0, phiT,
                          int(ec["n_steps"]), force=True)
        body["negative_control"] = dict(neg.to_json(), expected="fail",
                                        as_expected=not neg.passed)
        lines.append(f"negative control: sup distance {neg.sup_distance:.3e}, "
                     f"expected-fail {'confirmed' if not neg.passed else 'NOT confirmed'}")
    io.write_json(out / "prop6.json", _artifact(cfg, **body))
    hashed = ["extremal_L.csv", "extremal_Lh.csv", "prop6.json"]
    ok = rep.passed and body.get("negative_control", {}).get("as_expected", True)
    return _finish(out, cfg, "extremal", hashed, lines, ok)


def _verify_checks(cfg, lin, chain):
    vc = cfg["verify"]
    seed = cfg["seed"]
    T = lin.T
    checks = {}
    gk = gaussian_kernel(lin, 0.0, T)
    if lin.name == "double_integrator" and T == 1.0:
        err = float(np.abs(gk.Sigma - np.array([[1, 0.5], [0.5, 1 / 3]])).max())
        checks["gramian_oracle"] = {"passed": err <= 1e-8, "error": err}
    r = 0.5 * T
    a, b = gaussian_kernel(lin, 0.0, r), gaussian_kernel(lin, r, T)
    ck = float(np.abs(b.Phi @ a.Sigma @ b.Phi.T + b.Sigma - gk.Sigma).max())
    checks["chapman_kolmogorov"] = {"passed": ck <= 1e-10, "error": ck}
    rank = kalman_rank_check(lin)
    checks["kalman_rank"] = {"passed": rank.controllable, "rank": rank.rank}

    x0 = np.zeros(lin.nd)
    x0, muT, h = _bridge_for(cfg, lin, vc)
    lh0 = float(h.log_h(0.0, x0[None])[0])
    checks["h_normalized"] = {"passed": abs(lh0) <= 1e-8, "log_h0": lh0}

    gen = generator(seed, 7)
    worst = 0.0
    ens = simulate_controlled(lin, h, x0, float(vc["dt"]), 2000, seed, record_every=50)
    for _ in range(int(vc["n_probe"])):
        k = int(gen.integers(0, ens.times.size - 1))
        x = ens.states[int(gen.integers(0, ens.n_paths)), k]
        worst = max(worst, abs(hjb_residual(h, chain, float(ens.times[k]), x)))
    checks["hjb_residual"] = {"passed": worst <= 1e-3, "max_abs": worst}

    free = simulate_controlled(lin, None, x0, float(vc["dt"]), int(vc["n_paths"]), seed,
                               record_times=np.linspace(0, T, 11)[1:])
    ms = martingale_check(h, free)
    checks["martingale"] = {"passed": ms.martingale_ok(), "mean_z": ms.mean_z,
                            "se_z": ms.se_z}

    rep = verify_prop4(lin, x0, muT, float(vc["dt"]), int(vc["n_paths"]), seed)
    checks["prop4"] = {"passed": rep.verdict, "cost": rep.j_estimate.value,
                       "stderr": rep.j_estimate.stderr, "target": rep.target}

    if lin.nd == 2:
        phi0, phiT = np.zeros(2), np.array([1.0, 0.0])
        p6 = prop6_check(lin, h, phi0, phiT, 256)
        checks["prop6"] = {"passed": p6.sup_distance <= 1e-3, "sup_distance": p6.sup_distance}
        neg = prop6_check(lin, negative_control_h(2, T), phi0, phiT, 256, force=True)
        checks["prop6_negative_control"] = {"passed": not neg.passed, "expected": "fail",
                                            "sup_distance": neg.sup_distance}
    return checks


def cmd_verify(cfg, out, threads=1):
    Stage.name = "model"
    lin, chain = build_model(cfg["model"])
    if lin is None:
        raise ConfigError("verify runs on linear models")
    Stage.name = "verify"
    checks = _verify_checks(cfg, lin, chain)
    io.write_json(out / "verify.json", _artifact(cfg, checks=checks))
    lines = []
    for name, c in checks.items():
        tag = "pass" if c["passed"] else "FAIL"
        if c.get("expected") == "fail":
            tag = "expected-fail confirmed" if c["passed"] else "expected-fail NOT confirmed"
        lines.append(f"{name}: {tag}")
    return _finish(out, cfg, "verify", ["verify.json"], lines,
                   all(c["passed"] for c in checks.values()))


COMMANDS = {"kernel": cmd_kernel, "bridge": cmd_bridge, "extremal": cmd_extremal,
            "verify": cmd_verify}


def make_parser():
    p = argparse.ArgumentParser(prog="chainbridge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", default="out", help="artifact directory")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--threads", type=int, default=1)
    return p


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_PASS
    Stage.name = "config"
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, threads=max(1, args.threads))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BridgeError as e:
        print(f"{type(e).__name__} during {Stage.name}: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
