import json

import numpy as np
import pytest

from chainbridge import io
from chainbridge.chain_model import preset
from chainbridge.kernels import gaussian_kernel, tabulate_kernel
from chainbridge.measures import Lattice
from chainbridge.rng import generator
from chainbridge.stats import energy_distance_test


def test_plain_handles_numpy_and_nonfinite():
    out = io.plain({"a": np.arange(2), "b": np.float32(1.5), "c": np.inf, 3: np.bool_(True)})
    assert out == {"a": [0, 1], "b": 1.5, "c": "inf", "3": True}
    json.dumps(out)


def test_csv_round_trip(tmp_path):
    rows = [[0.1, 1 / 3], [2.0, np.pi]]
    io.write_csv(tmp_path / "x.csv", ["a", "b"], rows)
    assert (tmp_path / "x.csv").read_text().startswith("# schema_version=1\n")
    header, vals = io.read_csv(tmp_path / "x.csv")
    assert header == ["a", "b"] and np.array_equal(vals, rows)


def test_grid_kernel_round_trip(tmp_path):
    lat = Lattice.from_bounds([-1, -1], [1, 1], 5)
    K = tabulate_kernel(gaussian_kernel(preset("double_integrator"), 0, 1), lat,
                        source_nodes=[3, 7], epsilon=0.2)
    io.write_grid_kernel(K, tmp_path)
    back = io.read_grid_kernel(tmp_path)
    assert np.array_equal(back.values, K.values)
    assert back.lattice.same_as(lat) and list(back.source_nodes) == [3, 7]


def test_manifest_hashes(tmp_path):
    (tmp_path / "a.txt").write_text("x")
    io.write_manifest(tmp_path, ["a.txt"])
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["sha256"]["a.txt"] == io.sha256(tmp_path / "a.txt")


def test_energy_test_null_and_alternative():
    g = generator(0, 9)
    x, y = g.standard_normal((600, 2)), g.standard_normal((600, 2))
    assert energy_distance_test(x, y, n_perm=99, seed=1).p_value > 0.01
    assert energy_distance_test(x, y + 0.4, n_perm=99, seed=1).p_value <= 0.01


def test_energy_statistic_matches_scipy_in_1d():
    from scipy.stats import energy_distance

    g = generator(1, 9)
    x, y = g.standard_normal(300), g.normal(0.5, 1.0, 200)
    res = energy_distance_test(x[:, None], y[:, None], n_perm=9)
    # statistic = n m / (n + m) * (2 E|X-Y| - E|X-X'| - E|Y-Y'|)
    assert res.statistic == pytest.approx(300 * 200 / 500 * energy_distance(x, y) ** 2, rel=1e-9)
