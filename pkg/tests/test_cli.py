import json
import subprocess
import sys

import numpy as np
import pytest

from epsbeta.cli import main
from epsbeta.density import constant
from epsbeta.io import load_cluster, save_cluster
from epsbeta.measures import weighted_volume
from epsbeta.surgery import search_cube

from helpers import flat, two_squares


@pytest.fixture()
def flat_file(tmp_path):
    p = tmp_path / "flat.raw"
    save_cluster(p, flat(64))
    return p


def run(*args):
    return main([str(a) for a in args])


def test_measure_two_squares(tmp_path):
    p = tmp_path / "two.pgm"
    save_cluster(p, two_squares())
    out = tmp_path / "m.json"
    assert run("measure", "--input", p, "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["perimeter"] == 7.0 and rep["volumes"] == [1.0, 1.0]


def test_adjust_zero_epsilon_is_identity(flat_file, tmp_path):
    out = tmp_path / "same.raw"
    assert run("adjust", "--input", flat_file, "--h", 1, "--epsilon", 0, "--cluster-out", out,
               "--out", tmp_path / "r.json") == 0
    assert out.read_bytes() == flat_file.read_bytes()


def test_surgery_epsilon_too_large(flat_file, tmp_path):
    out = tmp_path / "err.json"
    assert run("surgery", "--input", flat_file, "--i", 1, "--j", 0, "--epsilon", 0.1, "--out", out) == 4
    assert json.loads(out.read_text())["error"] == "EpsilonTooLarge"


@pytest.mark.parametrize("args", [
    ("surgery", "--i", 1, "--j", 0),               # missing --epsilon
    ("adjust", "--h", 1, "--epsilon", "1e-9,2e-9"),  # vector for a scalar command
    ("bogus",),
    ("cper",),                                     # missing --t-grid
])
def test_config_errors(flat_file, args):
    cmd, *rest = args
    assert run(cmd, "--input", flat_file, *rest) == 2


def test_bad_density_is_a_config_error(flat_file, tmp_path):
    d = tmp_path / "d.json"
    d.write_text(json.dumps({"family": "nope"}))
    assert run("measure", "--input", flat_file, "--density", d) == 2


def test_io_errors(tmp_path):
    assert run("measure", "--input", tmp_path / "missing.raw") == 3
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P9 nonsense")
    assert run("measure", "--input", bad) == 3


def test_adjust_round_trip_and_determinism(flat_file, tmp_path):
    c = load_cluster(flat_file)
    eps = 0.5 * search_cube(c, constant(), 1, 0, 0.0).eps_bar
    outs = []
    for k in range(2):
        cl, rep = tmp_path / f"a{k}.raw", tmp_path / f"a{k}.json"
        assert run("adjust", "--input", flat_file, "--h", 1, "--epsilon", repr(eps), "--cluster-out", cl,
                   "--out", rep, "--trace") == 0
        outs.append((cl.read_bytes(), (tmp_path / f"a{k}.raw.json").read_bytes(), rep.read_bytes()))
    assert outs[0] == outs[1]
    vol = weighted_volume(load_cluster(tmp_path / "a0.raw"), constant())
    assert vol[0] == pytest.approx(weighted_volume(c, constant())[0] + eps, rel=1e-9)


def test_verify_passes_on_the_flat_fixture(flat_file, tmp_path):
    out = tmp_path / "v.json"
    assert run("verify", "--input", flat_file, "--out", out) == 0
    rep = json.loads(out.read_text())
    assert rep["passed"] and all(c["passed"] for c in rep["checks"].values())


def test_infiltrate_dumps_the_mask(tmp_path):
    n = 256
    lab = np.zeros((n, n), dtype=int)
    lab[4:n - 4, 4:n - 4] = 1
    lab[n // 2:3 * n // 4, n // 4:3 * n // 4] = 2
    lab[128, 127] = 3
    from epsbeta.grid import GridCluster
    p = tmp_path / "inf.raw"
    save_cluster(p, GridCluster(lab, spacing=1 / n))
    mask = tmp_path / "mask.pgm"
    out = tmp_path / "i.json"
    assert run("infiltrate", "--input", p, "--i", 1, "--j", 2, "--x", "0.5,0.5", "--dump-infiltration", mask,
               "--out", out) == 0
    assert mask.read_bytes().startswith(b"P5")
    assert json.loads(out.read_text())["case_taken"] == 1


def test_boundedness_csv(tmp_path):
    lab = np.zeros((32, 32), dtype=int)
    lab[8:24, 8:24] = 1
    from epsbeta.grid import GridCluster
    p = tmp_path / "sq.raw"
    save_cluster(p, GridCluster(lab, spacing=1 / 32, origin=(-0.5, -0.5)))
    out = tmp_path / "b.csv"
    assert run("boundedness", "--input", p, "--t-grid", "0.1,0.2,0.4", "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("t,v") and len(lines) == 4


def test_console_entry_point(flat_file):
    proc = subprocess.run([sys.executable, "-m", "epsbeta.cli", "measure", "--input", str(flat_file)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["volumes"] == [0.5]
