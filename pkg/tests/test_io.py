import json

import numpy as np
import pytest

from epsbeta.density import constant
from epsbeta.errors import InvalidCluster
from epsbeta.grid import GridCluster
from epsbeta.io import dumps, load_cluster, read_pgm, save_cluster, write_csv, write_pgm
from epsbeta.measures import weighted_volume
from epsbeta.surgery import search_cube, transfer

from helpers import flat


def test_pgm_round_trip(tmp_path):
    lab = np.random.default_rng(0).integers(0, 4, (7, 5))
    for binary in (True, False):
        p = tmp_path / f"c{binary}.pgm"
        write_pgm(p, lab, binary=binary)
        assert np.array_equal(read_pgm(p), lab)


def test_pgm_orientation(tmp_path):
    # the second grid axis points up, so it is stored bottom row last
    lab = np.array([[1, 2, 3]])
    p = tmp_path / "o.pgm"
    write_pgm(p, lab, binary=False)
    rows = p.read_text().split("\n")[3:6]
    assert rows == ["3", "2", "1"]


def test_pgm_errors(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P6\n1 1\n255\n\x00")
    with pytest.raises(InvalidCluster):
        read_pgm(p)
    p.write_text("P2\n2 2\n3\n1 2 3\n")
    with pytest.raises(InvalidCluster):
        read_pgm(p)
    with pytest.raises(InvalidCluster):
        write_pgm(tmp_path / "x.pgm", np.full((2, 2), 300))


def test_cluster_round_trip_keeps_sub_cell_data(tmp_path):
    c = flat(64)
    fld = constant()
    eps = 0.5 * search_cube(c, fld, 1, 0, 0.0).eps_bar
    new = transfer(c, fld, 1, 0, eps).cluster
    assert new.profiles
    for name in ("c.raw", "c.pgm"):
        save_cluster(tmp_path / name, new)
        back = load_cluster(tmp_path / name)
        assert np.array_equal(back.labels, new.labels) and back.spacing == new.spacing
        assert back.profiles == new.profiles
        assert np.array_equal(weighted_volume(back, fld), weighted_volume(new, fld))


def test_raw_size_mismatch(tmp_path):
    save_cluster(tmp_path / "c.raw", GridCluster(np.ones((4, 4), dtype=int)))
    (tmp_path / "c.raw").write_bytes(b"\x01" * 15)
    with pytest.raises(InvalidCluster):
        load_cluster(tmp_path / "c.raw")


def test_pgm_without_sidecar_uses_unit_spacing(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.ones((3, 3), dtype=int))
    c = load_cluster(tmp_path / "a.pgm")
    assert c.spacing == 1.0 and c.m == 1


def test_json_is_deterministic_with_full_precision():
    obj = {"b": 0.1 + 0.2, "a": np.float64(1 / 3), "arr": np.arange(3), "inf": float("inf")}
    text = dumps(obj)
    assert text == dumps(dict(reversed(list(obj.items()))))
    back = json.loads(text)
    assert back["b"] == 0.1 + 0.2 and back["a"] == 1 / 3 and back["arr"] == [0, 1, 2]


def test_csv_uses_17_digits(tmp_path):
    p = tmp_path / "c.csv"
    write_csv(p, ["t", "v"], [[0.1, 1 / 3]])
    assert p.read_text().splitlines() == ["t,v", "0.10000000000000001,0.33333333333333331"]
