"""Load and store label grids and write reports.

Supported grid formats are PGM (P2 ascii or P5 binary, 2D only) with labels
as gray values, and a raw little-endian uint8 cell array with a JSON sidecar
``{"shape", "spacing", "origin", "m"}``. Sidecars may also carry
``column_axis`` and ``profiles`` so sub-cell data survives a round trip.
"""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .errors import InvalidCluster
from .grid import ColumnProfile, GridCluster


def _to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {(",".join(map(str, k)) if isinstance(k, tuple) else str(k)): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if hasattr(obj, "to_dict"):
        return _to_jsonable(obj.to_dict())
    return obj


def _fmt(obj: Any, floats: list[str]) -> Any:
    if isinstance(obj, dict):
        return {k: _fmt(v, floats) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_fmt(v, floats) for v in obj]
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
        floats.append(format(obj, ".17g"))
        return f"\x00{len(floats) - 1}\x00"
    return obj


def dumps(obj: Any) -> str:
    """Deterministic JSON with every finite float printed to 17 significant digits."""
    floats: list[str] = []
    text = json.dumps(_fmt(_to_jsonable(obj), floats), indent=2, sort_keys=True)
    text = re.sub(r'"\\u0000(\d+)\\u0000"', lambda mo: floats[int(mo.group(1))], text)
    return text + "\n"


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(dumps(obj))


def write_csv(path: str | Path, header: Iterable[str], rows: Iterable[Iterable[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([format(float(v), ".17g") if isinstance(v, (float, np.floating)) else v for v in row])


# -- PGM ---------------------------------------------------------------

def _pgm_tokens(data: bytes):
    """Yield header tokens and the offset just past the last one."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a PGM image as an integer array indexed ``[x, y]`` with y up."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(data)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == "P2":
        vals = np.array(data[pos:].split(), dtype=np.int64)
    elif magic == "P5":
        if maxval > 255:
            raise InvalidCluster("16-bit PGM is not supported")
        vals = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).astype(np.int64)
    else:
        raise InvalidCluster(f"not a PGM file (magic {magic!r})")
    if vals.size != w * h:
        raise InvalidCluster("PGM pixel count does not match its header")
    img = vals.reshape(h, w)
    # rows are stored top to bottom; the grid's second axis points up
    return np.ascontiguousarray(img[::-1].T)


def write_pgm(path: str | Path, labels: np.ndarray, binary: bool = True, maxval: int | None = None) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise InvalidCluster("PGM holds 2D grids only")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise InvalidCluster("labels must fit in 0..255 for PGM")
    img = labels.T[::-1]
    h, w = img.shape
    maxval = max(1, int(labels.max(initial=0))) if maxval is None else maxval
    if binary:
        header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
        Path(path).write_bytes(header + img.astype(np.uint8).tobytes())
    else:
        lines = [f"P2\n{w} {h}\n{maxval}"] + [" ".join(map(str, row)) for row in img.tolist()]
        Path(path).write_text("\n".join(lines) + "\n")


# -- raw + sidecar ------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json") if path.suffix != ".json" else path


def _profiles_to_json(cluster: GridCluster) -> list[dict]:
    return [
        {"column": list(col), "breakpoints": list(p.breakpoints), "labels": list(p.labels)}
        for col, p in sorted(cluster.profiles.items())
    ]


def write_raw(path: str | Path, cluster: GridCluster) -> None:
    """Write ``path`` (cells in C order, axis 0 slowest) and ``path.json``."""
    path = Path(path)
    if cluster.labels.max(initial=0) > 255:
        raise InvalidCluster("labels must fit in 0..255 for raw uint8 storage")
    path.write_bytes(cluster.labels.astype("<u1").tobytes(order="C"))
    write_json(_sidecar(path), _meta(cluster))


def _cluster_from_meta(labels: np.ndarray, meta: dict) -> GridCluster:
    shape = labels.shape
    spacing = float(meta.get("spacing", 1.0))
    origin = tuple(meta.get("origin") or [0.0] * len(shape))
    axis = meta.get("column_axis")
    profiles = {}
    if meta.get("profiles"):
        lo = origin[axis]
        hi = lo + shape[axis] * spacing
        for entry in meta["profiles"]:
            col = tuple(entry["column"])
            profiles[col] = ColumnProfile(col, lo, hi, tuple(map(float, entry["breakpoints"])),
                                          tuple(map(int, entry["labels"])))
    return GridCluster(labels, spacing, origin, meta.get("m"), axis if profiles else None, profiles)


def _meta(cluster: GridCluster) -> dict:
    meta = {"shape": list(cluster.shape), "spacing": cluster.spacing, "origin": list(cluster.origin), "m": cluster.m}
    if cluster.profiles:
        meta["column_axis"] = cluster.column_axis
        meta["profiles"] = _profiles_to_json(cluster)
    return meta


def read_raw(path: str | Path) -> GridCluster:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    shape = tuple(int(s) for s in meta["shape"])
    data = np.frombuffer(path.read_bytes(), dtype="<u1")
    if data.size != math.prod(shape):
        raise InvalidCluster("raw file size does not match sidecar shape")
    return _cluster_from_meta(data.reshape(shape).astype(np.int64), meta)


def load_cluster(path: str | Path, spacing: float | None = None) -> GridCluster:
    """Load a cluster from ``.pgm`` (optional sidecar) or raw + sidecar, chosen by extension."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        labels = read_pgm(path)
        side = _sidecar(path)
        if side.exists():
            return _cluster_from_meta(labels, json.loads(side.read_text()))
        return GridCluster(labels, 1.0 if spacing is None else spacing)
    return read_raw(path)


def save_cluster(path: str | Path, cluster: GridCluster) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, cluster.labels)
        write_json(_sidecar(path), _meta(cluster))
    else:
        write_raw(path, cluster)
