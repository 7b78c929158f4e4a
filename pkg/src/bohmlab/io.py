"""File formats: wavefunction snapshots, trajectories, ensembles and reports.

CSV files open with ``# key: value`` comment lines (the run's config hash
among them) followed by a column header. Floats are written with ``repr`` so
they round-trip exactly.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .configspace import Grid, Wavefunction, density
from .ensemble import Ensemble
from .pilotwave import Trajectory

WF_MAGIC = b"BHWF"
WF_VERSION = 1
_AXES = ("x", "y")


def _fmt(v) -> str:
    return repr(float(v))


def _write_header(fh, meta: dict | None):
    for k, v in (meta or {}).items():
        fh.write(f"# {k}: {v}\n")


def write_csv(path, columns: list[str], rows, meta: dict | None = None):
    with open(path, "w", newline="") as fh:
        _write_header(fh, meta)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    meta, lines = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                k, _, v = line[1:].partition(":")
                meta[k.strip()] = v.strip()
            elif line.strip():
                lines.append(line)
    rows = list(csv.reader(lines))
    return meta, rows[0], rows[1:]


def write_json(path, obj, meta: dict | None = None):
    data = dict(meta or {})
    data.update(obj)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=False)
        fh.write("\n")


# -- wavefunctions -----------------------------------------------------------


def write_wavefunction_csv(psi: Wavefunction, path, meta: dict | None = None):
    g = psi.grid
    mesh = [m.ravel() for m in g.mesh()]
    a = psi.amplitudes.ravel()
    rho = density(psi).ravel()
    cols = list(_AXES[:g.dims]) + ["re", "im", "density"]
    rows = zip(*mesh, a.real, a.imag, rho)
    write_csv(path, cols, rows, {**(meta or {}), "time": _fmt(psi.time)})


def write_wavefunction_binary(psi: Wavefunction, path, config_hash: str = ""):
    """Little-endian dump: magic, version, 64-char config hash, dims, then
    (lo, hi, points) per axis, time, and interleaved re/im float64 payload
    in C order."""
    g = psi.grid
    with open(path, "wb") as fh:
        fh.write(WF_MAGIC)
        fh.write(struct.pack("<I", WF_VERSION))
        fh.write(config_hash.encode("ascii")[:64].ljust(64, b"\0"))
        fh.write(struct.pack("<I", g.dims))
        for (lo, hi), n in zip(g.extent, g.points):
            fh.write(struct.pack("<ddI", lo, hi, n))
        fh.write(struct.pack("<d", psi.time))
        inter = np.empty(psi.amplitudes.size * 2, dtype="<f8")
        flat = psi.amplitudes.ravel()
        inter[0::2] = flat.real
        inter[1::2] = flat.imag
        fh.write(inter.tobytes())


def read_wavefunction_binary(path) -> tuple[Wavefunction, str]:
    with open(path, "rb") as fh:
        if fh.read(4) != WF_MAGIC:
            raise ValueError(f"{path}: not a wavefunction dump")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != WF_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        h = fh.read(64).rstrip(b"\0").decode("ascii")
        (dims,) = struct.unpack("<I", fh.read(4))
        extent, points = [], []
        for _ in range(dims):
            lo, hi, n = struct.unpack("<ddI", fh.read(20))
            extent.append((lo, hi))
            points.append(n)
        (t,) = struct.unpack("<d", fh.read(8))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    grid = Grid(tuple(extent), tuple(points))
    amp = (payload[0::2] + 1j * payload[1::2]).reshape(grid.shape)
    return Wavefunction(grid, amp, t), h


# -- trajectories and ensembles ---------------------------------------------


def write_trajectory_csv(traj: Trajectory, path, meta: dict | None = None):
    cols = ["t"] + list(_AXES[:traj.dims])
    write_csv(path, cols, ([t, *x] for t, x in zip(traj.times, traj.positions)), meta)


def read_trajectory_csv(path) -> Trajectory:
    _, cols, rows = read_csv(path)
    arr = np.array(rows, dtype=float)
    return Trajectory(arr[:, 0], arr[:, 1:])


def write_ensemble(ens: Ensemble, csv_path, manifest_path, meta: dict | None = None, extra: dict | None = None):
    dims = ens.positions.shape[2]
    cols = ["traj_id", "t"] + list(_AXES[:dims])

    def rows():
        for i in range(ens.n):
            for t, x in zip(ens.times, ens.positions[i]):
                yield [i, t, *x]

    write_csv(csv_path, cols, rows(), meta)
    write_json(manifest_path, {"seed": ens.seed, "N": ens.n, "density_kind": ens.density_kind,
                               "times": len(ens.times), "csv": Path(csv_path).name, **(extra or {})}, meta)


def read_ensemble(csv_path, manifest_path=None) -> Ensemble:
    _, cols, rows = read_csv(csv_path)
    arr = np.array(rows, dtype=float)
    ids = arr[:, 0].astype(int)
    n = int(ids.max()) + 1
    times = arr[ids == 0, 1]
    T = times.size
    if arr.shape[0] != n * T:
        raise ValueError(f"{csv_path}: trajectories do not share one output time grid")
    order = np.lexsort((arr[:, 1], ids))
    pos = arr[order, 2:].reshape(n, T, -1)
    seed, kind = None, "quantum"
    if manifest_path is not None and Path(manifest_path).exists():
        with open(manifest_path) as fh:
            man = json.load(fh)
        seed, kind = man.get("seed"), man.get("density_kind", "quantum")
    return Ensemble(times, pos, seed, kind)
