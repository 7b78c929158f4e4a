"""Perceptions, regions, and the measure density m(p) under each theory.

A perception carries a time, a configuration-space region and a prior
weight. Its measure density is

- SQM: the |psi|^2 mass of the region at that time,
- SBM: 1 if the single trajectory sits in the region at that time, else 0,
- SCBM / GCBM: the SBM value averaged over an ensemble.

The measure of a set of perceptions is the prior-weighted sum of densities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
import yaml

from .configspace import Grid, PsiSource
from .densities import SpectralDensity
from .ensemble import Ensemble
from .pilotwave import Trajectory


class FamilyError(ValueError):
    pass


def _merge_1d(intervals):
    out = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return out


def _canonical_2d(rects):
    """Disjoint rectangles covering the union of ``rects``."""
    xs = sorted({v for r in rects for v in r[0]})
    ys = sorted({v for r in rects for v in r[1]})
    cover = np.zeros((len(xs) - 1, len(ys) - 1), dtype=bool)
    for (ax, bx), (ay, by) in rects:
        i0, i1 = xs.index(ax), xs.index(bx)
        j0, j1 = ys.index(ay), ys.index(by)
        cover[i0:i1, j0:j1] = True
    strips = []  # (x0, x1, tuple of y-intervals)
    for i in range(len(xs) - 1):
        runs, j = [], 0
        while j < len(ys) - 1:
            if cover[i, j]:
                k = j
                while k < len(ys) - 1 and cover[i, k]:
                    k += 1
                runs.append((ys[j], ys[k]))
                j = k
            else:
                j += 1
        if strips and strips[-1][1] == xs[i] and strips[-1][2] == tuple(runs):
            strips[-1] = (strips[-1][0], xs[i + 1], strips[-1][2])
        elif runs:
            strips.append((xs[i], xs[i + 1], tuple(runs)))
    return [((x0, x1), run) for x0, x1, runs in strips for run in runs]


@dataclass(frozen=True, eq=False)
class Region:
    """Finite union of half-open boxes, stored disjoint as (m, dims, 2)."""

    boxes: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.boxes, dtype=float)
        if b.ndim == 2:  # list of 1D intervals
            b = b[:, None, :]
        if b.ndim != 3 or b.shape[0] == 0 or b.shape[2] != 2:
            raise ValueError("region needs a nonempty list of intervals or rectangles")
        if np.any(b[..., 1] <= b[..., 0]):
            raise ValueError("every interval must satisfy lo < hi")
        if b.shape[1] == 1:
            b = np.array(_merge_1d(b[:, 0].tolist()))[:, None, :]
        else:
            b = np.array(_canonical_2d([tuple(map(tuple, r)) for r in b.tolist()]))
        b.setflags(write=False)
        object.__setattr__(self, "boxes", b)

    @classmethod
    def interval(cls, lo, hi) -> "Region":
        return cls([[lo, hi]])

    @classmethod
    def rectangle(cls, x, y) -> "Region":
        return cls([[x, y]])

    @property
    def dims(self) -> int:
        return self.boxes.shape[1]

    @property
    def size(self) -> float:
        return float(np.prod(self.boxes[..., 1] - self.boxes[..., 0], axis=1).sum())

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo, hi = self.boxes[None, :, :, 0], self.boxes[None, :, :, 1]
        inside = np.all((x[:, None, :] >= lo) & (x[:, None, :] < hi), axis=2)
        return inside.any(axis=1)

    def within(self, grid: Grid) -> bool:
        return bool(np.all(self.boxes[..., 0] >= grid.lo - 1e-12)
                    and np.all(self.boxes[..., 1] <= grid.lo + grid.lengths + 1e-12))

    def subset_of(self, other: "Region") -> bool:
        return all(_box_inside(box, other) for box in self.boxes)

    def overlaps(self, other: "Region") -> bool:
        for a in self.boxes:
            for b in other.boxes:
                if np.all(np.maximum(a[:, 0], b[:, 0]) < np.minimum(a[:, 1], b[:, 1])):
                    return True
        return False

    def to_list(self):
        if self.dims == 1:
            return self.boxes[:, 0].tolist()
        return self.boxes.tolist()


def _box_inside(box, region):
    for b in region.boxes:
        if np.all(box[:, 0] >= b[:, 0]) and np.all(box[:, 1] <= b[:, 1]):
            return True
    # box may straddle several disjoint pieces: compare covered volume
    lo = np.maximum(region.boxes[:, :, 0], box[None, :, 0])
    hi = np.minimum(region.boxes[:, :, 1], box[None, :, 1])
    vol = np.prod(np.clip(hi - lo, 0, None), axis=1).sum()
    return bool(np.isclose(vol, np.prod(box[:, 1] - box[:, 0]), rtol=1e-12, atol=0))


@dataclass(frozen=True, eq=False)
class Perception:
    id: str
    t: float
    region: Region
    prior_weight: float = 1.0

    def __post_init__(self):
        if not self.prior_weight > 0:
            raise ValueError(f"perception {self.id}: prior_weight must be positive")
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "id", str(self.id))

    def to_dict(self):
        return {"id": self.id, "t": self.t, "region": self.region.to_list(), "prior_weight": self.prior_weight}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["t"], Region(d["region"]), d.get("prior_weight", 1.0))


@dataclass(frozen=True, eq=False)
class PerceptionSet:
    perceptions: tuple[Perception, ...] = ()

    def __post_init__(self):
        ps = tuple(self.perceptions)
        ids = [p.id for p in ps]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate perception ids: {dup}")
        object.__setattr__(self, "perceptions", ps)

    def __iter__(self) -> Iterator[Perception]:
        return iter(self.perceptions)

    def __len__(self):
        return len(self.perceptions)

    def __getitem__(self, key) -> Perception:
        if isinstance(key, str):
            for p in self.perceptions:
                if p.id == key:
                    return p
            raise KeyError(key)
        return self.perceptions[key]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.perceptions]

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.prior_weight for p in self.perceptions], dtype=float)

    @property
    def times(self) -> list[float]:
        return sorted({p.t for p in self.perceptions})

    def select(self, ids: Iterable[str]) -> "PerceptionSet":
        keep = set(ids)
        return PerceptionSet(tuple(p for p in self.perceptions if p.id in keep))

    def scaled(self, c: float) -> "PerceptionSet":
        return PerceptionSet(tuple(Perception(p.id, p.t, p.region, p.prior_weight * c) for p in self.perceptions))

    def to_dict(self):
        return {"perceptions": [p.to_dict() for p in self.perceptions]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(Perception.from_dict(x) for x in d.get("perceptions", [])))


def save_perceptions(S: PerceptionSet, path):
    with open(path, "w") as fh:
        yaml.safe_dump(S.to_dict(), fh, sort_keys=False)


def load_perceptions(path) -> PerceptionSet:
    with open(path) as fh:
        return PerceptionSet.from_dict(yaml.safe_load(fh) or {})


# -- measure densities -------------------------------------------------------


class _SpectralCache:
    def __init__(self, source: PsiSource):
        self.source = source
        self._models: dict[float, SpectralDensity] = {}

    def __call__(self, t: float) -> SpectralDensity:
        m = self._models.get(t)
        if m is None:
            m = self._models[t] = SpectralDensity.of(self.source.at(t))
        return m


def _check_region(p: Perception, grid: Grid):
    if p.region.dims != grid.dims:
        raise ValueError(f"perception {p.id}: region has {p.region.dims} dims, grid has {grid.dims}")
    if not p.region.within(grid):
        raise ValueError(f"perception {p.id}: region leaves the grid extent")


def sqm_measure_density(p: Perception, source: PsiSource, _models=None) -> float:
    """|psi(x, t_p)|^2 integrated over the region, clipped to [0, 1]."""
    if not source.covers(p.t):
        raise ValueError(f"perception {p.id}: t={p.t} outside evolved range [{source.t0}, {source.t_final}]")
    _check_region(p, source.grid)
    model = _models(p.t) if _models else SpectralDensity.of(source.at(p.t))
    return float(np.clip(model.box_masses(p.region.boxes).sum(), 0.0, 1.0))


def sbm_measure_density(p: Perception, traj: Trajectory, grid: Grid | None = None) -> float:
    if not traj.covers(p.t):
        raise ValueError(f"perception {p.id}: t={p.t} outside trajectory range")
    return float(p.region.contains(traj.position_at(p.t, grid))[0])


def ensemble_indicators(p: Perception, ens: Ensemble, grid: Grid | None = None) -> np.ndarray:
    if not ens.covers(p.t):
        raise ValueError(f"perception {p.id}: t={p.t} outside ensemble range")
    return p.region.contains(ens.positions_at(p.t, grid))


def scbm_measure_density(p: Perception, ens: Ensemble, grid: Grid | None = None) -> tuple[float, float]:
    """Ensemble mean of the trajectory indicator with binomial standard error."""
    hits = ensemble_indicators(p, ens, grid)
    m = float(hits.mean())
    return m, math.sqrt(m * (1 - m) / hits.size)


class Theory:
    """Base for the four theory kinds; subclasses supply ``density``."""

    tag = "?"

    def density(self, p: Perception) -> float:
        raise NotImplementedError

    def std_error(self, p: Perception) -> float:
        return 0.0

    def densities(self, S: PerceptionSet) -> np.ndarray:
        return np.array([self.density(p) for p in S], dtype=float)

    def covers(self, t: float) -> bool:
        raise NotImplementedError


@dataclass(eq=False)
class SQM(Theory):
    source: PsiSource
    tag: str = "SQM"
    _models: _SpectralCache = field(init=False, repr=False)

    def __post_init__(self):
        self._models = _SpectralCache(self.source)

    def density(self, p):
        return sqm_measure_density(p, self.source, self._models)

    def covers(self, t):
        return self.source.covers(t)


@dataclass(eq=False)
class SBM(Theory):
    trajectory: Trajectory
    grid: Grid | None = None
    tag: str = "SBM"

    def density(self, p):
        return sbm_measure_density(p, self.trajectory, self.grid)

    def covers(self, t):
        return self.trajectory.covers(t)


@dataclass(eq=False)
class SCBM(Theory):
    ensemble: Ensemble
    grid: Grid | None = None
    tag: str = "SCBM"

    def density(self, p):
        return scbm_measure_density(p, self.ensemble, self.grid)[0]

    def std_error(self, p):
        return scbm_measure_density(p, self.ensemble, self.grid)[1]

    def indicators(self, S: PerceptionSet) -> np.ndarray:
        """(N, |S|) membership matrix of ensemble members in each perception."""
        return np.stack([ensemble_indicators(p, self.ensemble, self.grid) for p in S], axis=1)

    def covers(self, t):
        return self.ensemble.covers(t)


def GCBM(ensemble: Ensemble, grid: Grid | None = None) -> SCBM:
    """Ensemble theory seeded from a non-quantum initial density."""
    return SCBM(ensemble, grid, tag="GCBM")


def set_measure(S: PerceptionSet, theory: Theory) -> float:
    """Prior-weighted sum of measure densities over the set."""
    if len(S) == 0:
        return 0.0
    return math.fsum(w * m for w, m in zip(S.weights, theory.densities(S)))


# -- perception families -----------------------------------------------------


def _edges(spec_axis, lo, hi):
    if isinstance(spec_axis, int):
        if spec_axis < 1:
            raise FamilyError("cell count must be >= 1")
        e = np.linspace(lo, hi, spec_axis + 1)
        return e
    e = np.asarray(spec_axis, dtype=float)
    bad = np.flatnonzero(np.diff(e) <= 0)
    if bad.size:
        i = int(bad[0])
        raise FamilyError(f"overlapping cells: cell {i} [{e[i]}, {e[i + 1]}) and cell {i + 1} "
                          f"[{e[i + 1]}, {e[i + 2] if i + 2 < e.size else '?'})")
    return e


def check_partition(regions: list[tuple[str, Region]], domain: Region | None = None) -> list[str]:
    """Diagnostics for regions that overlap or fail to tile ``domain``."""
    problems = []
    for i in range(len(regions)):
        for j in range(i + 1, len(regions)):
            if regions[i][1].overlaps(regions[j][1]):
                problems.append(f"cells {regions[i][0]!r} and {regions[j][0]!r} overlap")
    if domain is not None and not problems:
        total = sum(r.size for _, r in regions)
        if not math.isclose(total, domain.size, rel_tol=1e-9):
            problems.append(f"cells cover {total:.6g} of a domain of size {domain.size:.6g}")
    return problems


def _axis_specs(cells, dims):
    """Normalize ``cells`` to one entry (count or edge list) per axis."""
    if isinstance(cells, int):
        return [cells] * dims
    cells = list(cells)
    if dims == 1:
        return cells if len(cells) == 1 else [cells]
    return cells


def build_perception_family(spec: dict, grid: Grid) -> PerceptionSet:
    """Partition the domain into cells at each listed time, one perception per
    cell.

    ``spec`` keys: ``times``; either ``cells`` (count per axis, or explicit
    edge lists) or ``intervals`` (explicit list of regions); optional
    ``bounds`` (defaults to the grid extent) and ``weights`` (``uniform`` or
    a list, one per cell).
    """
    times = spec.get("times")
    if not times:
        raise FamilyError("family needs at least one time")
    bounds = spec.get("bounds") or [list(e) for e in grid.extent]
    domain = Region([bounds])
    if "intervals" in spec:
        cells = [Region([r]) for r in spec["intervals"]]
        problems = check_partition([(str(i), c) for i, c in enumerate(cells)], domain)
        if problems:
            raise FamilyError("; ".join(problems))
    else:
        axes = _axis_specs(spec.get("cells", 1), grid.dims)
        edges = [_edges(a, lo, hi) for a, (lo, hi) in zip(axes, bounds)]
        for e, (lo, hi) in zip(edges, bounds):
            if not (math.isclose(e[0], lo) and math.isclose(e[-1], hi)):
                raise FamilyError(f"cell edges [{e[0]}, {e[-1]}] do not span the domain [{lo}, {hi}]")
        if grid.dims == 1:
            cells = [Region([[a, b]]) for a, b in zip(edges[0][:-1], edges[0][1:])]
        else:
            cells = [Region([[[ax, bx], [ay, by]]])
                     for ax, bx in zip(edges[0][:-1], edges[0][1:])
                     for ay, by in zip(edges[1][:-1], edges[1][1:])]
    weights = spec.get("weights", "uniform")
    if weights == "uniform":
        weights = [1.0] * len(cells)
    if len(weights) != len(cells):
        raise FamilyError(f"{len(weights)} weights for {len(cells)} cells")
    fmt = spec.get("id_format", "t{ti}_c{ci}")
    out = []
    for ti, t in enumerate(times):
        for ci, (c, w) in enumerate(zip(cells, weights)):
            out.append(Perception(fmt.format(ti=ti, ci=ci, t=t), float(t), c, float(w)))
    return PerceptionSet(tuple(out))
