"""Trajectory ensembles: initial sampling, transport, equivariance checks and
max-density selection."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .configspace import Grid, PsiSource, Wavefunction, density
from .densities import CellDensity, SpectralDensity
from .pilotwave import (NodePolicy, NodeUnderflowError, Trajectory, integrate_many, output_grid,
                        path_density_integrals, positions_at)

KS_COEFF_1PCT = 1.63


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based generator; a given seed reproduces the same stream everywhere."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True, eq=False)
class InitialDensity:
    """Where ensemble seeds come from: |psi(x, t0)|^2 or a tabulated density."""

    kind: str
    grid: Grid
    values: np.ndarray

    @classmethod
    def quantum(cls, psi: Wavefunction) -> "InitialDensity":
        return cls("quantum", psi.grid, density(psi))

    @classmethod
    def custom(cls, grid: Grid, values) -> "InitialDensity":
        return cls("custom", grid, CellDensity(grid, values).values)

    def model(self):
        if self.kind == "quantum":
            return SpectralDensity(self.grid, self.values)
        return CellDensity(self.grid, self.values)

    def total(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)


def _pick(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum(np.searchsorted(cum, u * cum[-1], side="right"), cum.size - 1)


def sample_initial(density: InitialDensity, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` points (n, dims) by inverse-CDF over grid cells plus uniform
    jitter inside the chosen cell. 2D draws the first axis from its marginal,
    then the second axis from the conditional within the chosen column."""
    if n < 1:
        raise ValueError("n must be >= 1")
    masses = density.model().cell_masses()
    if not masses.sum() > 0:
        raise ValueError("initial density is identically zero")
    g = density.grid
    rng = rng_for(seed)
    u = rng.random((n, 2 * g.dims))
    if g.dims == 1:
        cells = _pick(np.cumsum(masses), u[:, 0])[:, None]
    else:
        ix = _pick(np.cumsum(masses.sum(axis=1)), u[:, 0])
        cond = np.cumsum(masses, axis=1)
        iy = np.empty_like(ix)
        for i in np.unique(ix):
            sel = ix == i
            iy[sel] = _pick(cond[i], u[sel, 1])
        cells = np.stack([ix, iy], axis=1)
    jitter = u[:, g.dims:] - 0.5
    x = g.lo + (cells + jitter) * g.spacing
    return g.wrap(x)


@dataclass(frozen=True, eq=False)
class Ensemble:
    times: np.ndarray        # (T,) shared output grid
    positions: np.ndarray    # (N, T, dims)
    seed: int | None = None
    density_kind: str = "quantum"
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.positions.ndim != 3 or self.positions.shape[0] < 1:
            raise ValueError("ensemble needs positions of shape (N>=1, T, dims)")
        if self.positions.shape[1] != self.times.size:
            raise ValueError("positions and times disagree on T")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def t0(self) -> float:
        return float(self.times[0])

    def __len__(self):
        return self.n

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.times, self.positions[i])

    @property
    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(i) for i in range(self.n)]

    def covers(self, t: float) -> bool:
        return self.times[0] - 1e-12 <= t <= self.times[-1] + 1e-12

    def positions_at(self, t: float, grid: Grid | None = None) -> np.ndarray:
        return positions_at(self.times, self.positions, t, grid)

    def subset(self, indices) -> "Ensemble":
        idx = np.asarray(indices, dtype=int)
        return Ensemble(self.times, self.positions[idx], self.seed, self.density_kind)


class EnsembleIntegrationError(RuntimeError):
    """Some members hit a node underflow; ``ensemble`` holds every member,
    with failed ones NaN after their failure time."""

    def __init__(self, failures: dict[int, NodeUnderflowError], ensemble: Ensemble):
        self.failures = failures
        self.ensemble = ensemble
        first = min(failures)
        super().__init__(f"{len(failures)} trajectories failed; first: trajectory {first}: {failures[first]}")


def evolve_ensemble(points, t0: float, t1: float, source: PsiSource, policy: NodePolicy | None = None,
                    rk_dt: float = 0.01, output_times=None, output_dt: float | None = None,
                    seed: int | None = None, density_kind: str = "quantum", threads: int = 1) -> Ensemble:
    """Transport every point independently along the Bohmian flow.

    Members are integrated in ``threads`` contiguous chunks; per-member
    results do not depend on the chunking.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, source.grid.dims)
    if pts.shape[0] == 0:
        raise ValueError("no points to evolve")
    if output_times is None:
        output_times = output_grid(t0, t1, output_dt or rk_dt)
    times = np.asarray(output_times, dtype=float)
    chunks = np.array_split(np.arange(pts.shape[0]), max(1, min(threads, pts.shape[0])))

    def work(idx):
        return integrate_many(pts[idx], t0, times, source, policy, rk_dt, indices=idx, on_error="collect")

    if len(chunks) == 1:
        results = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(work, chunks))
    positions = np.concatenate([r[0] for r in results], axis=0)
    failures = {}
    for _, f in results:
        failures.update(f)
    ens = Ensemble(times, positions, seed, density_kind, failures)
    if failures:
        raise EnsembleIntegrationError(failures, ens)
    return ens


def ks_statistic(samples: np.ndarray, cdf) -> float:
    """One-sample Kolmogorov-Smirnov distance sup|F_N - F| for a callable CDF."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    F = cdf(x)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


@dataclass
class EquivarianceReport:
    times: list[float]
    statistics: list[list[float]]   # per time, per axis
    threshold: float
    n: int

    @property
    def passed(self) -> list[bool]:
        return [all(d < self.threshold for d in row) for row in self.statistics]

    @property
    def all_passed(self) -> bool:
        return all(self.passed)

    def to_dict(self):
        return {"times": self.times, "D_N": self.statistics, "threshold": self.threshold,
                "N": self.n, "pass": self.passed}


def equivariance_test(ens: Ensemble, source: PsiSource, times, coeff: float = KS_COEFF_1PCT) -> EquivarianceReport:
    """KS distance between ensemble positions and |psi(x, t)|^2 at each time
    (per-axis marginals in 2D); passes when D_N < coeff / sqrt(N)."""
    grid = source.grid
    stats = []
    for t in times:
        if not ens.covers(t):
            raise ValueError(f"t={t} outside the ensemble's sampled range")
        x = ens.positions_at(float(t), grid)
        x = x[np.all(np.isfinite(x), axis=1)]
        model = SpectralDensity.of(source.at(float(t)))
        stats.append([ks_statistic(x[:, ax], lambda v, ax=ax: model.cdf(v, ax)) for ax in range(grid.dims)])
    return EquivarianceReport([float(t) for t in times], stats, coeff / math.sqrt(ens.n), ens.n)


def select_max_density_trajectory(ens: Ensemble, source: PsiSource) -> tuple[int, float]:
    """Member with the largest time integral of |psi|^2 along its path; ties go
    to the lowest index."""
    values = path_density_integrals(ens.times, ens.positions, source)
    i = int(np.argmax(values))
    return i, float(values[i])
