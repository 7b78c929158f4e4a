"""Configuration-space grids, wavefunctions and split-step Schrodinger evolution.

Units default to hbar = m = 1. Grids are periodic with a power-of-two number
of points per axis; all spectral operations use ``numpy.fft``.
"""
from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NORM_TOL = 1e-10


class GridError(ValueError):
    pass


class StateError(ValueError):
    """A state recipe cannot be realized on the requested grid."""


class EvolutionError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid, half-open extent ``[lo, hi)`` per axis."""

    extent: tuple[tuple[float, float], ...]
    points: tuple[int, ...]

    def __post_init__(self):
        extent = tuple((float(lo), float(hi)) for lo, hi in self.extent)
        points = tuple(int(n) for n in self.points)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "points", points)
        if len(extent) not in (1, 2) or len(points) != len(extent):
            raise GridError("grid must have 1 or 2 axes with one point count per axis")
        for (lo, hi), n in zip(extent, points):
            if not hi > lo:
                raise GridError(f"empty extent [{lo}, {hi})")
            if n < 16 or n & (n - 1):
                raise GridError(f"points per axis must be a power of two >= 16, got {n}")

    @classmethod
    def line(cls, lo, hi, n):
        return cls(((lo, hi),), (n,))

    @classmethod
    def square(cls, lo, hi, n):
        return cls(((lo, hi), (lo, hi)), (n, n))

    @property
    def dims(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def lengths(self) -> np.ndarray:
        return np.array([hi - lo for lo, hi in self.extent])

    @property
    def lo(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.extent])

    @property
    def spacing(self) -> np.ndarray:
        return self.lengths / np.array(self.points)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis(self, i: int) -> np.ndarray:
        lo, _ = self.extent[i]
        return lo + self.spacing[i] * np.arange(self.points[i])

    def axes(self) -> list[np.ndarray]:
        return [self.axis(i) for i in range(self.dims)]

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def wavenumbers(self, i: int) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.points[i], d=self.spacing[i])

    def kmesh(self) -> list[np.ndarray]:
        return np.meshgrid(*[self.wavenumbers(i) for i in range(self.dims)], indexing="ij")

    def wrap(self, x):
        """Map positions of shape (..., dims) back into the periodic cell."""
        x = np.asarray(x, dtype=float)
        return self.lo + np.mod(x - self.lo, self.lengths)

    def contains(self, x) -> bool:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo, hi = self.lo, self.lo + self.lengths
        return bool(np.all((x >= lo) & (x < hi)))

    def to_dict(self):
        return {"dims": self.dims, "extent": [list(e) for e in self.extent], "points": list(self.points)}


@dataclass(frozen=True, eq=False)
class Wavefunction:
    grid: Grid
    amplitudes: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=complex)
        if amps.shape != self.grid.shape:
            raise StateError(f"amplitude shape {amps.shape} does not match grid {self.grid.shape}")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "time", float(self.time))

    def norm(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2) * self.grid.cell_volume)

    def normalized(self) -> "Wavefunction":
        n = self.norm()
        if not n > 0 or not math.isfinite(n):
            raise StateError("cannot normalize a zero or non-finite wavefunction")
        return Wavefunction(self.grid, self.amplitudes / math.sqrt(n), self.time)

    def with_phase(self, theta: float) -> "Wavefunction":
        return Wavefunction(self.grid, self.amplitudes * np.exp(1j * theta), self.time)


def density(psi: Wavefunction) -> np.ndarray:
    """Pointwise |psi|^2 on the grid."""
    return np.abs(psi.amplitudes) ** 2


# -- potentials --------------------------------------------------------------


@dataclass(frozen=True)
class Potential:
    """Real potential on the grid.

    ``kind`` is one of ``free``, ``harmonic``, ``box``, ``double_well`` or
    ``custom``. Parameters live in ``params``:

    - harmonic: ``omega`` (scalar or per axis), optional ``center``
    - box: ``lo``/``hi`` walls (per axis), ``height`` of the outer barrier
    - double_well: ``height`` of the central barrier, ``separation`` of the minima
    - custom: ``values``, an array with the grid's shape
    """

    kind: str = "free"
    params: dict = field(default_factory=dict)

    KINDS = ("free", "harmonic", "box", "double_well", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")

    @classmethod
    def free(cls):
        return cls("free")

    @classmethod
    def harmonic(cls, omega=1.0, center=0.0):
        return cls("harmonic", {"omega": omega, "center": center})

    @classmethod
    def box(cls, lo, hi, height=1e4):
        return cls("box", {"lo": lo, "hi": hi, "height": height})

    @classmethod
    def double_well(cls, height, separation):
        return cls("double_well", {"height": height, "separation": separation})

    @classmethod
    def custom(cls, values):
        return cls("custom", {"values": np.asarray(values, dtype=float)})

    def per_axis(self, name, grid, default=0.0):
        v = np.broadcast_to(np.asarray(self.params.get(name, default), dtype=float), (grid.dims,))
        return v

    def values(self, grid: Grid, mass: Sequence[float] | float = 1.0) -> np.ndarray:
        mass = np.broadcast_to(np.asarray(mass, dtype=float), (grid.dims,))
        X = grid.mesh()
        V = np.zeros(grid.shape)
        if self.kind == "harmonic":
            omega = self.per_axis("omega", grid, 1.0)
            center = self.per_axis("center", grid, 0.0)
            for x, w, c, m in zip(X, omega, center, mass):
                V += 0.5 * m * w**2 * (x - c) ** 2
        elif self.kind == "box":
            lo = self.per_axis("lo", grid)
            hi = self.per_axis("hi", grid)
            # separable walls: each axis adds its own barrier outside [lo, hi)
            for x, a, b in zip(X, lo, hi):
                V += np.where((x >= a) & (x < b), 0.0, float(self.params.get("height", 1e4)))
        elif self.kind == "double_well":
            a = 0.5 * float(self.params["separation"])
            V = float(self.params["height"]) * ((X[0] / a) ** 2 - 1.0) ** 2
        elif self.kind == "custom":
            V = np.array(self.params["values"], dtype=float)
            if V.shape != grid.shape:
                raise ValueError(f"custom potential shape {V.shape} != grid {grid.shape}")
        if not np.all(np.isfinite(V)):
            raise ValueError("potential must be finite at every grid point")
        return V

    def to_dict(self):
        params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}
        return {"kind": self.kind, **params}


@dataclass(frozen=True)
class EvolutionConfig:
    dt: float = 1e-3
    mass: float | tuple[float, ...] = 1.0
    hbar: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.hbar > 0 or np.any(np.asarray(self.mass) <= 0):
            raise ValueError("hbar and masses must be positive")

    def masses(self, grid: Grid) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.mass, dtype=float), (grid.dims,)).copy()

    def max_kinetic_phase(self, grid: Grid) -> float:
        """Largest kinetic phase hbar k^2 dt / 2m accumulated in one step."""
        k_max = np.pi / grid.spacing
        return float(np.sum(self.hbar * k_max**2 / (2 * self.masses(grid))) * self.dt)

    def check(self, grid: Grid):
        phase = self.max_kinetic_phase(grid)
        if phase >= np.pi:
            raise ValueError(
                f"dt={self.dt} gives max kinetic phase {phase:.3f} >= pi on this grid; "
                f"use dt < {self.dt * np.pi / phase:.3g}"
            )


# -- initial states ----------------------------------------------------------


def _hermite_functions(n_max: int, xi: np.ndarray) -> np.ndarray:
    """Normalized Hermite functions h_0..h_n_max of the scaled coordinate xi."""
    out = np.empty((n_max + 1,) + xi.shape)
    out[0] = np.pi**-0.25 * np.exp(-0.5 * xi**2)
    if n_max >= 1:
        out[1] = math.sqrt(2.0) * xi * out[0]
    for n in range(2, n_max + 1):
        out[n] = math.sqrt(2.0 / n) * xi * out[n - 1] - math.sqrt((n - 1) / n) * out[n - 2]
    return out


def _gaussian(grid, center, width, momentum, hbar):
    center = np.broadcast_to(np.asarray(center, dtype=float), (grid.dims,))
    width = np.broadcast_to(np.asarray(width, dtype=float), (grid.dims,))
    momentum = np.broadcast_to(np.asarray(momentum, dtype=float), (grid.dims,))
    if np.any(width < 2 * grid.spacing):
        raise StateError(f"gaussian width {width.tolist()} below 2*dx {(2 * grid.spacing).tolist()}")
    amp = np.ones(grid.shape, dtype=complex)
    for x, c, s, p in zip(grid.mesh(), center, width, momentum):
        # width is the standard deviation of |psi|^2
        amp *= np.exp(-((x - c) ** 2) / (4 * s**2) + 1j * p * x / hbar)
    return amp


def _harmonic_eigenstate(grid, potential, n, mass, hbar):
    ns = np.broadcast_to(np.asarray(n, dtype=int), (grid.dims,))
    omega = potential.per_axis("omega", grid, 1.0)
    center = potential.per_axis("center", grid, 0.0)
    amp = np.ones(grid.shape)
    for i, x in enumerate(grid.mesh()):
        scale = math.sqrt(mass[i] * omega[i] / hbar)
        nk = int(ns[i])
        if nk < 0:
            raise StateError("quantum number must be >= 0")
        turning = math.sqrt(2 * nk + 1) / scale
        reach = turning + 8.0 / scale
        lo, hi = grid.extent[i]
        if center[i] - reach < lo or center[i] + reach > hi:
            raise StateError(f"harmonic eigenstate n={nk} extends past the grid on axis {i}")
        k_peak = math.sqrt(2 * nk + 1) * scale
        if 4 * k_peak > np.pi / grid.spacing[i]:
            raise StateError(f"harmonic eigenstate n={nk} unresolved: dx={grid.spacing[i]:.3g} too coarse")
        amp = amp * _hermite_functions(nk, scale * (x - center[i]))[nk] * math.sqrt(scale)
    return amp.astype(complex)


def _box_eigenstate(grid, potential, n, mass, hbar):
    """Product of per-axis eigenvectors of the discretized box Hamiltonian.

    The finite barrier makes the textbook sine only approximate, so each axis
    factor is the n-th eigenvector of spectral kinetic energy plus the axis
    barrier, sign-matched to the sine it approximates. The barrier is
    separable, so the product is an eigenstate of the full grid Hamiltonian.
    """
    ns = np.broadcast_to(np.asarray(n, dtype=int), (grid.dims,))
    lo = potential.per_axis("lo", grid)
    hi = potential.per_axis("hi", grid)
    height = float(potential.params.get("height", 1e4))
    amp = np.ones(grid.shape)
    for i in range(grid.dims):
        nk = int(ns[i])
        if nk < 1:
            raise StateError("box quantum number must be >= 1")
        L = hi[i] - lo[i]
        if L < 16 * grid.spacing[i]:
            raise StateError("box narrower than 16 grid cells")
        if 4 * nk * np.pi / L > np.pi / grid.spacing[i]:
            raise StateError(f"box eigenstate n={nk} unresolved: dx={grid.spacing[i]:.3g} too coarse")
        x = grid.axis(i)
        k = grid.wavenumbers(i)
        npts = x.size
        kinetic = np.fft.ifft(hbar**2 * k[:, None] ** 2 / (2 * mass[i]) * np.fft.fft(np.eye(npts), axis=0), axis=0)
        H = kinetic.real + np.diag(np.where((x >= lo[i]) & (x < hi[i]), 0.0, height))
        _, vecs = np.linalg.eigh(0.5 * (H + H.T))
        vec = vecs[:, nk - 1]
        guess = np.where((x >= lo[i]) & (x < hi[i]), np.sin(nk * np.pi * (x - lo[i]) / L), 0.0)
        if vec @ guess < 0:
            vec = -vec
        shape = [1] * grid.dims
        shape[i] = npts
        amp = amp * (vec / math.sqrt(grid.spacing[i])).reshape(shape)
    return amp.astype(complex)


def _build(grid, recipe, mass, hbar):
    kind = recipe.get("kind")
    if kind == "gaussian":
        return _gaussian(grid, recipe.get("center", 0.0), recipe.get("width", 1.0), recipe.get("momentum", 0.0), hbar)
    if kind == "eigenstate":
        potential = recipe["potential"]
        if isinstance(potential, dict):
            potential = potential_from_dict(potential)
        if potential.kind == "harmonic":
            return _harmonic_eigenstate(grid, potential, recipe.get("n", 0), mass, hbar)
        if potential.kind == "box":
            return _box_eigenstate(grid, potential, recipe.get("n", 1), mass, hbar)
        raise StateError(f"no closed-form eigenstates for potential kind {potential.kind!r}")
    if kind == "superposition":
        terms = recipe.get("terms") or []
        if not terms:
            raise StateError("superposition needs at least one term")
        amp = np.zeros(grid.shape, dtype=complex)
        for coeff, sub in terms:
            part = _build(grid, sub, mass, hbar)
            part = part / math.sqrt(np.sum(np.abs(part) ** 2) * grid.cell_volume)
            amp += complex(coeff) * part
        return amp
    raise StateError(f"unknown state recipe {kind!r}")


def make_state(grid: Grid, recipe: dict, mass=1.0, hbar=1.0) -> Wavefunction:
    """Build a normalized wavefunction at t = 0 from a recipe dict.

    Recipes::

        {"kind": "gaussian", "center": c, "width": s, "momentum": k}
        {"kind": "eigenstate", "potential": Potential, "n": n}
        {"kind": "superposition", "terms": [(coeff, recipe), ...]}

    Superposition terms are normalized individually before weighting, so
    ``[(1/sqrt2, ground), (1/sqrt2, first)]`` gives the textbook state.
    """
    mass = np.broadcast_to(np.asarray(mass, dtype=float), (grid.dims,))
    amp = _build(grid, recipe, mass, hbar)
    return Wavefunction(grid, amp, 0.0).normalized()


def potential_from_dict(d: dict) -> Potential:
    d = dict(d)
    kind = d.pop("kind", "free")
    if kind == "custom" and "values" in d:
        d["values"] = np.asarray(d["values"], dtype=float)
    return Potential(kind, d)


# -- evolution ---------------------------------------------------------------


class SplitStep:
    """Strang-split propagator: half potential kick, kinetic drift in k-space,
    half potential kick. Phase factors are cached per step length."""

    def __init__(self, grid: Grid, potential: Potential, cfg: EvolutionConfig):
        cfg.check(grid)
        self.grid = grid
        self.potential = potential
        self.cfg = cfg
        m = cfg.masses(grid)
        self._V = potential.values(grid, m)
        self._T = sum(cfg.hbar * k**2 / (2 * mi) for k, mi in zip(grid.kmesh(), m))
        self._cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def _factors(self, dt):
        f = self._cache.get(dt)
        if f is None:
            hbar = self.cfg.hbar
            f = (np.exp(-0.5j * dt * self._V / hbar), np.exp(-1j * dt * self._T / hbar))
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[dt] = f
        return f

    def step(self, amp: np.ndarray, dt: float) -> np.ndarray:
        half_v, kin = self._factors(dt)
        amp = half_v * amp
        amp = np.fft.ifftn(kin * np.fft.fftn(amp))
        return half_v * amp

    def run(self, amp: np.ndarray, dt: float, nsteps: int, start_index: int = 0) -> np.ndarray:
        for i in range(nsteps):
            amp = self.step(amp, dt)
            if not np.all(np.isfinite(amp)):
                raise EvolutionError(f"non-finite amplitude at step {start_index + i + 1}", start_index + i + 1)
        return amp


def _steps_to(t_from, t_to, dt):
    """Whole steps and the remaining partial step from t_from to t_to."""
    span = t_to - t_from
    n = int(math.floor(span / dt + 1e-9))
    rest = span - n * dt
    if rest < 1e-12 * max(1.0, abs(t_to)):
        rest = 0.0
    return n, rest


def evolve(psi: Wavefunction, potential: Potential, cfg: EvolutionConfig, t_target: float) -> Wavefunction:
    """Advance ``psi`` to ``t_target`` by repeated split steps of ``cfg.dt``,
    shortening the last step to land exactly on the target time."""
    if t_target < psi.time:
        raise ValueError(f"t_target={t_target} precedes psi.time={psi.time}")
    if t_target == psi.time:
        return psi
    prop = SplitStep(psi.grid, potential, cfg)
    n, rest = _steps_to(psi.time, t_target, cfg.dt)
    amp = prop.run(psi.amplitudes, cfg.dt, n)
    if rest:
        amp = prop.run(amp, rest, 1, n)
    return Wavefunction(psi.grid, amp, t_target)


class PsiSource:
    """Read-only supplier of psi(t) for t in [t0, t_final].

    Every snapshot is computed along one canonical path: whole steps of
    ``cfg.dt`` from the initial state, then a single partial step. Results do
    not depend on the order in which times are requested. Canonical states
    are checkpointed every ``checkpoint_every`` steps; arbitrary-time
    snapshots sit in a bounded LRU cache. Safe for concurrent readers.
    """

    def __init__(self, psi0: Wavefunction, potential: Potential, cfg: EvolutionConfig,
                 t_final: float, checkpoint_every: int = 64, cache_size: int = 256):
        if t_final < psi0.time:
            raise ValueError("t_final precedes the initial time")
        self.psi0 = psi0
        self.potential = potential
        self.cfg = cfg
        self.t0 = psi0.time
        self.t_final = float(t_final)
        self._prop = SplitStep(psi0.grid, potential, cfg)
        self._every = max(1, int(checkpoint_every))
        self._checkpoints = {0: psi0.amplitudes}
        self._cache: OrderedDict[float, Wavefunction] = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.RLock()

    @property
    def grid(self) -> Grid:
        return self.psi0.grid

    @property
    def hbar(self) -> float:
        return self.cfg.hbar

    def masses(self) -> np.ndarray:
        return self.cfg.masses(self.grid)

    def covers(self, t: float) -> bool:
        return self.t0 - 1e-12 <= t <= self.t_final + 1e-12

    def _canonical(self, k: int) -> np.ndarray:
        base = max(c for c in self._checkpoints if c <= k)
        amp = self._checkpoints[base]
        dt = self.cfg.dt
        while base < k:
            nxt = min(k, (base // self._every + 1) * self._every)
            amp = self._prop.run(amp, dt, nxt - base, base)
            base = nxt
            if base % self._every == 0:
                self._checkpoints[base] = amp
        return amp

    def at(self, t: float) -> Wavefunction:
        t = float(t)
        if not self.covers(t):
            raise ValueError(f"t={t} outside evolved range [{self.t0}, {self.t_final}]")
        with self._lock:
            hit = self._cache.get(t)
            if hit is not None:
                self._cache.move_to_end(t)
                return hit
            k, rest = _steps_to(self.t0, t, self.cfg.dt)
            amp = self._canonical(k)
            if rest:
                amp = self._prop.run(amp, rest, 1, k)
            psi = Wavefunction(self.grid, amp, t)
            self._cache[t] = psi
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
            return psi
