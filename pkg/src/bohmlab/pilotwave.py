"""Bohmian velocity fields and trajectory integration."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .configspace import Grid, PsiSource, Wavefunction, density


class NodeUnderflowError(RuntimeError):
    """The integrator could not shrink its step enough near a node."""

    def __init__(self, t, x, index=None):
        self.t = float(t)
        self.x = np.asarray(x, dtype=float).tolist()
        self.index = index
        where = f" (trajectory {index})" if index is not None else ""
        super().__init__(f"step size underflow near node at t={self.t:.6g}, x={self.x}{where}")


@dataclass(frozen=True)
class NodePolicy:
    """Guards for integrating close to wavefunction zeros.

    ``node_epsilon`` is an absolute density threshold; when None it is taken
    as ``node_rel`` times the peak density of each snapshot. ``speed_cap``
    defaults to ``100 * extent / duration`` once the integration window is
    known.
    """

    node_epsilon: float | None = None
    speed_cap: float | None = None
    substep_shrink: float = 0.5
    dt_min: float = 1e-9
    node_rel: float = 1e-12
    max_substeps: int = 200_000

    def __post_init__(self):
        if self.node_epsilon is not None and not self.node_epsilon > 0:
            raise ValueError("node_epsilon must be positive")
        if self.speed_cap is not None and not self.speed_cap > 0:
            raise ValueError("speed_cap must be positive")
        if not 0 < self.substep_shrink < 1:
            raise ValueError("substep_shrink must lie in (0, 1)")
        if not self.dt_min > 0 or not self.node_rel > 0:
            raise ValueError("dt_min and node_rel must be positive")

    def threshold(self, rho: np.ndarray) -> float:
        if self.node_epsilon is not None:
            return self.node_epsilon
        return self.node_rel * float(rho.max())

    def cap(self, grid: Grid, duration: float) -> float:
        if self.speed_cap is not None:
            return self.speed_cap
        return 100.0 * float(grid.lengths.max()) / max(duration, 1e-12)

    def to_dict(self):
        return {
            "node_epsilon": self.node_epsilon, "speed_cap": self.speed_cap,
            "substep_shrink": self.substep_shrink, "dt_min": self.dt_min,
            "node_rel": self.node_rel, "max_substeps": self.max_substeps,
        }


@dataclass(frozen=True, eq=False)
class VelocityField:
    grid: Grid
    values: np.ndarray       # (dims, *shape); NaN where flagged
    flagged: np.ndarray      # bool mask, density below node_epsilon
    time: float
    regularized: np.ndarray  # (dims, *shape); finite everywhere, used near nodes


def _real_gradient(f: np.ndarray, grid: Grid) -> list[np.ndarray]:
    """Spectral gradient of a real array; the Nyquist mode is dropped so the
    derivative stays real."""
    out = []
    for ax in range(grid.dims):
        n = grid.points[ax]
        k = 2 * np.pi * np.fft.rfftfreq(n, d=grid.spacing[ax])
        k[-1] = 0.0
        shape = [1] * grid.dims
        shape[ax] = k.size
        F = np.fft.rfft(f, axis=ax)
        out.append(np.fft.irfft(1j * k.reshape(shape) * F, n=n, axis=ax))
    return out


def spectral_gradient(psi: Wavefunction) -> list[np.ndarray]:
    g = psi.grid
    re = _real_gradient(psi.amplitudes.real, g)
    im = _real_gradient(psi.amplitudes.imag, g)
    return [a + 1j * b for a, b in zip(re, im)]


def _gauge_fixed(amp: np.ndarray) -> np.ndarray:
    """Rotate away the global phase, using the largest-modulus sample as the
    reference, so the velocity does not depend on it even at rounding level
    (beyond the rounding already present in the rotated input)."""
    ref = amp.flat[int(np.argmax(np.abs(amp)))]
    if ref == 0:
        return amp
    return amp * (np.conj(ref) / abs(ref))


def velocity_field(psi: Wavefunction, mass=1.0, hbar=1.0, policy: NodePolicy | None = None) -> VelocityField:
    """v = (hbar/m) Im(conj(psi) grad psi) / |psi|^2, gradient taken spectrally.

    Points whose density falls below the node threshold are flagged and
    carry NaN in ``values``.
    """
    policy = policy or NodePolicy()
    g = psi.grid
    mass = np.broadcast_to(np.asarray(mass, dtype=float), (g.dims,))
    amp = _gauge_fixed(psi.amplitudes)
    rho = density(psi)
    eps = policy.threshold(rho)
    flagged = rho < eps
    safe = np.where(flagged, np.maximum(rho, eps), rho)
    re, im = amp.real, amp.imag
    d_re = _real_gradient(re, g)
    d_im = _real_gradient(im, g)
    reg = np.stack([hbar / m * (re * b - im * a) / safe for a, b, m in zip(d_re, d_im, mass)])
    vals = np.where(flagged[None], np.nan, reg)
    return VelocityField(g, vals, flagged, psi.time, reg)


def _stencil(grid: Grid, x: np.ndarray):
    """Corner indices and weights for multilinear interpolation at x (n, dims)."""
    f = (x - grid.lo) / grid.spacing
    base = np.floor(f)
    w = f - base
    i0 = np.mod(base.astype(np.int64), grid.points)
    i1 = np.mod(i0 + 1, grid.points)
    return i0, i1, w


def interpolate(grid: Grid, field_values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multilinear periodic interpolation of a scalar grid field at x (n, dims)."""
    i0, i1, w = _stencil(grid, x)
    if grid.dims == 1:
        a, b = field_values[i0[:, 0]], field_values[i1[:, 0]]
        return (1 - w[:, 0]) * a + w[:, 0] * b
    wx, wy = w[:, 0], w[:, 1]
    f00 = field_values[i0[:, 0], i0[:, 1]]
    f10 = field_values[i1[:, 0], i0[:, 1]]
    f01 = field_values[i0[:, 0], i1[:, 1]]
    f11 = field_values[i1[:, 0], i1[:, 1]]
    return (1 - wx) * (1 - wy) * f00 + wx * (1 - wy) * f10 + (1 - wx) * wy * f01 + wx * wy * f11


def _near_node(grid: Grid, flagged: np.ndarray, x: np.ndarray) -> np.ndarray:
    i0, i1, _ = _stencil(grid, x)
    if grid.dims == 1:
        return flagged[i0[:, 0]] | flagged[i1[:, 0]]
    return (flagged[i0[:, 0], i0[:, 1]] | flagged[i1[:, 0], i0[:, 1]]
            | flagged[i0[:, 0], i1[:, 1]] | flagged[i1[:, 0], i1[:, 1]])


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray       # (T,)
    positions: np.ndarray   # (T, dims), wrapped into the grid

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.asarray(self.positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if t.ndim != 1 or x.shape[0] != t.shape[0] or t.size == 0:
            raise ValueError("times and positions must have matching leading length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", x)

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def x0(self) -> np.ndarray:
        return self.positions[0]

    @property
    def dims(self) -> int:
        return self.positions.shape[1]

    def covers(self, t: float) -> bool:
        return self.times[0] - 1e-12 <= t <= self.times[-1] + 1e-12

    def position_at(self, t: float, grid: Grid | None = None) -> np.ndarray:
        return positions_at(self.times, self.positions[None], t, grid)[0]


def positions_at(times: np.ndarray, positions: np.ndarray, t: float, grid: Grid | None = None) -> np.ndarray:
    """Linear interpolation in time of positions (n, T, dims) at time t.

    With a grid, the step between neighbouring samples is taken as the
    minimal periodic image so wrap-arounds interpolate correctly.
    """
    if not times[0] - 1e-12 <= t <= times[-1] + 1e-12:
        raise ValueError(f"t={t} outside trajectory range [{times[0]}, {times[-1]}]")
    j = int(np.searchsorted(times, t, side="right")) - 1
    j = min(max(j, 0), len(times) - 1)
    if j == len(times) - 1 or t == times[j]:
        return positions[:, j].copy()
    a, b = positions[:, j], positions[:, j + 1]
    d = b - a
    if grid is not None:
        L = grid.lengths
        d = d - L * np.round(d / L)
    w = (t - times[j]) / (times[j + 1] - times[j])
    x = a + w * d
    return grid.wrap(x) if grid is not None else x


def output_grid(t0: float, t1: float, output_dt: float | None = None, n: int | None = None) -> np.ndarray:
    """Evenly spaced output times covering [t0, t1] inclusive."""
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    if t1 == t0:
        return np.array([t0])
    if n is None:
        n = max(1, int(math.ceil((t1 - t0) / output_dt - 1e-9)))
    return t0 + (t1 - t0) * np.arange(n + 1) / n


class _FieldEvaluator:
    """Velocity lookups at arbitrary (x, t) with a small per-time cache."""

    def __init__(self, source: PsiSource, policy: NodePolicy, speed_cap: float):
        self.source = source
        self.grid = source.grid
        self.policy = policy
        self.cap = speed_cap
        self.mass = source.masses()
        self._fields: dict[float, VelocityField] = {}

    def field(self, t: float) -> VelocityField:
        f = self._fields.get(t)
        if f is None:
            f = velocity_field(self.source.at(t), self.mass, self.source.hbar, self.policy)
            if len(self._fields) > 32:
                self._fields.pop(next(iter(self._fields)))
            self._fields[t] = f
        return f

    def __call__(self, x: np.ndarray, t: float):
        f = self.field(t)
        near = _near_node(self.grid, f.flagged, x)
        v = np.stack([interpolate(self.grid, comp, x) for comp in f.regularized], axis=1)
        if near.any():
            speed = np.linalg.norm(v[near], axis=1)
            scale = np.minimum(1.0, self.cap / np.maximum(speed, 1e-300))
            v[near] = v[near] * scale[:, None]
        return v, near


def _rk4(ev: _FieldEvaluator, x, t, h):
    k1, n1 = ev(x, t)
    k2, n2 = ev(x + 0.5 * h * k1, t + 0.5 * h)
    k3, n3 = ev(x + 0.5 * h * k2, t + 0.5 * h)
    k4, n4 = ev(x + h * k3, t + h)
    x_new = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x_new, n1 | n2 | n3 | n4


def _advance_near_node(ev: _FieldEvaluator, x, t, h, index):
    """Cross [t, t + h) with shrunken substeps for a single point x (1, dims)."""
    pol = ev.policy
    half_cell = 0.5 * float(ev.grid.spacing.min())
    t_end = t + h
    h_sub = h * pol.substep_shrink
    steps = 0
    while t < t_end:
        v, _ = ev(x, t)
        speed = float(np.linalg.norm(v))
        while speed * h_sub > half_cell:
            h_sub *= pol.substep_shrink
        if h_sub < pol.dt_min or steps >= pol.max_substeps:
            raise NodeUnderflowError(t, ev.grid.wrap(x)[0], index)
        step = min(h_sub, t_end - t)
        if t_end - (t + step) < 1e-12 * max(1.0, abs(t_end)):
            step = t_end - t
        x, _ = _rk4(ev, x, t, step)
        t = t_end if step == t_end - t else t + step
        steps += 1
    return x


def integrate_many(x0, t0: float, times, source: PsiSource, policy: NodePolicy | None = None,
                   rk_dt: float = 0.01, indices=None, on_error: str = "raise"):
    """Integrate dx/dt = v(x, t) for many seeds at once with classical RK4.

    ``times`` are the output times (first must equal ``t0``). Each output
    interval is split into equal RK steps no longer than ``rk_dt``. Points
    whose interpolation stencil touches a flagged node during a step redo
    that step with shrinking substeps and capped speed. Every point is
    advanced elementwise, so results do not depend on which other points
    share the batch.

    Returns ``(positions, failures)``: positions has shape (n, T, dims);
    ``failures`` maps a point index to its NodeUnderflowError. With
    ``on_error="raise"`` the first failure is raised instead.
    """
    policy = policy or NodePolicy()
    grid = source.grid
    times = np.asarray(times, dtype=float)
    if times[0] != t0:
        raise ValueError("first output time must equal t0")
    if np.any(np.diff(times) <= 0):
        raise ValueError("output times must be strictly increasing")
    x = grid.wrap(np.asarray(x0, dtype=float).reshape(-1, grid.dims))
    n = x.shape[0]
    idx = np.arange(n) if indices is None else np.asarray(indices)
    ev = _FieldEvaluator(source, policy, policy.cap(grid, float(times[-1] - t0)))
    out = np.full((n, times.size, grid.dims), np.nan)
    out[:, 0] = x
    alive = np.ones(n, dtype=bool)
    failures: dict[int, NodeUnderflowError] = {}
    for j in range(times.size - 1):
        ta, tb = float(times[j]), float(times[j + 1])
        nsteps = max(1, int(math.ceil((tb - ta) / rk_dt - 1e-9)))
        h = (tb - ta) / nsteps
        for s in range(nsteps):
            t = ta + s * h
            live = np.flatnonzero(alive)
            if live.size == 0:
                break
            xl = x[live]
            x_new, near = _rk4(ev, xl, t, h)
            for k in np.flatnonzero(near):
                try:
                    x_new[k] = _advance_near_node(ev, xl[k:k + 1], t, h, int(idx[live[k]]))[0]
                except NodeUnderflowError as err:
                    if on_error == "raise":
                        raise
                    failures[int(idx[live[k]])] = err
                    alive[live[k]] = False
            x[live] = grid.wrap(x_new)
        out[alive, j + 1] = x[alive]
    return out, failures


def integrate_trajectory(x0, t0: float, t1: float, source: PsiSource, policy: NodePolicy | None = None,
                         rk_dt: float = 0.01, output_times=None, output_dt: float | None = None) -> Trajectory:
    """Single Bohmian trajectory from x0 at t0, sampled at the output times
    (default: ``output_dt`` spacing, or one sample per RK step)."""
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    if not source.grid.contains(x0):
        raise ValueError(f"x0={x0} lies outside the grid extent")
    if output_times is None:
        output_times = output_grid(t0, t1, output_dt or rk_dt)
    pos, _ = integrate_many(x0, t0, output_times, source, policy, rk_dt)
    return Trajectory(np.asarray(output_times, dtype=float), pos[0])


def path_density_integrals(times, positions, source: PsiSource) -> np.ndarray:
    """Trapezoidal time integral of |psi(x(t), t)|^2 for trajectories (n, T, dims)."""
    times = np.asarray(times, dtype=float)
    if times.size < 2:
        return np.zeros(positions.shape[0])
    grid = source.grid
    vals = np.empty((positions.shape[0], times.size))
    for j, t in enumerate(times):
        vals[:, j] = interpolate(grid, density(source.at(t)), positions[:, j])
    return np.trapezoid(vals, times, axis=1)


def path_density_integral(traj: Trajectory, source: PsiSource) -> float:
    """Time integral of the density along one trajectory (zero for one sample)."""
    return float(path_density_integrals(traj.times, traj.positions[None], source)[0])
