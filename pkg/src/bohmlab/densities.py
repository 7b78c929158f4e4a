"""Grid quadrature for probability densities on periodic grids.

Two models share one interface:

``SpectralDensity``
    The trigonometric interpolant of grid samples, integrated exactly. Used
    for |psi|^2, which the split-step solver represents as band-limited.
``CellDensity``
    Piecewise constant over cells centred on the grid points. Used for
    tabulated custom densities, which may be discontinuous.

Cells are ``[x_j - dx/2, x_j + dx/2)``. Both models expose cell masses (for
inverse-CDF sampling), axis-marginal CDFs (for KS tests) and exact masses of
axis-aligned boxes (for perception regions).
"""
from __future__ import annotations

import numpy as np

from .configspace import Grid, Wavefunction, density


def _antiderivative_kernel(grid: Grid, axis: int, u: np.ndarray) -> np.ndarray:
    """Integral of each Fourier mode over [0, u): shape (len(u), n)."""
    n = grid.points[axis]
    k = grid.wavenumbers(axis)
    u = np.asarray(u, dtype=float)[:, None]
    out = np.empty((u.shape[0], n), dtype=complex)
    out[:, 0] = u[:, 0]
    kk = k[1:]
    out[:, 1:] = (np.exp(1j * kk * u) - 1.0) / (1j * kk)
    return out


class SpectralDensity:
    def __init__(self, grid: Grid, values: np.ndarray):
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        # c such that values[j] = sum_k c[k] exp(i k (x_j - lo))
        self._coef = np.fft.fftn(self.values) / self.values.size

    @classmethod
    def of(cls, psi: Wavefunction) -> "SpectralDensity":
        return cls(psi.grid, density(psi))

    def total(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def _kernel(self, axis, a, b):
        lo = self.grid.extent[axis][0]
        a = np.asarray(a, dtype=float) - lo
        b = np.asarray(b, dtype=float) - lo
        return _antiderivative_kernel(self.grid, axis, b) - _antiderivative_kernel(self.grid, axis, a)

    def box_masses(self, boxes) -> np.ndarray:
        """Exact mass of each axis-aligned box; ``boxes`` has shape (m, dims, 2)."""
        boxes = np.asarray(boxes, dtype=float).reshape(-1, self.grid.dims, 2)
        if self.grid.dims == 1:
            K = self._kernel(0, boxes[:, 0, 0], boxes[:, 0, 1])
            return np.real(K @ self._coef)
        Kx = self._kernel(0, boxes[:, 0, 0], boxes[:, 0, 1])
        Ky = self._kernel(1, boxes[:, 1, 0], boxes[:, 1, 1])
        return np.real(np.einsum("mi,ij,mj->m", Kx, self._coef, Ky))

    def cell_masses(self) -> np.ndarray:
        """Mass in each grid cell, clipped at zero (ringing can dip below)."""
        g = self.grid
        kernels = []
        for ax in range(g.dims):
            x = g.axis(ax)
            h = 0.5 * g.spacing[ax]
            kernels.append(self._kernel(ax, x - h, x + h))
        if g.dims == 1:
            m = np.real(kernels[0] @ self._coef)
        else:
            m = np.real(kernels[0] @ self._coef @ kernels[1].T)
        return np.clip(m, 0.0, None)

    def marginal(self, axis: int) -> "SpectralDensity":
        if self.grid.dims == 1:
            return self
        other = 1 - axis
        vals = self.values.sum(axis=other) * self.grid.spacing[other]
        sub = Grid((self.grid.extent[axis],), (self.grid.points[axis],))
        return SpectralDensity(sub, vals)

    def cdf(self, x, axis: int = 0, chunk: int = 4096) -> np.ndarray:
        """Marginal CDF along ``axis`` at positions ``x``, measured from the
        lower extent of the grid."""
        m = self.marginal(axis)
        lo = m.grid.extent[0][0]
        x = np.asarray(x, dtype=float).ravel()
        out = np.empty_like(x)
        for s in range(0, x.size, chunk):
            K = _antiderivative_kernel(m.grid, 0, x[s:s + chunk] - lo)
            out[s:s + chunk] = np.real(K @ m._coef)
        return out


class CellDensity:
    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise ValueError(f"density shape {values.shape} != grid {grid.shape}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("custom density must be finite and nonnegative")
        total = values.sum() * grid.cell_volume
        if not total > 0:
            raise ValueError("custom density is identically zero")
        self.grid = grid
        self.values = values / total

    def total(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def cell_masses(self) -> np.ndarray:
        return self.values * self.grid.cell_volume

    def _overlap(self, axis, a, b):
        """Length of overlap of [a, b) with every cell along ``axis``,
        counting periodic images of the cells: shape (m, n)."""
        g = self.grid
        x = g.axis(axis)
        h = 0.5 * g.spacing[axis]
        L = g.lengths[axis]
        a = np.asarray(a, dtype=float)[:, None]
        b = np.asarray(b, dtype=float)[:, None]
        out = 0.0
        for shift in (-L, 0.0, L):
            out = out + np.clip(np.minimum(b, x + h + shift) - np.maximum(a, x - h + shift), 0.0, None)
        return out

    def box_masses(self, boxes) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=float).reshape(-1, self.grid.dims, 2)
        if self.grid.dims == 1:
            return self._overlap(0, boxes[:, 0, 0], boxes[:, 0, 1]) @ self.values
        Ox = self._overlap(0, boxes[:, 0, 0], boxes[:, 0, 1])
        Oy = self._overlap(1, boxes[:, 1, 0], boxes[:, 1, 1])
        return np.einsum("mi,ij,mj->m", Ox, self.values, Oy)

    def marginal(self, axis: int) -> "CellDensity":
        if self.grid.dims == 1:
            return self
        other = 1 - axis
        vals = self.values.sum(axis=other) * self.grid.spacing[other]
        return CellDensity(Grid((self.grid.extent[axis],), (self.grid.points[axis],)), vals)

    def cdf(self, x, axis: int = 0) -> np.ndarray:
        m = self.marginal(axis)
        lo = m.grid.extent[0][0]
        x = np.asarray(x, dtype=float).ravel()
        return m._overlap(0, np.full(x.shape, lo), x) @ m.values
