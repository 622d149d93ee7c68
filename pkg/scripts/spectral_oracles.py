"""
Independent numerical oracles for divergence constraints.

Spectral derivatives on periodic grids, an 8th-order finite-difference
stencil for pointwise checks of closed-form fields, and the one-sided
differences used by compactly supported constructions.
"""

from typing import Callable, Dict, List, Sequence, Tuple
import os
import sys

import numpy as np

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from errors import InvalidParams, NonZeroMean

FD8_OFFSETS = np.arange(-4, 5)
FD8_WEIGHTS = np.array([1 / 280, -4 / 105, 1 / 5, -4 / 5, 0.0, 4 / 5, -1 / 5, 4 / 105, -1 / 280])


def angular_wavenumbers(shape: Sequence[int], spacing: float, zero_nyquist: bool = True) -> List[np.ndarray]:
    """2*pi*k for every axis, broadcastable against an array of the given shape."""
    out = []
    for axis, size in enumerate(shape):
        k = 2.0 * np.pi * np.fft.fftfreq(size, d=spacing)
        if zero_nyquist and size % 2 == 0:
            k[size // 2] = 0.0
        view = [1] * len(shape)
        view[axis] = size
        out.append(k.reshape(view))
    return out


def grid_points(shape: Sequence[int], spacing: float, origin: Sequence[float]) -> np.ndarray:
    """Cell-centred sample points, shape (*shape, n)."""
    axes = [origin[i] + (np.arange(size) + 0.5) * spacing for i, size in enumerate(shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


class SpectralField:
    """Real scalar field on a periodic grid with exact spectral first derivatives."""

    __array_ufunc__ = None

    def __init__(self, values: np.ndarray, spacing: float) -> None:
        self.values = np.asarray(values, dtype=float)
        self.spacing = float(spacing)

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def derivative(self, axis: int) -> "SpectralField":
        k = angular_wavenumbers(self.values.shape, self.spacing)[axis]
        spectrum = np.fft.fftn(self.values)
        return SpectralField(np.real(np.fft.ifftn(1j * k * spectrum)), self.spacing)

    def __add__(self, other):
        if isinstance(other, (int, float)) and other == 0:
            return self
        return SpectralField(self.values + other.values, self.spacing)

    __radd__ = __add__

    def __neg__(self):
        return SpectralField(-self.values, self.spacing)

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, factor: float):
        return SpectralField(float(factor) * self.values, self.spacing)

    __rmul__ = __mul__


def spectral_divergence(components: Sequence[np.ndarray], spacing: float) -> np.ndarray:
    total = np.zeros_like(np.asarray(components[0], dtype=float))
    for axis, component in enumerate(components):
        total += SpectralField(component, spacing).derivative(axis).values
    return total


def spectral_gradient(values: np.ndarray, spacing: float) -> List[np.ndarray]:
    field = SpectralField(values, spacing)
    return [field.derivative(axis).values for axis in range(field.ndim)]


def inverse_laplacian(values: np.ndarray, spacing: float, mean_tol: float = 1e-10) -> np.ndarray:
    """Periodic Delta^{-1} built from the same first-derivative multipliers."""
    values = np.asarray(values, dtype=float)
    mean = float(values.mean())
    if abs(mean) > mean_tol * (1.0 + np.max(np.abs(values))):
        raise NonZeroMean(f"field has nonzero mean {mean:.3e}")
    ks = angular_wavenumbers(values.shape, spacing)
    k2 = sum(k ** 2 for k in ks)
    spectrum = np.fft.fftn(values)
    zero = k2 == 0.0
    k2 = np.where(zero, 1.0, k2)
    solution = -spectrum / k2
    solution[zero] = 0.0
    return np.real(np.fft.ifftn(solution))


def _fd_partial(field_fn: Callable[[np.ndarray], np.ndarray], points: np.ndarray, axis: int, h: float) -> np.ndarray:
    """8th-order central difference of a pointwise evaluator along one axis."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    total = None
    for offset, weight in zip(FD8_OFFSETS, FD8_WEIGHTS):
        if weight == 0.0:
            continue
        shifted = points.copy()
        shifted[:, axis] += offset * h
        value = weight * np.asarray(field_fn(shifted))
        total = value if total is None else total + value
    return total / h


def fd_divergence(wave, points: np.ndarray, h: float) -> Dict[str, float]:
    """Pointwise div n and div V - B n of a wave, each scaled by the field size at the points."""
    if h <= 0.0:
        raise InvalidParams("finite-difference step must be positive")
    n = wave.n
    points = np.atleast_2d(points)
    div_n = np.zeros(points.shape[0])
    div_V = np.zeros((points.shape[0], n))
    for axis in range(n):
        dm = _fd_partial(lambda x: wave.evaluate(x)[0], points, axis, h)
        dU = _fd_partial(lambda x: wave.evaluate(x)[1], points, axis, h)
        div_n += dm[:, axis]
        div_V += dU[:, :, axis]
    m, U = wave.evaluate(points)
    source = m @ wave.B.T
    scale = 1.0 + np.max(np.abs(m)) + np.max(np.abs(U))
    return {
        "div_n": float(np.max(np.abs(div_n)) / scale),
        "div_V_minus_Bn": float(np.max(np.abs(div_V - source)) / scale),
    }


def wave_spectral_residual(wave, resolution: int = 64) -> Dict[str, float]:
    """
    Spectral constraint residuals of a wave sampled on its own cell.

    The field vanishes near the cell boundary, so the cell is a period. Norms are
    L2 over the grid; the result is limited by the finite smoothness of the profiles.
    """
    n = wave.n
    side = wave.cutoff.side
    spacing = side / resolution
    origin = wave.cutoff.center - 0.5 * side
    points = grid_points((resolution,) * n, spacing, origin).reshape(-1, n)
    m, U = wave.evaluate(points)
    shape = (resolution,) * n
    m_grid = [m[:, i].reshape(shape) for i in range(n)]
    U_grid = [[U[:, i, j].reshape(shape) for j in range(n)] for i in range(n)]
    div_n = spectral_divergence(m_grid, spacing)
    residual_V = 0.0
    for i in range(n):
        div_row = spectral_divergence(U_grid[i], spacing)
        source = sum(wave.B[i, j] * m_grid[j] for j in range(n))
        residual_V += float(np.sum((div_row - source) ** 2))
    norm_m = max(float(np.linalg.norm(m)), 1e-300)
    norm_U = max(float(np.linalg.norm(U)), 1e-300)
    return {
        "div_n": side * float(np.linalg.norm(div_n)) / norm_m,
        "div_V_minus_Bn": side * float(np.sqrt(residual_V)) / norm_U,
        "resolution": float(resolution),
    }


def forward_difference(values: np.ndarray, axis: int, spacing: float) -> np.ndarray:
    """Periodic one-sided difference (f(x + h e_axis) - f(x)) / h."""
    values = np.asarray(values, dtype=float)
    return (np.roll(values, -1, axis=axis) - values) / spacing


def forward_antiderivative(values: np.ndarray, axis: int, spacing: float) -> np.ndarray:
    """
    phi_k = h * sum_{i<k} f_i along one axis, so forward_difference(phi) = f.

    phi vanishes before the support of f and, when every line sum of f is
    zero, after it as well up to rounding.
    """
    values = np.asarray(values, dtype=float)
    total = np.cumsum(values, axis=axis) * spacing
    return total - values * spacing
