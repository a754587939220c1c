"""Periodic grids on the d-torus, wavefunctions and their discrete transforms.

Frequencies are stored as integer lattice vectors ``n``; the physical
covector attached to ``n`` is ``xi = h * n * (2*pi/L)``.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GridSpec",
    "WaveFunction",
    "PhasePoint",
    "fft_forward",
    "fft_inverse",
    "norms",
    "save_wavefunction",
    "load_wavefunction",
    "export_modulus_csv",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on ``[0, L)^d`` with semiclassical parameter ``h``.

    Parameters
    ----------
    d : int
        Dimension, 1 or 2.
    N : int
        Points per axis, a power of two, at least 8.
    h : float
        Semiclassical parameter.
    L : float
        Period per axis.
    """

    d: int
    N: int
    h: float
    L: float = 2 * np.pi

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"d must be 1 or 2, got {self.d}")
        if self.N < 8 or self.N & (self.N - 1):
            raise ValueError(f"N must be a power of two >= 8, got {self.N}")
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if not self.L > 0:
            raise ValueError(f"L must be positive, got {self.L}")

    @property
    def shape(self):
        return (self.N,) * self.d

    @property
    def size(self):
        return self.N**self.d

    @property
    def dx(self):
        return self.L / self.N

    @property
    def cell_volume(self):
        return self.dx**self.d

    @property
    def volume(self):
        return self.L**self.d

    @property
    def k0(self):
        """Wavenumber of the lattice unit, ``2*pi/L``."""
        return 2 * np.pi / self.L

    @property
    def dxi(self):
        """Spacing of the covector lattice."""
        return self.h * self.k0

    @property
    def xi_max(self):
        """Largest resolved covector component."""
        return self.h * self.k0 * (self.N // 2)

    def axis(self):
        return np.arange(self.N) * self.dx

    def mesh(self):
        """Coordinate arrays, one per axis, each of shape ``self.shape``."""
        return np.meshgrid(*([self.axis()] * self.d), indexing="ij")

    def freq_axis(self):
        """Integer frequencies in FFT order (Nyquist stored as ``-N/2``)."""
        return np.fft.fftfreq(self.N, 1.0 / self.N).astype(int)

    def freq_mesh(self):
        return np.meshgrid(*([self.freq_axis()] * self.d), indexing="ij")

    def xi_mesh(self):
        return [self.h * self.k0 * n for n in self.freq_mesh()]

    def shell_resolved(self, mu2, margin=2.0):
        """True if the shell ``|xi|^2 <= mu2`` sits inside the window with margin."""
        return margin * np.sqrt(mu2) <= self.xi_max

    def check_shell(self, mu2, margin=2.0):
        if not self.shell_resolved(mu2, margin):
            raise ValueError(
                f"aliasing: shell radius sqrt({mu2}) times margin {margin} exceeds "
                f"the resolved frequency window xi_max={self.xi_max:.4g} "
                f"(h={self.h}, N={self.N}); increase N or h"
            )

    def to_dict(self):
        return {"d": self.d, "N": self.N, "L": self.L, "h": self.h}


@dataclass(frozen=True)
class PhasePoint:
    """A point ``(x, xi)`` of the cotangent bundle of the torus."""

    x: np.ndarray
    xi: np.ndarray
    L: float = 2 * np.pi

    def __post_init__(self):
        x = np.mod(np.atleast_1d(np.asarray(self.x, dtype=float)), self.L)
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        if x.shape != xi.shape:
            raise ValueError("x and xi must have the same shape")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xi", xi)

    def as_array(self):
        return np.concatenate([self.x, self.xi])


@dataclass(frozen=True)
class WaveFunction:
    """Complex samples of a state on a :class:`GridSpec`."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.size != self.grid.size:
            raise ValueError(f"expected {self.grid.size} samples, got {v.size}")
        v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("wavefunction has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid, f):
        return cls(grid, f(*grid.mesh()))

    @classmethod
    def plane_wave(cls, grid, n, amplitude=1.0):
        n = np.broadcast_to(np.asarray(n), (grid.d,))
        phase = sum(ni * grid.k0 * xi for ni, xi in zip(n, grid.mesh()))
        return cls(grid, amplitude * np.exp(1j * phase))

    def flat(self):
        return self.values.reshape(-1)

    def l2(self):
        return norms(self)["l2"]

    def normalized(self):
        return WaveFunction(self.grid, self.values / self.l2())

    def __add__(self, other):
        if other.grid != self.grid:
            raise ValueError("grid mismatch")
        return WaveFunction(self.grid, self.values + other.values)

    def __mul__(self, c):
        return WaveFunction(self.grid, self.values * c)

    __rmul__ = __mul__


def _require_finite(arr):
    if not np.all(np.isfinite(arr)):
        bad = int(np.sum(~np.isfinite(arr)))
        raise ValueError(f"non-finite input: {bad} entries are nan or inf")


def fft_forward(psi):
    """Fourier coefficients ``c_n`` with ``psi(x) = sum_n c_n exp(i n.x 2pi/L)``.

    The array is in FFT order on each axis. Parseval reads
    ``L**d * sum |c_n|**2 == ||psi||_{L2}**2``.
    """
    _require_finite(psi.values)
    return np.fft.fftn(psi.values, norm="forward")


def fft_inverse(grid, coeffs):
    coeffs = np.asarray(coeffs).reshape(grid.shape)
    _require_finite(coeffs)
    return WaveFunction(grid, np.fft.ifftn(coeffs, norm="forward"))


def norms(psi):
    v = psi.values
    _require_finite(v)
    l2 = float(np.sqrt(np.sum(np.abs(v) ** 2) * psi.grid.cell_volume))
    linf = float(np.max(np.abs(v)))
    return {"l2": l2, "linf": linf}


def save_wavefunction(psi, path):
    """Write ``<path>.json`` header and ``<path>.bin`` little-endian complex64 data."""
    path = Path(path)
    header = dict(psi.grid.to_dict(), dtype="<c8", order="C")
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))
    psi.flat().astype("<c8").tofile(path.with_suffix(".bin"))


def load_wavefunction(path):
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    grid = GridSpec(d=header["d"], N=header["N"], h=header["h"], L=header["L"])
    data = np.fromfile(path.with_suffix(".bin"), dtype="<c8")
    return WaveFunction(grid, data.astype(complex))


def export_modulus_csv(psi, path):
    """CSV of grid coordinates followed by ``|psi(x)|``."""
    cols = [x.reshape(-1) for x in psi.grid.mesh()] + [np.abs(psi.flat())]
    names = ["x", "y"][: psi.grid.d] + ["abs_psi"]
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=",".join(names), comments="")
