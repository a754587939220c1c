"""Symbols on the discrete phase space of the torus and their quantization.

Operators are dense matrices in the unitary discrete Fourier basis
``f_n(x_j) = N**(-d/2) exp(i n.x_j)``. The quantization used throughout is
the symmetrized Kohn-Nirenberg rule ``(Op_KN(a) + Op_KN(conj a)^*) / 2``,
which is self-adjoint for real symbols and exact (Weyl) on symbols that are
affine in the covector.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fitting import loglog_fit
from .phasegrid import GridSpec, WaveFunction

__all__ = [
    "Symbol",
    "PseudoOp",
    "quantize",
    "kn_symbol",
    "operator_norm",
    "seminorm_probe",
    "oscillatory_integral",
    "decay_fit",
    "apply_fio",
    "fio_lagrangian_prediction",
    "symbol_from_descriptor",
    "load_symbol_samples",
    "save_symbol_samples",
    "to_fourier",
    "to_position",
]

COMPACT = -math.inf


@dataclass(frozen=True)
class Symbol:
    """Samples of ``a(x, xi)`` on the x-grid times the frequency lattice.

    ``samples`` has shape ``grid.shape + grid.shape``: the first ``d`` axes
    index ``x_j``, the last ``d`` index the integer frequency ``n`` in FFT
    order, so the covector is ``xi = h * k0 * n``. ``order = -inf`` marks a
    compactly supported symbol, which is checked for aliasing on quantization.
    """

    grid: GridSpec
    samples: np.ndarray = field(repr=False)
    order: float = 0.0
    eta: float = 0.0
    real: bool = False

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.shape != self.grid.shape * 2:
            raise ValueError(f"symbol samples must have shape {self.grid.shape * 2}, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("symbol samples must be finite")
        if not 0 <= self.eta < 0.5:
            raise ValueError(f"eta must lie in [0, 1/2), got {self.eta}")
        if self.real:
            s = np.real(s).astype(float)
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @classmethod
    def from_function(cls, grid, f, **meta):
        """Sample ``f(x, xi)``; ``x`` and ``xi`` are lists of ``d`` broadcastable arrays."""
        x, xi = phase_mesh(grid)
        return cls(grid, np.broadcast_to(f(x, xi), grid.shape * 2), **meta)

    def __mul__(self, other):
        if isinstance(other, Symbol):
            _same_grid(self, other)
            return Symbol(
                self.grid,
                self.samples * other.samples,
                order=self.order + other.order,
                eta=max(self.eta, other.eta),
                real=self.real and other.real,
            )
        return Symbol(self.grid, self.samples * other, self.order, self.eta, self.real and np.isrealobj(other))

    __rmul__ = __mul__


def phase_mesh(grid):
    """Broadcastable ``(x, xi)`` coordinate lists of the discrete phase space."""
    d = grid.d
    x, xi = [], []
    for i in range(d):
        shape = [1] * (2 * d)
        shape[i] = grid.N
        x.append(grid.axis().reshape(shape))
        shape = [1] * (2 * d)
        shape[d + i] = grid.N
        xi.append((grid.dxi * grid.freq_axis()).reshape(shape))
    return x, xi


def _same_grid(a, b):
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")


@dataclass(frozen=True)
class PseudoOp:
    """Dense operator in the unitary Fourier basis."""

    grid: GridSpec
    matrix: np.ndarray = field(repr=False)
    hermitian: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.shape != (self.grid.size, self.grid.size):
            raise ValueError(f"operator must be {self.grid.size}x{self.grid.size}")
        if self.hermitian:
            scale = max(np.linalg.norm(m), 1e-300)
            if np.linalg.norm(m - m.conj().T) > 1e-12 * scale:
                raise ValueError("operator flagged hermitian but is not")
        object.__setattr__(self, "matrix", m)

    def apply(self, psi):
        return WaveFunction(self.grid, to_position(self.grid, self.matrix @ to_fourier(psi)))

    def position_matrix(self):
        """The same operator acting on grid values."""
        N, d = self.grid.N, self.grid.d
        F = _dft(N)
        if d == 2:
            F = np.kron(F, F)
        return F.conj().T @ self.matrix @ F

    def __matmul__(self, other):
        _same_grid(self, other)
        return PseudoOp(self.grid, self.matrix @ other.matrix)

    def __sub__(self, other):
        _same_grid(self, other)
        return PseudoOp(self.grid, self.matrix - other.matrix)

    def __add__(self, other):
        _same_grid(self, other)
        return PseudoOp(self.grid, self.matrix + other.matrix, self.hermitian and other.hermitian)

    def __mul__(self, c):
        return PseudoOp(self.grid, self.matrix * c, self.hermitian and np.isrealobj(c))

    __rmul__ = __mul__

    @classmethod
    def fourier_multiplier(cls, grid, values, hermitian=None):
        values = np.asarray(values).reshape(-1)
        if hermitian is None:
            hermitian = np.isrealobj(values)
        return cls(grid, np.diag(values.astype(complex)), hermitian)


def _dft(N):
    return np.fft.fft(np.eye(N), norm="ortho")


def to_fourier(psi):
    """Coordinates of ``psi`` in the unitary Fourier basis (flattened)."""
    return np.fft.fftn(psi.values, norm="ortho").reshape(-1)


def to_position(grid, coords):
    return np.fft.ifftn(np.asarray(coords).reshape(grid.shape), norm="ortho")


def _difference_index(grid):
    """Flat index of ``(m - n) mod N`` for every pair of flat frequency indices."""
    N, d = grid.N, grid.d
    idx = np.arange(grid.size)
    if d == 1:
        return (idx[:, None] - idx[None, :]) % N
    m0, m1 = np.divmod(idx, N)
    k0 = (m0[:, None] - m0[None, :]) % N
    k1 = (m1[:, None] - m1[None, :]) % N
    return k0 * N + k1


def _x_spectrum(a):
    """``A[k, n]``: x-Fourier coefficients of the symbol at each frequency ``n``."""
    d = a.grid.d
    A = np.fft.fftn(a.samples, axes=tuple(range(d)), norm="forward")
    return A.reshape(a.grid.size, a.grid.size)


def _check_aliasing(a, tol=1e-8):
    if a.order != COMPACT:
        return
    d, N = a.grid.d, a.grid.N
    mag = np.abs(a.samples)
    peak = mag.max()
    if peak == 0:
        return
    n = np.abs(a.grid.freq_axis())
    edge = n >= N // 2 - N // 8
    for i in range(d):
        sl = [slice(None)] * (2 * d)
        sl[d + i] = edge
        if mag[tuple(sl)].max() > tol * peak:
            raise ValueError(
                "aliasing: compactly supported symbol reaches the outer eighth of the "
                f"frequency window (xi_max={a.grid.xi_max:.4g}); the energy shell is "
                "not resolved on this grid"
            )


def quantize(a, grid=None):
    """Symmetrized Kohn-Nirenberg quantization of ``a``.

    Matrix element ``<f_m, Op(a) f_n> = (A[m-n, n] + A[m-n, m]) / 2`` with
    ``A`` the x-Fourier transform of the samples.
    """
    if grid is not None and grid != a.grid:
        raise ValueError(f"symbol grid {a.grid} does not match operator grid {grid}")
    _check_aliasing(a)
    A = _x_spectrum(a)
    K = _difference_index(a.grid)
    cols = np.arange(a.grid.size)
    M = 0.5 * (A[K, cols[None, :]] + A[K, cols[:, None]])
    herm = a.real or bool(np.all(np.isreal(a.samples)))
    if herm:
        M = 0.5 * (M + M.conj().T)
    return PseudoOp(a.grid, M, hermitian=herm)


def kn_symbol(op):
    """Kohn-Nirenberg symbol samples of a dense operator (exact inverse of ``Op_KN``)."""
    grid = op.grid
    K = _difference_index(grid)
    cols = np.arange(grid.size)
    A = np.zeros((grid.size, grid.size), dtype=complex)
    A[K, cols[None, :]] = op.matrix
    A = A.reshape(grid.shape * 2)
    return np.fft.ifftn(A, axes=tuple(range(grid.d)), norm="forward")


def operator_norm(op, steps=50, tol=1e-8, method="power"):
    """Largest singular value.

    ``method="power"`` runs power iteration on ``M^* M`` from a seeded start
    (a lower bound if it has not converged); ``"svd"`` is exact.
    """
    M = op.matrix if isinstance(op, PseudoOp) else np.asarray(op)
    if method == "svd":
        return float(np.linalg.norm(M, 2))
    rng = np.random.default_rng(0)
    v = rng.standard_normal(M.shape[1]) + 1j * rng.standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(steps):
        w = M.conj().T @ (M @ v)
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return math.sqrt(lam)


_FD1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0


def _fd_xi(f, axis, step):
    """Fourth-order centered first derivative along a bounded axis (drops 2 per edge)."""
    n = f.shape[axis]
    out = 0
    for w, s in zip(_FD1, range(-2, 3)):
        if w == 0.0:
            continue
        sl = [slice(None)] * f.ndim
        sl[axis] = slice(2 + s, n - 2 + s)
        out = out + w * f[tuple(sl)]
    return out / step


def seminorm_probe(a, alpha, beta):
    """``max |d_x^alpha d_xi^beta a|`` over the grid.

    x-derivatives are spectral, xi-derivatives fourth-order finite differences
    on the interior of the frequency window.
    """
    d = a.grid.d
    alpha = tuple(alpha) + (0,) * (d - len(alpha))
    beta = tuple(beta) + (0,) * (d - len(beta))
    if len(alpha) != d or len(beta) != d or min(alpha + beta) < 0:
        raise ValueError("multi-indices must have d non-negative entries")
    if sum(alpha) + sum(beta) > 4:
        raise ValueError("derivative order above 4 is below the spectral-differentiation noise floor")
    f = np.fft.fftshift(np.asarray(a.samples, dtype=complex), axes=tuple(range(d, 2 * d)))
    if sum(alpha):
        F = np.fft.fftn(f, axes=tuple(range(d)))
        for i, ai in enumerate(alpha):
            if ai:
                k = 1j * a.grid.k0 * a.grid.freq_axis().astype(float)
                if a.grid.N % 2 == 0 and ai % 2 == 1:
                    k[a.grid.N // 2] = 0.0
                shape = [1] * (2 * d)
                shape[i] = a.grid.N
                F = F * (k**ai).reshape(shape)
        f = np.fft.ifftn(F, axes=tuple(range(d)))
    for i, bi in enumerate(beta):
        for _ in range(bi):
            f = _fd_xi(f, d + i, a.grid.dxi)
    if f.size == 0:
        raise ValueError("frequency window too small for the requested xi-derivatives")
    return float(np.max(np.abs(f)))


def _probe_gradient_max(phi, amp, L, d, n=256):
    ax = np.arange(n) * (L / n)
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    p = phi(*mesh)
    mask = np.abs(amp(*mesh)) > 0
    if not mask.any():
        return None
    grads = np.gradient(p, L / n) if d > 1 else [np.gradient(p, L / n)]
    g = np.sqrt(sum(gi**2 for gi in grads))
    return float(g[mask].max())


def oscillatory_integral(a, phi, h, L=2 * np.pi, d=1, n=None):
    """Periodic trapezoidal quadrature of ``int a(x) exp(i phi(x)/h) dx`` over ``[0, L)^d``.

    ``a`` must vanish near the boundary of the box. Without ``n`` the rule
    uses four times the Nyquist rate of the phase (and at least 256 points
    per axis).
    """
    gmax = _probe_gradient_max(phi, a, L, d)
    if gmax is None:
        return 0j
    required = 4 * gmax * L / (np.pi * h)
    if n is None:
        n = max(256, 1 << int(math.ceil(math.log2(max(required, 1.0)))))
    elif n < required / 4:
        raise ValueError(
            f"under-resolved phase: |grad phi|/h = {gmax / h:.4g} exceeds the Nyquist rate of {n} points"
        )
    ax = np.arange(n) * (L / n)
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    vals = a(*mesh) * np.exp(1j * phi(*mesh) / h)
    return complex(np.sum(vals) * (L / n) ** d)


def decay_fit(a, phi, hs, L=2 * np.pi, d=1):
    """Fit ``|I(h)| ~ C h^p`` over a ladder; returns the fit plus raw values."""
    hs = np.asarray(hs, dtype=float)
    vals = np.array([abs(oscillatory_integral(a, phi, h, L=L, d=d)) for h in hs])
    fit = loglog_fit(hs, vals)
    fit["values"] = vals.tolist()
    fit["hs"] = hs.tolist()
    return fit


def _mixed_second(psi_gen, x, xi, eps=1e-5):
    return (
        psi_gen(x + eps, xi + eps) - psi_gen(x + eps, xi - eps) - psi_gen(x - eps, xi + eps) + psi_gen(x - eps, xi - eps)
    ) / (4 * eps * eps)


def apply_fio(u, psi_gen, h, alpha=None, oversample=4):
    """Apply the local h-FIO with generating function ``psi_gen(x1, xi0)`` (d = 1).

    ``Tu(x1) = (2 pi h)^-1 iint exp(i(psi(x1, xi0) - x0 xi0)/h) alpha(x1, xi0) u(x0) dx0 dxi0``
    is evaluated by direct double quadrature: ``x0`` on an ``oversample``-times
    refined grid (trigonometric interpolation of ``u``), ``xi0`` on the
    covector lattice. ``alpha=None`` takes ``|d^2 psi / dx dxi|^(1/2)``.
    """
    grid = u.grid
    if grid.d != 1:
        raise ValueError("apply_fio supports d = 1 only")
    N, L = grid.N, grid.L
    x1 = grid.axis()
    n = grid.freq_axis()
    xi0 = h * grid.k0 * n
    X1, XI = np.meshgrid(x1, xi0, indexing="ij")
    det = _mixed_second(psi_gen, X1, XI)
    if np.min(np.abs(det)) < 1e-6:
        i, j = np.unravel_index(np.argmin(np.abs(det)), det.shape)
        raise ValueError(
            f"graph condition violated: |d2 psi/dx dxi| = {abs(det[i, j]):.3g} at x1={x1[i]:.4g}, xi0={xi0[j]:.4g}"
        )
    amp = np.sqrt(np.abs(det)) if alpha is None else alpha(X1, XI)
    M = oversample * N
    c = np.fft.fft(u.values, norm="forward")
    fine = np.zeros(M, dtype=complex)
    fine[n % M] = c
    u_fine = np.fft.ifft(fine, norm="forward")
    x0 = np.arange(M) * (L / M)
    # inner x0 quadrature, then the xi0 sum
    inner = np.exp(-1j * np.outer(xi0, x0) / h) @ u_fine * (L / M)
    K = np.exp(1j * psi_gen(X1, XI) / h) * amp
    out = K @ inner * (grid.dxi / (2 * np.pi * h))
    return WaveFunction(grid, out)


def fio_lagrangian_prediction(psi_gen, phi0, dphi0, ddphi0, a, x1, newton_steps=50):
    """Leading term ``b0 exp(i phi1/h)`` of an FIO acting on ``a exp(i phi0/h)`` (d = 1).

    Returns ``(phi1, b0_modulus, x0)`` at the points ``x1`` with the standard
    amplitude choice, where ``x0 = g(x1)`` solves ``x0 = d_xi psi(x1, phi0'(x0))``.
    """
    eps = 1e-6
    x1 = np.asarray(x1, dtype=float)

    def d_xi(x, xi):
        return (psi_gen(x, xi + eps) - psi_gen(x, xi - eps)) / (2 * eps)

    def d_xixi(x, xi):
        return (psi_gen(x, xi + eps) - 2 * psi_gen(x, xi) + psi_gen(x, xi - eps)) / eps**2

    x0 = x1.copy()
    for _ in range(newton_steps):
        xi = dphi0(x0)
        F = x0 - d_xi(x1, xi)
        dF = 1 - d_xixi(x1, xi) * ddphi0(x0)
        step = F / dF
        x0 = x0 - step
        if np.max(np.abs(step)) < 1e-13:
            break
    xi0 = dphi0(x0)
    phi1 = psi_gen(x1, xi0) - x0 * xi0 + phi0(x0)
    mixed = _mixed_second(psi_gen, x1, xi0)
    dg = mixed / (1 - d_xixi(x1, xi0) * ddphi0(x0))
    b0 = np.sqrt(np.abs(dg)) * np.abs(a(x0))
    return phi1, b0, x0


def symbol_from_descriptor(grid, desc):
    """Build a :class:`Symbol` from a JSON-style descriptor.

    Families: ``bump`` (``x0``, ``xi0``, ``radius``, optional ``beta`` to use
    radius ``h**beta``), ``plane`` (affine ``v.xi + c``) and
    ``metric-kinetic`` (``|xi|_g^2 / 2`` for a built-in metric). A
    ``samples`` key instead loads a raw sample file.
    """
    if isinstance(desc, (str, Path)):
        desc = json.loads(Path(desc).read_text())
    if "samples" in desc:
        return load_symbol_samples(desc["samples"], grid=grid)
    family = desc.get("family")
    if family == "bump":
        from .randsymbol import plateau_bump

        radius = grid.h ** desc["beta"] if "beta" in desc else desc.get("radius", 1.0)
        x0 = np.broadcast_to(np.asarray(desc.get("x0", 0.0), float), (grid.d,))
        xi0 = np.broadcast_to(np.asarray(desc.get("xi0", 0.0), float), (grid.d,))
        eta = desc.get("beta", 0.0)

        def f(x, xi):
            r2 = 0
            for i in range(grid.d):
                dx = np.mod(x[i] - x0[i] + grid.L / 2, grid.L) - grid.L / 2
                r2 = r2 + dx**2 + (xi[i] - xi0[i]) ** 2
            return desc.get("amplitude", 1.0) * plateau_bump(np.sqrt(r2) / radius)

        return Symbol.from_function(grid, f, order=COMPACT, eta=eta, real=True)
    if family == "plane":
        v = np.broadcast_to(np.asarray(desc.get("v", 1.0), float), (grid.d,))
        c = float(desc.get("c", 0.0))
        return Symbol.from_function(grid, lambda x, xi: c + sum(v[i] * xi[i] for i in range(grid.d)), order=1.0, real=True)
    if family == "metric-kinetic":
        from .hamflow import metric_family

        metric = metric_family(desc.get("metric", "flat"), grid.d, **desc.get("params", {}))
        return Symbol.from_function(grid, lambda x, xi: metric.kinetic(x, xi), order=2.0, real=True)
    raise ValueError(f"unknown symbol family {family!r}")


def save_symbol_samples(a, path):
    path = Path(path)
    header = dict(a.grid.to_dict(), dtype="<c8", kind="symbol", order=a.order, eta=a.eta, real=a.real)
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True))
    np.asarray(a.samples, dtype=complex).reshape(-1).astype("<c8").tofile(path.with_suffix(".bin"))


def load_symbol_samples(path, grid=None):
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    g = GridSpec(d=header["d"], N=header["N"], h=header["h"], L=header["L"])
    if grid is not None and grid != g:
        raise ValueError(f"sample file grid {g} does not match {grid}")
    data = np.fromfile(path.with_suffix(".bin"), dtype="<c8").astype(complex)
    if data.size != g.size**2:
        raise ValueError(f"expected {g.size ** 2} samples, found {data.size}")
    return Symbol(
        g,
        data.reshape(g.shape * 2),
        order=header.get("order", 0.0),
        eta=header.get("eta", 0.0),
        real=header.get("real", False),
    )
