"""Quantum propagation ``U(t) = exp(-i t P / h)`` and Egorov diagnostics.

Operators live in the unitary Fourier basis of :mod:`semitorus.pdo`. The
conjugated Laplacian follows ``P~ = U(t) (-h^2 Lap) U(-t)``; with
``P = -h^2 Lap / 2 + delta Q`` on the flat torus this gives the exact
identity ``P~ - (-h^2 Lap) = 2 delta (Q - U(t) Q U(-t))``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.ndimage import map_coordinates
from scipy.sparse.linalg import eigsh, expm_multiply
from scipy.special import jv

from .fitting import loglog_fit
from .hamflow import HamiltonianSpec, flow
from .pdo import COMPACT, _check_aliasing, PseudoOp, Symbol, kn_symbol, operator_norm, phase_mesh, quantize, to_fourier, to_position
from .phasegrid import WaveFunction

__all__ = [
    "Propagator",
    "build_propagator",
    "hamiltonian_symbol",
    "hamiltonian_operator",
    "laplacian_operator",
    "ConjugatedOperator",
    "conjugate_laplacian",
    "sobolev_constant",
    "transported_symbol",
    "egorov_residual",
    "egorov_recursion_terms",
    "egorov_ladder",
]


@dataclass(frozen=True)
class Propagator:
    """Spectral propagator of a Hermitian :class:`PseudoOp`.

    With ``method="eigh"`` the dense eigendecomposition is cached; with
    ``"krylov"`` (``expm_multiply``) or ``"chebyshev"`` only single states are
    propagated, which is what large d = 2 grids can afford.
    """

    hamiltonian: PseudoOp
    eigenvalues: np.ndarray = field(default=None, repr=False)
    vectors: np.ndarray = field(default=None, repr=False)
    method: str = "eigh"
    bounds: tuple = None

    @property
    def grid(self):
        return self.hamiltonian.grid

    @property
    def h(self):
        return self.grid.h

    def _need_eigen(self):
        if self.vectors is None:
            raise ValueError("this propagator has no eigendecomposition (built with method='krylov')")

    def matrix(self, t):
        """``U(t)`` as a dense matrix in the Fourier basis."""
        self._need_eigen()
        V = self.vectors
        return (V * np.exp(-1j * t * self.eigenvalues / self.h)) @ V.conj().T

    def apply_coords(self, t, c):
        c = np.asarray(c, dtype=complex)
        if self.method == "chebyshev":
            return _chebyshev_expm(self.hamiltonian.matrix, c, t / self.h, self.bounds)
        if self.vectors is None:
            return expm_multiply((-1j * t / self.h) * self.hamiltonian.matrix, c)
        V = self.vectors
        return V @ (np.exp(-1j * t * self.eigenvalues / self.h) * (V.conj().T @ c))

    def apply(self, t, psi):
        out = self.apply_coords(t, to_fourier(psi))
        return WaveFunction(self.grid, to_position(self.grid, out))

    def reconstruction_error(self):
        self._need_eigen()
        H = self.hamiltonian.matrix
        V = self.vectors
        rec = (V * self.eigenvalues) @ V.conj().T
        return float(np.linalg.norm(rec - H) / max(np.linalg.norm(H), 1e-300))

    def unitarity_error(self):
        self._need_eigen()
        V = self.vectors
        return float(np.linalg.norm(V.conj().T @ V - np.eye(len(V)), 2))


def build_propagator(H, method="eigh"):
    if not H.hermitian:
        raise ValueError("propagator needs a Hermitian generator")
    if method == "krylov":
        return Propagator(H, method="krylov")
    if method == "chebyshev":
        return Propagator(H, method="chebyshev", bounds=_spectral_bounds(H.matrix))
    if method != "eigh":
        raise ValueError(f"unknown propagation method {method!r}")
    w, V = np.linalg.eigh(H.matrix)
    return Propagator(H, w, V, "eigh")


def _spectral_bounds(A):
    """Lanczos estimates of the extreme eigenvalues, widened by a safety margin."""
    # fixed start vector: ARPACK otherwise seeds itself randomly and reports stop being reproducible
    v0 = np.cos(np.arange(A.shape[0]) + 0.5).astype(A.dtype)
    k = dict(k=1, return_eigenvectors=False, tol=1e-10, v0=v0)
    lo = float(eigsh(A, which="SA", **k)[0])
    hi = float(eigsh(A, which="LA", **k)[0])
    pad = 1e-3 * (hi - lo) + 1e-9
    return lo - pad, hi + pad


def _chebyshev_expm(A, v, tau, bounds, tol=1e-14):
    """``exp(-i tau A) v`` for Hermitian ``A`` with spectrum inside ``bounds``.

    Chebyshev expansion on the rescaled spectrum; the coefficients are
    ``(2 - [k=0]) (-i)^k J_k(tau * half_width)``.
    """
    lo, hi = bounds
    c, r = 0.5 * (hi + lo), 0.5 * (hi - lo)
    z = tau * r
    nterms = int(z + 10 * np.log10(z + 10) + 30)
    coef = jv(np.arange(nterms), z) * (-1j) ** np.arange(nterms)
    coef[1:] *= 2
    # truncate once the Bessel tail is negligible
    tail = np.flatnonzero(np.abs(coef) > tol)
    nterms = int(tail[-1]) + 1 if len(tail) else 1

    def B(x):
        return (A @ x - c * x) / r

    t0, t1 = v, B(v)
    out = coef[0] * t0 + (coef[1] * t1 if nterms > 1 else 0)
    for k in range(2, nterms):
        t0, t1 = t1, 2 * B(t1) - t0
        out = out + coef[k] * t1
    return np.exp(-1j * tau * c) * out


def hamiltonian_symbol(grid, metric, delta=0.0, perturbation=None):
    """Samples of ``p = c(x)|xi|^2 / 2 + delta q`` as a real :class:`Symbol`."""
    x, xi = phase_mesh(grid)
    s = np.broadcast_to(metric.kinetic(x, xi), grid.shape * 2).astype(float)
    if delta and perturbation is not None:
        s = s + delta * perturbation.sample(grid)
    return Symbol(grid, s, order=2.0, eta=getattr(getattr(perturbation, "covering", None), "beta", 0.0), real=True)


def hamiltonian_operator(grid, metric, delta=0.0, perturbation=None):
    """Quantized ``P_h^delta``; the perturbation is checked for aliasing separately."""
    if delta and perturbation is not None:
        _check_aliasing(perturbation.to_symbol(grid))  # gate on the compact part
    return quantize(hamiltonian_symbol(grid, metric, delta, perturbation))


def laplacian_operator(grid):
    """``-h^2 Lap`` as a Fourier multiplier, ``|xi|^2`` on the lattice."""
    xi2 = sum(v**2 for v in grid.xi_mesh())
    return PseudoOp.fourier_multiplier(grid, xi2.reshape(-1), hermitian=True)


@dataclass(frozen=True)
class ConjugatedOperator:
    base: PseudoOp
    t: float
    result: PseudoOp

    def spectrum_error(self):
        a = np.sort(np.linalg.eigvalsh(self.result.matrix))
        b = np.sort(np.real(np.diag(self.base.matrix)))
        return float(np.max(np.abs(a - b)))

    def difference_norm(self):
        return operator_norm(self.result - self.base, method="svd")


def conjugate_laplacian(prop, t):
    """``U(t) (-h^2 Lap) U(-t)``, unitarily equivalent to ``-h^2 Lap``."""
    base = laplacian_operator(prop.grid)
    U = prop.matrix(t)
    M = U @ base.matrix @ U.conj().T
    M = 0.5 * (M + M.conj().T)
    return ConjugatedOperator(base, t, PseudoOp(prop.grid, M, hermitian=True))


def sobolev_constant(prop, t, s):
    """``|| W^s U(t) W^-s ||`` with ``W = (1 + |xi|^2)^(1/2)``."""
    xi2 = sum(v**2 for v in prop.grid.xi_mesh()).reshape(-1)
    w = (1 + xi2) ** (s / 2)
    U = prop.matrix(t)
    return float(np.linalg.norm((w[:, None] * U) / w[None, :], 2))


def _phase_points(grid, mask=None):
    x, xi = phase_mesh(grid)
    X = np.stack([np.broadcast_to(v, grid.shape * 2) for v in x], axis=-1).reshape(-1, grid.d)
    XI = np.stack([np.broadcast_to(v, grid.shape * 2) for v in xi], axis=-1).reshape(-1, grid.d)
    if mask is not None:
        m = mask.reshape(-1)
        return X[m], XI[m], np.flatnonzero(m)
    return X, XI, np.arange(len(X))


def _energy_mask(grid, spec, a_support_energy, margin):
    """Phase points that can reach the support of ``a`` (energy is conserved)."""
    x, xi = phase_mesh(grid)
    kin = np.broadcast_to(spec.metric.kinetic(x, xi), grid.shape * 2)
    lo, hi = a_support_energy
    return (kin >= lo - margin) & (kin <= hi + margin)


def _support_energy(grid, spec, a):
    x, xi = phase_mesh(grid)
    vals = np.broadcast_to(a(x, xi), grid.shape * 2)
    kin = np.broadcast_to(spec.metric.kinetic(x, xi), grid.shape * 2)
    sup = np.abs(vals) > 0
    if not sup.any():
        return None
    return float(kin[sup].min()), float(kin[sup].max())


def _energy_margin(grid, spec):
    if not spec.perturbed:
        return 1e-9
    q = spec.perturbation.sample(grid) if hasattr(spec.perturbation, "sample") else None
    qmax = float(np.max(np.abs(q))) if q is not None else 1.0
    return 2 * abs(spec.delta) * qmax + 1e-9


def transported_symbol(grid, a, spec, t, step):
    """Samples of ``a o Phi^t`` on the phase grid (forward flow of grid points)."""
    out = np.zeros(grid.shape * 2)
    band = _support_energy(grid, spec, a)
    if band is None:
        return out
    mask = _energy_mask(grid, spec, band, _energy_margin(grid, spec))
    X, XI, idx = _phase_points(grid, mask)
    xe, xie = flow(spec, (X, XI), t, step, store=False).end
    vals = a([xe[:, i] for i in range(grid.d)], [xie[:, i] for i in range(grid.d)])
    out.reshape(-1)[idx] = vals
    return out


def egorov_residual(prop, a, t, spec, step, return_ops=False):
    """``|| U(-t) Op(a) U(t) - Op(a o Phi^t) ||`` in operator norm.

    ``a`` is an analytic symbol ``a(x, xi)`` taking lists of component arrays.
    """
    grid = prop.grid
    A = quantize(Symbol.from_function(grid, a, order=COMPACT, real=True))
    U = prop.matrix(t)
    heis = U.conj().T @ A.matrix @ U
    ref = quantize(Symbol(grid, transported_symbol(grid, a, spec, t, step), order=COMPACT, real=True))
    res = operator_norm(heis - ref.matrix, method="svd")
    if return_ops:
        return res, heis, ref.matrix
    return res


def _gradient_fd(a, X, XI, d, eps=1e-6):
    gx, gxi = [], []
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        f = lambda P, Q: a([P[:, k] for k in range(d)], [Q[:, k] for k in range(d)])
        gx.append((f(X + e, XI) - f(X - e, XI)) / (2 * eps))
        gxi.append((f(X, XI + e) - f(X, XI - e)) / (2 * eps))
    return np.stack(gx, 1), np.stack(gxi, 1)


def _interp_symbol(grid, samples, X, XI):
    """Cubic-spline periodic interpolation of a phase-grid array at points."""
    d, N = grid.d, grid.N
    shifted = np.fft.fftshift(samples, axes=tuple(range(d, 2 * d)))
    coords = [X[:, i] / grid.dx for i in range(d)]
    coords += [XI[:, i] / grid.dxi + N // 2 for i in range(d)]
    coords = np.array(coords)
    re = map_coordinates(np.real(shifted), coords, order=3, mode="grid-wrap")
    im = map_coordinates(np.imag(shifted), coords, order=3, mode="grid-wrap")
    return re + 1j * im


def egorov_recursion_terms(prop, a, t, spec, step, order=1, nodes=9):
    """Transported symbol ``b0 = a o Phi^t`` and, for ``order = 1``, the correction.

    With ``E0(s) = Op({p, a^s}) - (i/h)[P, Op(a^s)]`` and ``e0(s)`` its
    Kohn-Nirenberg symbol, the correction operator is
    ``C1 = -int_0^t Op_KN(e0(s) o Phi^(t-s)) ds`` (Simpson on ``nodes``
    points). Returns ``{"b0", "C1", "c1_sup", "e0_sup"}``.
    """
    if order not in (0, 1):
        raise ValueError("recursion order must be 0 or 1")
    grid = prop.grid
    h, d = grid.h, grid.d
    b0 = transported_symbol(grid, a, spec, t, step)
    out = {"b0": b0}
    if order == 0:
        return out
    if nodes % 2 == 0 or nodes < 3:
        raise ValueError("Simpson quadrature needs an odd number of nodes >= 3")
    ds = t / (nodes - 1)
    if ds > 0.5:
        raise ValueError(f"quadrature under-resolution: node spacing {ds:.3g} > 0.5")
    band = _support_energy(grid, spec, a)
    mask = _energy_mask(grid, spec, band, _energy_margin(grid, spec))
    X, XI, idx = _phase_points(grid, mask)
    # one integration with snapshots at the Simpson nodes
    snaps = [(X, XI)]
    cur = (X, XI)
    for _ in range(nodes - 1):
        cur = flow(spec, cur, ds, step, store=False).end
        snaps.append(cur)
    P = prop.hamiltonian.matrix
    E_syms = []
    for k in range(nodes):
        Xs, XIs = snaps[k]
        xs, xis = [Xs[:, i] for i in range(d)], [XIs[:, i] for i in range(d)]
        a_s = np.zeros(grid.size**2)
        a_s[idx] = a(xs, xis)
        gx, gxi = _gradient_fd(a, Xs, XIs, d)
        f = spec.rhs(np.hstack([Xs, XIs]))
        pb = np.zeros(grid.size**2)
        pb[idx] = np.sum(f[:, :d] * gx + f[:, d:] * gxi, axis=1)  # H_p a at Phi^s
        B = quantize(Symbol(grid, a_s.reshape(grid.shape * 2), order=COMPACT, real=True)).matrix
        Pb = quantize(Symbol(grid, pb.reshape(grid.shape * 2), order=COMPACT, real=True)).matrix
        E = Pb - (1j / h) * (P @ B - B @ P)
        E_syms.append(kn_symbol(PseudoOp(grid, E)))
    pulled = []
    for k in range(nodes):
        # Phi^(t - s_k) = Phi^(s_(n-1-k)) on symmetric nodes
        Xp, XIp = snaps[nodes - 1 - k]
        vals = np.zeros(grid.size**2, dtype=complex)
        vals[idx] = _interp_symbol(grid, E_syms[k], Xp, XIp)
        pulled.append(vals.reshape(grid.shape * 2))
    c1 = -simpson(np.stack(pulled), dx=ds, axis=0)
    from .pdo import _difference_index, _x_spectrum

    K = _difference_index(grid)
    A = _x_spectrum(Symbol(grid, c1))
    C1 = A[K, np.arange(grid.size)[None, :]]
    C1 = 0.5 * (C1 + C1.conj().T)
    out.update(
        C1=C1,
        c1_sup=float(np.max(np.abs(c1))),
        e0_sup=float(max(np.max(np.abs(e)) for e in E_syms)),
    )
    return out


def egorov_ladder(hs, N, beta, delta_of_h, t=1.0, mu=(0.81, 1.21), metric=None, seed=0, density="raised-cosine",
                  order=0, a_center=None, d=1, width=(2.0, 0.5), cut=6.5):
    """Egorov residuals over an h-ladder with the model ``P = |xi|^2/2 + delta q_omega``.

    The test symbol is a Gaussian with widths ``width[0] * h**beta`` in x and
    ``width[1] * h**beta`` in xi, centred on the shell and truncated at ``cut``
    standard deviations (mesoscopic, numerically compact). Returns per-h
    residuals and the log-log fit. The xi-width is reduced, uniformly over the
    ladder, when the truncated Gaussian would leave the inner three quarters
    of the smallest frequency window.
    """
    from .hamflow import metric_family
    from .phasegrid import GridSpec
    from .randsymbol import RandomSymbol, build_covering, draw_omega

    if np.isscalar(width):
        width = (width, width)
    xi_c = np.sqrt(0.5 * (mu[0] + mu[1])) if a_center is None else float(np.max(np.abs(a_center[1])))
    h_min = min(hs)
    room = 0.74 * GridSpec(d, N, h_min).xi_max - xi_c
    width = (width[0], min(width[1], room / (cut * h_min**beta)))

    metric = metric or metric_family("flat", d)
    rows = []
    for h in hs:
        grid = GridSpec(d, N, h)
        cov = build_covering(mu[0], mu[1], beta, h, grid)
        rs = RandomSymbol(cov, draw_omega(cov, seed, density))
        delta = float(delta_of_h(h))
        spec = HamiltonianSpec(metric, delta, rs, xi_window=grid.xi_max)
        H = hamiltonian_operator(grid, metric, delta, rs)
        prop = build_propagator(H)
        r = h**beta
        x0 = np.full(d, np.pi) if a_center is None else np.asarray(a_center[0], float)
        xi0 = np.zeros(d) if a_center is None else np.asarray(a_center[1], float)
        if a_center is None:
            xi0[0] = np.sqrt(0.5 * (mu[0] + mu[1]))
        sx, sxi = width[0] * r, width[1] * r
        L = grid.L

        def a(x, xi, x0=x0, xi0=xi0):
            r2 = 0
            for i in range(d):
                dx = np.mod(x[i] - x0[i] + L / 2, L) - L / 2
                r2 = r2 + (dx / sx) ** 2 + ((xi[i] - xi0[i]) / sxi) ** 2
            # truncated so the energy band of the mask stays narrow
            return np.where(r2 < cut**2, np.exp(-0.5 * r2), 0.0)

        step = r / 10
        res0, heis, ref = egorov_residual(prop, a, t, spec, step, return_ops=True)
        row = {"h": h, "delta": delta, "residual": res0, "n_centers": cov.size}
        if order == 1:
            terms = egorov_recursion_terms(prop, a, t, spec, step, order=1)
            row["residual_order1"] = operator_norm(heis - ref - terms["C1"], method="svd")
            row["c1_sup"] = terms["c1_sup"]
        rows.append(row)
    fit = loglog_fit([r["h"] for r in rows], [r["residual"] for r in rows])
    out = {"ladder": rows, "exponent_fit": fit["slope"], "intercept": fit["intercept"], "r2": fit["r2"],
           "beta": beta, "t": t, "norm": "operator (L2)", "width": list(width), "cut": cut, "mu": list(mu)}
    if order == 1:
        f1 = loglog_fit([r["h"] for r in rows], [r["c1_sup"] for r in rows])
        out["c1_exponent"] = f1["slope"]
    return out
