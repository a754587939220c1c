"""Fourier-band decomposition of shell eigenmodes into separated Lagrangian states.

On the torus the normal form is a frequency-frame rotation: each lattice
frequency ``n`` is assigned to the sector of its dominant axis, the radial
coordinate ``|n|`` plays the role of ``n_1`` and the remaining component is the
transverse coordinate ``n'``. Plane waves ``exp(i k0 n.x)`` are the Lagrangian
states ``phi(x) = h k0 n.x``.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.integrate import simpson
from scipy.spatial import cKDTree

from .hamflow import HamiltonianSpec, distortion, flow, tangent_flow
from .phasegrid import GridSpec, WaveFunction, fft_forward, fft_inverse

MONO_TOL = 1e-6


class CausticError(RuntimeError):
    """The projection of the propagated sheet to ``x`` degenerated."""


@dataclass(frozen=True)
class LagrangianSheet:
    """A lambda-monochromatic Lagrangian state ``amplitude * exp(i phi / h)``.

    ``patch`` holds the sample points (shape ``(M, d)``, possibly lifted off
    the fundamental domain), ``grad`` the covector ``d phi`` there. ``model``
    optionally carries analytic callables ``phi``, ``grad``, ``hess``, ``amp``
    used by :func:`wkb_propagate`.
    """

    patch: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    amplitude: np.ndarray = field(repr=False)
    grad: np.ndarray = field(repr=False)
    lam: float
    meta: dict = field(default_factory=dict)
    model: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        patch = np.atleast_2d(np.asarray(self.patch, dtype=float))
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "grad", np.asarray(self.grad, dtype=float).reshape(patch.shape))
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float).reshape(len(patch)))
        object.__setattr__(self, "amplitude", np.asarray(self.amplitude, dtype=complex).reshape(len(patch)))

    @property
    def d(self):
        return self.patch.shape[1]

    def monochromatic_error(self):
        return float(np.max(np.abs(np.sum(self.grad**2, axis=1) - self.lam), initial=0.0))

    def values(self, h):
        return self.amplitude * np.exp(1j * self.phi / h)

    def to_dict(self):
        return {
            "patch": self.patch.tolist(),
            "phi": self.phi.tolist(),
            "amplitude_re": self.amplitude.real.tolist(),
            "amplitude_im": self.amplitude.imag.tolist(),
            "grad": self.grad.tolist(),
            "lambda": self.lam,
            "meta": self.meta,
        }


def _check_monochromatic(sheet, tol=MONO_TOL):
    err = sheet.monochromatic_error()
    if err > tol:
        raise ValueError(f"sheet is not monochromatic: max ||dphi|^2 - lambda| = {err:.3g}")


def plane_sheet(grid, n, h=None, amplitude=None, patch=None):
    """Frequency-level sheet ``xi = h k0 n`` with phase ``h k0 n.x``.

    ``amplitude`` is a callable on ``(M, d)`` points (default 1); ``patch``
    defaults to every grid point.
    """
    h = grid.h if h is None else h
    d = grid.d
    xi0 = h * grid.k0 * np.broadcast_to(np.asarray(n, dtype=float), (d,))
    amp = amplitude or (lambda y: np.ones(len(y)))
    if patch is None:
        patch = np.stack([m.ravel() for m in grid.mesh()], axis=1)
    patch = np.atleast_2d(np.asarray(patch, dtype=float))
    model = {
        "phi": lambda y: y @ xi0,
        "grad": lambda y: np.broadcast_to(xi0, y.shape).copy(),
        "hess": lambda y: np.zeros((len(y), d, d)),
        "amp": amp,
    }
    return LagrangianSheet(patch, model["phi"](patch), amp(patch), model["grad"](patch), float(xi0 @ xi0),
                           meta={"eta_hat": None, "distortion": 1.0, "C3_norm": 0.0}, model=model)


def radial_sheet(center, speed, amplitude, patch):
    """Expanding circular wavefront ``phi = speed |x - center|`` (``d = 2``).

    Monochromatic with ``lambda = speed**2``; used to exercise the amplitude
    Jacobian. The patch must avoid the centre.
    """
    c = np.asarray(center, dtype=float)
    patch = np.atleast_2d(np.asarray(patch, dtype=float))

    def grad(y):
        v = y - c
        return speed * v / np.linalg.norm(v, axis=1)[:, None]

    def hess(y):
        v = y - c
        r = np.linalg.norm(v, axis=1)
        u = v / r[:, None]
        d = y.shape[1]
        return speed * (np.eye(d)[None] - u[:, :, None] * u[:, None, :]) / r[:, None, None]

    if np.min(np.linalg.norm(patch - c, axis=1)) < 1e-8:
        raise ValueError("radial sheet patch contains its centre")
    model = {"phi": lambda y: speed * np.linalg.norm(y - c, axis=1), "grad": grad, "hess": hess, "amp": amplitude}
    return LagrangianSheet(patch, model["phi"](patch), amplitude(patch), grad(patch), float(speed**2),
                           meta={"eta_hat": None, "distortion": None, "C3_norm": None}, model=model)


# ---------------------------------------------------------------- decomposition


@dataclass(frozen=True)
class BandDecomposition:
    """Kept band coefficients of a cutoff state.

    ``freqs`` are the kept lattice frequencies ``(K, d)``; ``coeffs`` the
    matching Fourier coefficients (``psi = sum c_n exp(i k0 n.x)``).
    ``sector`` is ``(axis, sign)`` per kept term, ``n1sq`` the integer
    ``|n|**2`` and ``transverse`` the off-axis component (zero when ``d = 1``).
    """

    grid: GridSpec
    h: float
    mu_h: float
    epsilon: float
    freqs: np.ndarray = field(repr=False)
    coeffs: np.ndarray = field(repr=False)
    sector: np.ndarray = field(repr=False)
    n1sq: np.ndarray = field(repr=False)
    transverse: np.ndarray = field(repr=False)
    cut_coeffs: np.ndarray = field(repr=False)
    residual_norm: float
    normal_form_residual: float
    rho: float = math.inf

    @property
    def count(self):
        return len(self.coeffs)

    @property
    def count_constant(self):
        """``C`` in ``count <= C h^(-d+1-eps)``."""
        d = self.grid.d
        return self.count / self.h ** (-d + 1 - self.epsilon)

    def coeff_l2(self):
        return float(np.linalg.norm(self.coeffs))

    def kept_state(self):
        arr = np.zeros(self.grid.shape, dtype=complex)
        arr[tuple((self.freqs % self.grid.N).T)] = self.coeffs
        return fft_inverse(self.grid, arr)

    def cut_state(self):
        return fft_inverse(self.grid, self.cut_coeffs)

    def labels(self):
        """Distinct ``(axis, sign, |n|^2)`` labels: the kept ``n_1`` values."""
        rows = np.column_stack([self.sector, self.n1sq])
        return sorted({tuple(int(v) for v in r) for r in rows})

    def dump(self, path):
        """JSON class index plus a little-endian complex64 coefficient block."""
        path = Path(path)
        np.asarray(self.coeffs, dtype="<c8").tofile(path.with_suffix(".bin"))
        index = {
            "grid": self.grid.to_dict(),
            "h": self.h,
            "mu_h": self.mu_h,
            "epsilon": self.epsilon,
            "freqs": self.freqs.tolist(),
            "sector": self.sector.tolist(),
            "n1sq": self.n1sq.tolist(),
            "residual_norm": self.residual_norm,
            "coefficients": path.with_suffix(".bin").name,
        }
        path.with_suffix(".json").write_text(json.dumps(index, indent=1, sort_keys=True))


def _sector(n):
    """Dominant axis (first on ties) and its sign."""
    a = np.abs(n)
    axis = np.argmax(a, axis=1)
    sign = np.sign(n[np.arange(len(n)), axis]).astype(int)
    return axis, sign


def normal_form_residual(psi, mu_h, h=None, cutoff=None):
    """``||(|hD| - mu_h) psi_cut|| / ||psi_cut||`` in the rotated frame.

    In the sector frame ``hD_{x_1}`` acts as the radial frequency, so a
    shell eigenmode with ``|xi| = mu_h`` gives zero.
    """
    grid = psi.grid
    h = grid.h if h is None else h
    v = psi.values if cutoff is None else psi.values * cutoff
    c = np.fft.fftn(v, norm="forward")
    rad = h * grid.k0 * np.sqrt(sum(m**2 for m in grid.freq_mesh()))
    den = np.linalg.norm(c)
    if den == 0:
        return 0.0
    return float(np.linalg.norm((rad - mu_h) * c) / den)


def band_decompose(psi, mu_h, epsilon, cutoff=None, rho=math.inf, h=None, tol=1e-6, check_normal_form=True,
                   coeff_floor=1e-13):
    """Expand the cutoff state in the frequency band around the shell ``|xi| = mu_h``.

    The band keeps ``n`` with ``||n| - mu_h/(h k0)| < h**-epsilon`` and
    ``|n'| h k0 < rho``; coefficients below ``coeff_floor`` times the largest
    one are treated as absent.
    """
    grid = psi.grid
    h = grid.h if h is None else h
    d, N = grid.d, grid.N
    if mu_h <= 0:
        raise ValueError("mu_h must be positive")
    if cutoff is not None:
        cutoff = np.asarray(cutoff, dtype=float).reshape(grid.shape)
    vals = psi.values if cutoff is None else psi.values * cutoff
    cut = WaveFunction(grid, vals)
    nf = normal_form_residual(cut, mu_h, h)
    if check_normal_form and nf > tol:
        raise ValueError(f"not a normal-form quasi-eigenmode: residual {nf:.3g} > {tol:g}")
    radius = mu_h / (h * grid.k0)
    half = h ** (-epsilon)
    if radius + half >= N // 2:
        raise ValueError(f"band |n| < {radius + half:.4g} exceeds the grid window N/2 = {N // 2}")
    c = fft_forward(cut)
    n = np.stack([m.ravel() for m in grid.freq_mesh()], axis=1).astype(int)
    cf = c.ravel()
    absn = np.sqrt(np.sum(n**2, axis=1))
    axis, sign = _sector(n)
    if d == 2:
        trans = n[np.arange(len(n)), 1 - axis]
    else:
        trans = np.zeros(len(n), dtype=int)
    inband = (np.abs(absn - radius) < half) & (np.abs(trans) * h * grid.k0 < rho)
    floor = coeff_floor * (np.max(np.abs(cf)) if cf.size else 0.0)
    keep = inband & (np.abs(cf) > floor)
    dropped = ~keep
    residual = float(np.sqrt(grid.volume * np.sum(np.abs(cf[dropped]) ** 2)))
    return BandDecomposition(
        grid=grid, h=h, mu_h=mu_h, epsilon=epsilon,
        freqs=n[keep], coeffs=cf[keep], sector=np.column_stack([axis[keep], sign[keep]]),
        n1sq=np.sum(n[keep] ** 2, axis=1), transverse=trans[keep], cut_coeffs=c,
        residual_norm=residual, normal_form_residual=nf, rho=rho,
    )


def n_classes(h, gamma, epsilon):
    """``N_h = floor(h**(gamma - 1 - epsilon))``."""
    return int(math.floor(h ** (gamma - 1 - epsilon) + 1e-12))


@dataclass(frozen=True)
class ClassMap:
    """Partition of the kept band keyed by ``(axis, sign, |n|^2, m)``."""

    N_h: int
    gamma: float
    epsilon: float
    classes: dict = field(repr=False)

    @property
    def count(self):
        return len(self.classes)

    def nonempty(self):
        return {k: v for k, v in self.classes.items() if len(v)}


def group_classes(bd, gamma, epsilon=None):
    """Group kept terms by ``n_1`` label and transverse residue ``m = n' mod N_h``.

    Empty classes are included, so the count is ``labels * N_h**(d-1)``.
    """
    epsilon = bd.epsilon if epsilon is None else epsilon
    Nh = n_classes(bd.h, gamma, epsilon)
    if Nh < 1:
        raise ValueError(f"N_h = {Nh} < 1")
    d = bd.grid.d
    residues = range(Nh) if d == 2 else [0]
    classes = {}
    for lab in bd.labels():
        for m in residues:
            classes[lab + (m,)] = []
    for k in range(bd.count):
        m = int(bd.transverse[k] % Nh) if d == 2 else 0
        key = (int(bd.sector[k, 0]), int(bd.sector[k, 1]), int(bd.n1sq[k]), m)
        classes[key].append(k)
    classes = {k: np.array(v, dtype=int) for k, v in classes.items()}
    return ClassMap(Nh, gamma, epsilon, classes)


@dataclass(frozen=True)
class Superposition:
    """``g = sum_j s_j f_j`` over frequency-level sheets of one class."""

    key: tuple
    weights: np.ndarray = field(repr=False)
    freqs: np.ndarray = field(repr=False)
    gamma: float
    separation_certificate: float
    bounds: dict = field(default_factory=dict)

    @property
    def size(self):
        return len(self.weights)

    def sheets(self, grid, patch=None):
        return [(s, plane_sheet(grid, n, patch=patch)) for s, n in zip(self.weights, self.freqs)]

    def state(self, grid):
        arr = np.zeros(grid.shape, dtype=complex)
        arr[tuple((self.freqs % grid.N).T)] = self.weights
        return fft_inverse(grid, arr)


def _min_separation(freqs, scale):
    if len(freqs) < 2:
        return math.inf
    tree = cKDTree(freqs.astype(float))
    dist, _ = tree.query(freqs.astype(float), k=2)
    return float(scale * np.min(dist[:, 1]))


def classes_to_superpositions(bd, classmap):
    """One :class:`Superposition` per non-empty class, with its separation certificate.

    The certificate is the smallest ``|d phi_j - d phi_j'| = h k0 |n - n'|``
    inside the class; it must exceed ``h**gamma``.
    """
    grid, h = bd.grid, bd.h
    scale = h * grid.k0
    need = h**classmap.gamma
    out = []
    for key, idx in classmap.nonempty().items():
        freqs = bd.freqs[idx]
        sep = _min_separation(freqs, scale)
        if not sep > need:
            raise RuntimeError(f"class {key}: separation {sep:.4g} <= h^gamma = {need:.4g}")
        out.append(Superposition(
            key=key, weights=bd.coeffs[idx], freqs=freqs, gamma=classmap.gamma, separation_certificate=sep,
            bounds={"epsilon_sharp": bd.epsilon, "D": float(scale * np.max(np.abs(freqs)))},
        ))
    return out


def orthogonality_ratio(superpositions, psi):
    """``sum_i ||g_i||^2 / ||psi||^2`` via Parseval."""
    grid = psi.grid
    total = sum(grid.volume * float(np.sum(np.abs(s.weights) ** 2)) for s in superpositions)
    return total / psi.l2() ** 2


def reconstruction_residual(bd, superpositions):
    """``||psi_cut - sum_classes g||`` on the grid."""
    grid = bd.grid
    arr = np.zeros(grid.shape, dtype=complex)
    for s in superpositions:
        arr[tuple((s.freqs % grid.N).T)] += s.weights
    diff = bd.cut_state().values - fft_inverse(grid, arr).values
    return float(np.sqrt(np.sum(np.abs(diff) ** 2) * grid.cell_volume))


def shell_eigenmode(grid, K, phases=None):
    """``sum_{|n|^2 = K} e^{i theta_n} exp(i k0 n.x)`` and its frequencies."""
    r = int(math.isqrt(K)) + 1
    axes = [np.arange(-r, r + 1)] * grid.d
    n = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    n = n[np.sum(n**2, axis=1) == K]
    if len(n) == 0:
        raise ValueError(f"{K} is not a sum of {grid.d} squares")
    if np.max(np.abs(n)) >= grid.N // 2:
        raise ValueError("shell exceeds the grid window")
    theta = np.zeros(len(n)) if phases is None else np.asarray(phases, dtype=float)
    arr = np.zeros(grid.shape, dtype=complex)
    arr[tuple((n % grid.N).T)] = np.exp(1j * theta)
    return fft_inverse(grid, arr), n


# ---------------------------------------------------------------- WKB transport


def _lift_wrap(v, L):
    return np.mod(v + L / 2, L) - L / 2


def _shoot(spec, sheet, y, t, step):
    m = sheet.model
    frame = tangent_flow(spec, (y, m["grad"](y)), t, step)
    return frame


def _projection_dets(frame, hess, d):
    J = frame.jacobians
    A = J[:, :, :d, :d] + J[:, :, :d, d:] @ hess[None]
    return np.linalg.det(A)


def wkb_propagate(sheet, spec, t, step, targets=None, order=0, newton_tol=1e-11, max_newton=30):
    """Transport a monochromatic sheet by the characteristics of ``spec`` for time ``t``.

    Phase: ``S(x) = phi(y) + int_0^t (xi.dx/ds - p) ds`` with ``x = pi Phi^t(y, dphi(y))``.
    Amplitude: ``b0(x) = a(y) |det dx/dy|^(-1/2)``. With ``targets=None`` the
    result lives on the image of the patch; otherwise each target is reached
    by Newton shooting on ``y``. Only the leading order is implemented.
    """
    if order != 0:
        raise NotImplementedError("only the order-0 WKB amplitude is implemented")
    if sheet.model is None:
        raise ValueError("wkb_propagate needs an analytic sheet model")
    _check_monochromatic(sheet)
    d = sheet.d
    L = spec.metric.L
    m = sheet.model
    # plane sheets are globally defined on the torus; curved ones must stay local
    span = np.ptp(sheet.patch, axis=0)
    if len(sheet.patch) > 1 and np.max(span) >= L / 4 and not _is_plane(sheet):
        raise ValueError(f"patch diameter {np.max(span):.3g} not below L/4: wrap-around")
    if targets is None:
        y = sheet.patch.copy()
    else:
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        y = _newton_sources(spec, sheet, targets, t, step, newton_tol, max_newton)
    frame = _shoot(spec, sheet, y, t, step)
    base = frame.base
    H = m["hess"](y)
    A = frame.jacobians[:, :, :d, :d] + frame.jacobians[:, :, :d, d:] @ H[None]
    dets = np.linalg.det(A)
    bad = np.any(dets <= 0, axis=0)
    if np.any(bad):
        k = int(np.argmax(bad))
        s = int(np.argmax(dets[:, k] <= 0))
        raise CausticError(f"caustic: det dx/dy vanished at t={base.times[s]:.4g}, "
                           f"x={np.round(base.x_lift[s, k], 6).tolist()}")
    X, XI = base.x_lift, base.xi
    f = np.stack([spec.rhs(np.hstack([X[s], XI[s]])) for s in range(len(base.times))])
    lagr = np.sum(XI * f[:, :, :d], axis=2) - np.stack(
        [spec.energy(X[s], XI[s]) for s in range(len(base.times))])
    action = simpson(lagr, x=base.times, axis=0) if len(base.times) > 2 else 0.5 * t * (lagr[0] + lagr[-1])
    S = m["phi"](y) + action
    b0 = m["amp"](y) / np.sqrt(dets[-1])
    x_end = X[-1]
    lam = float(np.mean(np.sum(XI[-1] ** 2, axis=1)))
    meta = {"t": t, "sources": y.tolist() if len(y) <= 64 else None, "det_min": float(np.min(dets)),
            "amp_sup": float(np.max(np.abs(b0), initial=0.0)), "eta_hat": None, "C3_norm": None}
    if _is_plane(sheet):
        meta["distortion"] = 1.0
    elif len(y) >= 2:
        # intrinsic/ambient distortion of the source sheet, from its analytic gradient
        sub = np.unique(np.linspace(0, len(y) - 1, min(len(y), 48)).astype(int))
        meta["distortion"] = float(distortion(m["grad"], y[sub]))
    out = LagrangianSheet(x_end, S, b0, XI[-1], lam, meta=meta)
    out.meta["characteristics"] = {"times": base.times, "x": X, "xi": XI}
    return out


def _is_plane(sheet):
    return sheet.meta.get("C3_norm") == 0.0


def _newton_sources(spec, sheet, targets, t, step, tol, max_iter):
    d = sheet.d
    L = spec.metric.L
    m = sheet.model
    # free-flight guess from the sheet covector at the target
    y = targets - t * m["grad"](targets)
    for _ in range(max_iter):
        frame = _shoot(spec, sheet, y, t, step)
        x_end = frame.base.x_lift[-1]
        F = _lift_wrap(x_end - targets, L)
        err = np.max(np.abs(F))
        if err < tol:
            return y
        J = frame.jacobians[-1]
        A = J[:, :d, :d] + J[:, :d, d:] @ m["hess"](y)
        y = y - np.linalg.solve(A, F[:, :, None])[:, :, 0]
    raise RuntimeError(f"Newton shooting did not converge (residual {err:.3g})")


@dataclass(frozen=True)
class PhaseCorrection:
    """``phi_{t,delta} = phi_{t,0} - delta * int_0^t q(zeta^s) ds`` at the sheet points."""

    phase: np.ndarray = field(repr=False)
    correction: np.ndarray = field(repr=False)
    dependency: list = field(repr=False)
    K: object = field(repr=False)
    grad_shift: np.ndarray = field(repr=False)
    mode: str = "zeroth"
    step: float = 0.0


def _segment_hits(tree, nodes, radius, L, d, box_shift):
    """Covering indices whose ``radius``-ball meets the polyline through ``nodes``."""
    hits = set()
    for a, b in zip(nodes[:-1], nodes[1:]):
        dz = b - a
        mid = a + 0.5 * dz
        reach = radius + 0.5 * np.linalg.norm(dz)
        q = mid.copy()
        q[:d] = np.mod(q[:d], L)
        q[d:] += box_shift
        for j in tree.query_ball_point(q, reach):
            c = tree.data[j].copy()
            c[d:] -= box_shift
            w = c - a
            w[:d] = _lift_wrap(w[:d], L)
            den = float(dz @ dz)
            s = 0.0 if den == 0 else min(1.0, max(0.0, float(w @ dz) / den))
            if np.linalg.norm(w - s * dz) < radius:
                hits.add(j)
    return hits


def phase_integral(sheet_t, spec, t, mode="zeroth", step=None):
    """Random phase correction along backward characteristics of ``sheet_t``.

    ``mode="zeroth"`` follows the unperturbed flow from ``(x, dphi_{t,0}(x))``,
    ``mode="full"`` the perturbed one. Returns a :class:`PhaseCorrection` with
    the exact covering indices whose bump supports the trajectory entered.
    """
    if mode not in ("zeroth", "full"):
        raise ValueError("mode must be 'zeroth' or 'full'")
    x, xi = sheet_t.patch, sheet_t.grad
    M, d = x.shape
    delta, q = spec.delta, spec.perturbation
    if delta == 0 or q is None:
        z = np.zeros(M)
        return PhaseCorrection(sheet_t.phi.copy(), z, [np.zeros(0, dtype=int) for _ in range(M)], None,
                               np.zeros(M), mode, 0.0 if step is None else step)
    cov = getattr(q, "covering", None)
    r = cov.radius if cov is not None else None
    if step is None:
        step = r / 10 if r is not None else t / 64
    if r is not None and step > r / 10 * (1 + 1e-12):
        raise ValueError(f"quadrature under-resolution: step {step:.3g} > h^beta/10 = {r / 10:.3g}")
    base = spec if mode == "full" else HamiltonianSpec(spec.metric, 0.0, None, spec.xi_window)
    traj = flow(base, (x, xi), -t, step)
    # zeta(s) = Phi^(s - t)(x, dphi): backward time tau = s - t, reordered so s increases
    times = (traj.times + t)[::-1]
    Z = np.concatenate([traj.x_lift, traj.xi], axis=2)[::-1]
    ns = len(times)
    wts = simpson(np.eye(ns), x=times, axis=0) if ns > 2 else np.full(ns, 0.5 * t)
    if cov is None:
        vals = np.stack([q.evaluate(Z[s, :, :d], Z[s, :, d:]) for s in range(ns)])
        integral = wts @ vals
        grads = np.stack([q.evaluate(Z[s, :, :d], Z[s, :, d:], derivs=1)[1][:, :d] for s in range(ns)])
        gshift = delta * np.linalg.norm(np.tensordot(wts, grads, axes=1), axis=1)
        corr = -delta * integral
        return PhaseCorrection(sheet_t.phi + corr, corr, None, None, gshift, mode, step)
    from .randsymbol import _XI_SHIFT, _embed, _pairs, plateau_bump

    tree = cov._tree()
    flat = Z.reshape(ns * M, 2 * d)
    rows, cols = _pairs(tree, _embed(flat, d, cov.L), 2 * r)
    dz = flat[rows] - cov.centers[cols]
    dz[:, :d] = _lift_wrap(dz[:, :d], cov.L)
    chi = plateau_bump(np.sqrt(np.sum(dz**2, axis=1)) / r)
    s_idx, m_idx = np.divmod(rows, M)
    K = sparse.coo_matrix((wts[s_idx] * chi, (m_idx, cols)), shape=(M, cov.size)).tocsr()
    integral = K @ q.omega
    corr = -delta * integral
    dep = [np.array(sorted(_segment_hits(tree, Z[:, k], 2 * r, cov.L, d, _XI_SHIFT)), dtype=int)
           for k in range(M)]
    grads = np.stack([q.evaluate(Z[s, :, :d], Z[s, :, d:], derivs=1)[1][:, :d] for s in range(ns)])
    gshift = delta * np.linalg.norm(np.tensordot(wts, grads, axes=1), axis=1)
    return PhaseCorrection(sheet_t.phi + corr, corr, dep, K, gshift, mode, step)
