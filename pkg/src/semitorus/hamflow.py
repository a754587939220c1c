"""Hamiltonian flow of ``p = c(x)|xi|^2/2 + delta q(x, xi)`` and its tangent map.

The kinetic term comes from a conformally flat metric on the torus with
inverse metric ``c(x) I``; ``c = 1`` is the flat torus and the "warped"
family ``c = 1 + amp * sum_i cos(k0 x_i)`` gives positive finite-time
Lyapunov exponents in d = 2. All integrators are fixed-step RK4 so that
trajectories are reproducible bit for bit.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

__all__ = [
    "Metric",
    "metric_family",
    "HamiltonianSpec",
    "Trajectory",
    "TangentFrame",
    "flow",
    "tangent_flow",
    "instability_check",
    "distortion",
    "trajectory_to_csv",
    "frame_summary",
]


@dataclass(frozen=True)
class Metric:
    """Conformal metric with inverse ``c(x) I``, ``c = 1 + amp * sum cos(k0 x_i)``."""

    name: str
    d: int
    amp: float = 0.0
    L: float = 2 * np.pi

    def __post_init__(self):
        if self.d * abs(self.amp) >= 1:
            raise ValueError("warp amplitude too large: c(x) must stay positive")

    @property
    def k0(self):
        return 2 * np.pi / self.L

    def c(self, x):
        """``x`` is a sequence of ``d`` component arrays."""
        return 1.0 + self.amp * sum(np.cos(self.k0 * xi) for xi in x)

    def dc(self, x):
        return [-self.amp * self.k0 * np.sin(self.k0 * xi) for xi in x]

    def ddc(self, x):
        return [-self.amp * self.k0**2 * np.cos(self.k0 * xi) for xi in x]

    def kinetic(self, x, xi):
        return 0.5 * self.c(x) * sum(v**2 for v in xi)


def metric_family(name, d, amp=0.3, L=2 * np.pi):
    if name == "flat":
        return Metric("flat", d, 0.0, L)
    if name == "warped":
        return Metric("warped", d, float(amp), L)
    raise ValueError(f"unknown metric family {name!r}")


@dataclass(frozen=True)
class HamiltonianSpec:
    """``p_delta = kinetic + delta * q``.

    ``perturbation`` is any object with ``evaluate(x, xi, derivs)`` following
    :meth:`semitorus.randsymbol.RandomSymbol.evaluate`; ``xi_window`` is the
    largest covector component the sampled model resolves.
    """

    metric: Metric
    delta: float = 0.0
    perturbation: object = None
    xi_window: float = math.inf

    @property
    def d(self):
        return self.metric.d

    @property
    def perturbed(self):
        return self.delta != 0 and self.perturbation is not None

    def energy(self, x, xi):
        e = self.metric.kinetic(list(x.T), list(xi.T))
        if self.perturbed:
            e = e + self.delta * self.perturbation.evaluate(x, xi)
        return e

    def rhs(self, z, hessian=False):
        """``H_p`` at states ``z`` of shape ``(P, 2d)``; optionally the Hessian of ``p``."""
        d = self.d
        x, xi = z[:, :d], z[:, d:]
        xs, xis = list(x.T), list(xi.T)
        c = self.metric.c(xs)
        dc = np.stack(self.metric.dc(xs), axis=1)
        xi2 = np.sum(xi**2, axis=1)
        grad = np.hstack([0.5 * dc * xi2[:, None], c[:, None] * xi])
        if hessian:
            P = len(z)
            Hs = np.zeros((P, 2 * d, 2 * d))
            ddc = np.stack(self.metric.ddc(xs), axis=1)
            Hs[:, range(d), range(d)] = 0.5 * ddc * xi2[:, None]
            Hs[:, :d, d:] = dc[:, :, None] * xi[:, None, :]
            Hs[:, d:, :d] = np.transpose(Hs[:, :d, d:], (0, 2, 1))
            Hs[:, range(d, 2 * d), range(d, 2 * d)] = c[:, None]
        if self.perturbed:
            if hessian:
                _, g, H = self.perturbation.evaluate(x, xi, derivs=2)
                Hs = Hs + self.delta * H
            else:
                _, g = self.perturbation.evaluate(x, xi, derivs=1)
            grad = grad + self.delta * g
        f = np.hstack([grad[:, d:], -grad[:, :d]])
        if hessian:
            return f, Hs
        return f


@dataclass(frozen=True)
class Trajectory:
    """Flow samples; ``x_lift`` is unwrapped, ``x`` reduced modulo ``L``."""

    times: np.ndarray
    x_lift: np.ndarray = field(repr=False)
    xi: np.ndarray = field(repr=False)
    energy: np.ndarray = field(repr=False)
    L: float = 2 * np.pi

    @property
    def x(self):
        return np.mod(self.x_lift, self.L)

    @property
    def energy_drift(self):
        return float(np.max(np.abs(self.energy - self.energy[0]), initial=0.0))

    @property
    def end(self):
        return self.x_lift[-1], self.xi[-1]


@dataclass(frozen=True)
class TangentFrame:
    base: Trajectory
    jacobians: np.ndarray = field(repr=False)
    ftle: np.ndarray = field(repr=False)
    C0: float = 1.0

    def det_error(self):
        return float(np.max(np.abs(np.linalg.det(self.jacobians) - 1.0)))


def _as_points(rho0, d):
    if hasattr(rho0, "xi") and hasattr(rho0, "x"):
        x, xi = rho0.x, rho0.xi
    else:
        x, xi = rho0
    x = np.asarray(x, dtype=float).reshape(-1, d)
    xi = np.asarray(xi, dtype=float).reshape(-1, d)
    if x.shape != xi.shape:
        raise ValueError("x and xi must have matching shapes")
    return np.hstack([x, xi])


def _check_step(spec, step):
    if spec.perturbed:
        r = spec.perturbation.covering.radius if hasattr(spec.perturbation, "covering") else None
        if r is not None and step > r / 10 * (1 + 1e-12):
            raise ValueError(f"step {step:.3g} too coarse: must be <= h^beta/10 = {r / 10:.3g}")


def _check_window(spec, xi):
    m = float(np.max(np.abs(xi), initial=0.0))
    if m > spec.xi_window:
        raise ValueError(f"extrapolation: |xi| reached {m:.4g} outside the sampled window {spec.xi_window:.4g}")


def _steps(t, step):
    if step <= 0:
        raise ValueError("step must be positive")
    n = max(1, int(math.ceil(abs(t) / step - 1e-12)))
    return n, t / n


def flow(spec, rho0, t, step, store=True):
    """Integrate Hamilton's equations from ``rho0`` for time ``t`` (may be negative).

    ``rho0`` is a :class:`PhasePoint` or a pair ``(x, xi)`` of ``(P, d)`` arrays.
    """
    _check_step(spec, step)
    d = spec.d
    z = _as_points(rho0, d)
    _check_window(spec, z[:, d:])
    n, dt = _steps(t, step)
    zs = [z]
    for _ in range(n):
        k1 = spec.rhs(z)
        k2 = spec.rhs(z + 0.5 * dt * k1)
        k3 = spec.rhs(z + 0.5 * dt * k2)
        k4 = spec.rhs(z + dt * k3)
        z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_window(spec, z[:, d:])
        if store:
            zs.append(z)
    if not store:
        zs = [zs[0], z]
    Z = np.stack(zs)
    times = np.linspace(0.0, t, len(zs)) if store else np.array([0.0, t])
    energy = np.stack([spec.energy(Zi[:, :d], Zi[:, d:]) for Zi in Z])
    return Trajectory(times, Z[..., :d], Z[..., d:], energy, spec.metric.L)


def _gronwall_C0(times, norms):
    """Smallest ``C`` with ``norms <= C exp(C |t|)`` at every sample."""
    best = 1.0
    for t, n in zip(np.abs(times), norms):
        if n <= best * math.exp(best * t):
            continue
        best = brentq(lambda C: C * math.exp(C * t) - n, best, max(n, 2.0) + 1.0)
    return best


def tangent_flow(spec, rho0, t, step):
    """Flow together with ``J(t) = d Phi^t`` from the variational equation."""
    _check_step(spec, step)
    d = spec.d
    z = _as_points(rho0, d)
    _check_window(spec, z[:, d:])
    P = len(z)
    Om = np.block([[np.zeros((d, d)), np.eye(d)], [-np.eye(d), np.zeros((d, d))]])
    J = np.broadcast_to(np.eye(2 * d), (P, 2 * d, 2 * d)).copy()
    n, dt = _steps(t, step)

    def F(z, J):
        f, H = spec.rhs(z, hessian=True)
        return f, Om[None] @ H @ J

    zs, Js = [z], [J]
    for _ in range(n):
        k1, l1 = F(z, J)
        k2, l2 = F(z + 0.5 * dt * k1, J + 0.5 * dt * l1)
        k3, l3 = F(z + 0.5 * dt * k2, J + 0.5 * dt * l2)
        k4, l4 = F(z + dt * k3, J + dt * l3)
        z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        J = J + dt / 6 * (l1 + 2 * l2 + 2 * l3 + l4)
        _check_window(spec, z[:, d:])
        zs.append(z)
        Js.append(J)
    Z, Js = np.stack(zs), np.stack(Js)
    times = np.linspace(0.0, t, n + 1)
    energy = np.stack([spec.energy(Zi[:, :d], Zi[:, d:]) for Zi in Z])
    traj = Trajectory(times, Z[..., :d], Z[..., d:], energy, spec.metric.L)
    ftle = np.empty((P, 2 * d))
    for p in range(P):
        R = np.linalg.qr(Js[-1, p])[1]
        ftle[p] = np.sort(np.log(np.abs(np.diag(R))) / abs(t))[::-1] if t else 0.0
    norms = np.linalg.norm(Js, ord=2, axis=(2, 3)).max(axis=1)
    return TangentFrame(traj, Js, ftle, _gronwall_C0(times, norms))


def _splitting(spec, z, T, step):
    """Finite-time stable/unstable directions at each point, with the exponent gap."""
    d = spec.d
    fwd = tangent_flow(spec, (z[:, :d], z[:, d:]), T, step).jacobians[-1]
    bwd = tangent_flow(spec, (z[:, :d], z[:, d:]), -T, step).jacobians[-1]
    stable, unstable, gaps = [], [], []
    for Jf, Jb in zip(fwd, bwd):
        _, sf, Vf = np.linalg.svd(Jf)
        _, sb, Vb = np.linalg.svd(Jb)
        # most contracted forward -> stable; most contracted backward -> unstable
        stable.append(Vf[-(d - 1):].conj().T if d > 1 else np.zeros((2 * d, 0)))
        unstable.append(Vb[-(d - 1):].conj().T if d > 1 else np.zeros((2 * d, 0)))
        lf = np.log(sf) / T
        gaps.append(float(lf[0] - lf[1]) if d > 1 else 0.0)
    return stable, unstable, np.asarray(gaps)


def instability_check(spec, points, tangents, eta, T_stab=3.0, step=0.01, gap_tol=1e-3):
    """Largest stable-component fraction of tangent vectors of a Lagrangian sheet.

    ``points`` has shape ``(P, 2d)``, ``tangents`` shape ``(P, 2d, k)`` whose
    columns span the tangent space at each point. Each tangent vector is
    written in the frame ``E+ (+) span(H_p, xi.d_xi) (+) E-`` where ``E+-``
    are finite-time Lyapunov directions over horizon ``T_stab``. Returns
    ``indeterminate=True`` when the finite-time spectrum has no gap.
    """
    d = spec.d
    points = np.asarray(points, dtype=float).reshape(-1, 2 * d)
    tangents = np.asarray(tangents, dtype=float).reshape(len(points), 2 * d, -1)
    out = {"eta": eta, "T_stab": T_stab}
    if d == 1:
        return dict(out, eta_hat=float("nan"), indeterminate=True, **{"pass": False})
    stable, unstable, gaps = _splitting(spec, points, T_stab, step)
    if np.min(gaps) < gap_tol:
        return dict(out, eta_hat=float("nan"), indeterminate=True, gap=float(np.min(gaps)), **{"pass": False})
    flows = spec.rhs(points)
    worst = 0.0
    for p in range(len(points)):
        euler = np.concatenate([np.zeros(d), points[p, d:]])
        B = np.column_stack([unstable[p], flows[p], euler, stable[p]])
        for v in tangents[p].T:
            coef = np.linalg.solve(B, v)
            s = np.linalg.norm(stable[p] @ coef[-(d - 1):])
            worst = max(worst, float(s / np.linalg.norm(v)))
    return dict(out, eta_hat=worst, indeterminate=False, gap=float(np.min(gaps)), **{"pass": worst <= eta})


def distortion(grad_phi, x, segments=32):
    """Sup over sample pairs of intrinsic / ambient distance on the graph of ``grad_phi``.

    ``x`` holds sample points ``(M, d)`` of a convex patch (no wrap-around);
    the intrinsic distance is the length of the lifted straight segment.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    M, d = x.shape
    if M < 2:
        raise ValueError("need at least two sample points")
    if len(np.unique(np.round(x, 12), axis=0)) < M:
        raise ValueError("patch sample has repeated points")
    i, j = np.triu_indices(M, 1)
    s = np.linspace(0.0, 1.0, segments + 1)
    path = x[i][:, None, :] + s[None, :, None] * (x[j] - x[i])[:, None, :]
    lift = np.asarray(grad_phi(path.reshape(-1, d)), dtype=float).reshape(path.shape)
    full = np.concatenate([path, lift], axis=2)
    intrinsic = np.sum(np.linalg.norm(np.diff(full, axis=1), axis=2), axis=1)
    ambient = np.linalg.norm(full[:, -1] - full[:, 0], axis=1)
    return float(np.max(intrinsic / ambient))


def trajectory_to_csv(traj, path, spec=None):
    """Columns ``point, t, x..., xi..., energy``."""
    nt, P, d = traj.x_lift.shape
    rows = []
    for p in range(P):
        rows.append(np.column_stack([np.full(nt, p), traj.times, traj.x[:, p], traj.xi[:, p], traj.energy[:, p]]))
    names = ["point", "t"] + [f"x{i}" for i in range(d)] + [f"xi{i}" for i in range(d)] + ["energy"]
    np.savetxt(path, np.vstack(rows), delimiter=",", header=",".join(names), comments="")


def frame_summary(frame):
    return json.dumps(
        {
            "ftle": frame.ftle.tolist(),
            "C0": frame.C0,
            "det_error": frame.det_error(),
            "energy_drift": frame.base.energy_drift,
        },
        sort_keys=True,
    )
