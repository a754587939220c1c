"""Random mesoscopic symbols ``q_omega = sum_j omega_j q_j`` on the energy shell.

Each single-site symbol is a plateau bump ``q_j = chi(dist(rho_j, .) / h**beta)``
centred on a lattice point ``rho_j`` near the shell. The coefficients
``omega_j`` are iid with a compactly supported density and are generated by a
counter-based hash, so ``omega_j`` depends only on ``(seed, j)``.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats
from scipy.spatial import cKDTree

from .pdo import COMPACT, Symbol

__all__ = [
    "plateau_bump",
    "plateau_bump_derivatives",
    "CoveringSpec",
    "build_covering",
    "OmegaDraw",
    "DENSITIES",
    "draw_omega",
    "omega_batch",
    "RandomSymbol",
    "validate_flow_average",
]

# xi coordinates are shifted into a huge non-wrapping box for the periodic kd-tree
_XI_SHIFT = 1.0e6


def _logit_gap(r):
    return 1.0 / (2.0 - r) - 1.0 / (r - 1.0)


def plateau_bump(r):
    """C-infinity profile: 1 on ``[0, 1]``, 0 on ``[2, inf)``, monotone between.

    On ``(1, 2)`` it equals ``f(2-r) / (f(2-r) + f(r-1))`` with ``f(s) = exp(-1/s)``.
    """
    r = np.asarray(r, dtype=float)
    out = np.where(r <= 1.0, 1.0, 0.0)
    mid = (r > 1.0) & (r < 2.0)
    if np.any(mid):
        rm = r[mid]
        # f(2-r)/(f(2-r)+f(r-1)) = expit(1/(r-1) - 1/(2-r))
        out[mid] = special.expit(-_logit_gap(rm))
    return out


def plateau_bump_derivatives(r):
    """Return ``(chi, chi', chi'')`` of :func:`plateau_bump` at ``r``."""
    r = np.asarray(r, dtype=float)
    chi = plateau_bump(r)
    d1 = np.zeros_like(r)
    d2 = np.zeros_like(r)
    mid = (r > 1.0) & (r < 2.0)
    if np.any(mid):
        rm = r[mid]
        c = chi[mid]
        a, b = rm - 1.0, 2.0 - rm
        g1 = 1.0 / a**2 + 1.0 / b**2
        g2 = -2.0 / a**3 + 2.0 / b**3
        d1[mid] = -c * (1 - c) * g1
        d2[mid] = -(d1[mid] * (1 - 2 * c) * g1 + c * (1 - c) * g2)
    return chi, d1, d2


@dataclass(frozen=True)
class CoveringSpec:
    """Lattice covering of the thickened energy shell ``mu1 <= |xi|^2 <= mu2``.

    ``centers`` has shape ``(J, 2d)`` with rows ``(x, xi)``. The x-lattice has
    ``n_x`` points per axis (a power of two dividing the grid size ``N``), the
    xi-lattice is ``k * s_xi`` for integer ``k``.
    """

    d: int
    L: float
    h: float
    beta: float
    mu1: float
    mu2: float
    n_x: int
    s_xi: float
    xi_index: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)
    multiplicity: int = 0
    support_multiplicity: int = 0
    count_constant: float = 0.0
    grid_N: int = 0
    chi_profile: str = "plateau-exp"

    @property
    def radius(self):
        """Ball radius ``h**beta``; bumps are supported in radius ``2 h**beta``."""
        return self.h**self.beta

    @property
    def s_x(self):
        return self.L / self.n_x

    @property
    def size(self):
        return len(self.centers)

    @property
    def C_cov(self):
        return self.support_multiplicity

    def _tree(self):
        t = getattr(self, "_tree_cache", None)
        if t is None:
            t = cKDTree(_embed(self.centers, self.d, self.L), boxsize=_boxsize(self.d, self.L))
            object.__setattr__(self, "_tree_cache", t)
        return t

    def to_dict(self):
        return {
            "d": self.d,
            "L": self.L,
            "h": self.h,
            "beta": self.beta,
            "mu1": self.mu1,
            "mu2": self.mu2,
            "n_x": self.n_x,
            "s_xi": self.s_xi,
            "xi_index": self.xi_index.tolist(),
            "multiplicity": self.multiplicity,
            "support_multiplicity": self.support_multiplicity,
            "count_constant": self.count_constant,
            "grid_N": self.grid_N,
            "chi_profile": self.chi_profile,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        dct = json.loads(text) if isinstance(text, str) else dict(text)
        xi_index = np.asarray(dct.pop("xi_index"), dtype=int).reshape(-1, dct["d"])
        centers = _lattice_centers(dct["d"], dct["n_x"], dct["L"], dct["s_xi"], xi_index)
        return cls(xi_index=xi_index, centers=centers, **dct)


def _boxsize(d, L):
    return np.array([L] * d + [4 * _XI_SHIFT] * d)


def _embed(points, d, L):
    p = np.array(points, dtype=float, copy=True).reshape(-1, 2 * d)
    p[:, :d] = np.mod(p[:, :d], L)
    p[:, :d][p[:, :d] >= L] = 0.0
    p[:, d:] += _XI_SHIFT
    return p


def _lattice_centers(d, n_x, L, s_xi, xi_index):
    s_x = L / n_x
    xs = np.stack(np.meshgrid(*([np.arange(n_x)] * d), indexing="ij"), axis=-1).reshape(-1, d) * s_x
    # x varies slowest so centres sharing a xi-point are contiguous per x-index
    X = np.repeat(xs, len(xi_index), axis=0)
    XI = np.tile(xi_index * s_xi, (len(xs), 1))
    return np.hstack([X, XI])


def build_covering(mu1, mu2, beta, h, grid, probe_factor=10):
    """Cover the shell ``{mu1 <= |xi|^2 <= mu2}`` by balls of radius ``h**beta``.

    The x-spacing is ``L / n_x`` with ``n_x`` the smallest power of two giving
    spacing at most ``h**beta / sqrt(d)``; this keeps the x-lattice inside the
    sampling grid. The xi-spacing is then the largest value for which the half
    cell diagonal stays below ``h**beta``, so every point is within one ball
    radius of the lattice. Lattice points within ``h**beta`` of the shell are
    kept. Coverage and multiplicities are checked on a probe lattice
    ``probe_factor`` times finer.
    """
    d, L = grid.d, grid.L
    if not 0 < mu1 < mu2:
        raise ValueError(f"need 0 < mu1 < mu2, got {mu1}, {mu2}")
    if not 0 < beta < 0.5:
        raise ValueError(f"beta must lie in (0, 1/2), got {beta}")
    if abs(h - grid.h) > 1e-15 * max(h, grid.h):
        raise ValueError(f"covering h={h} differs from grid h={grid.h}")
    r = h**beta
    if math.sqrt(mu2) + 2 * r > 0.875 * grid.xi_max:
        raise ValueError(
            f"aliasing: bump supports reach |xi| = {math.sqrt(mu2) + 2 * r:.4g}, beyond 7/8 of the "
            f"resolved window xi_max={grid.xi_max:.4g} (h={h}, N={grid.N}); increase N or h"
        )
    if r < 2 * max(grid.dx, grid.dxi):
        raise ValueError(
            f"under-resolution: h^beta = {r:.4g} is below 2 grid cells "
            f"(dx={grid.dx:.4g}, dxi={grid.dxi:.4g})"
        )
    s = r / math.sqrt(d)
    n_x = 1
    while L / n_x > s:
        n_x *= 2
    if n_x > grid.N:
        raise ValueError("under-resolution: x-lattice finer than the grid")
    s_x = L / n_x
    # half-diagonal sqrt(d (s_x^2 + s_xi^2)) / 2 <= r, with a small safety factor
    s_xi = 0.99 * math.sqrt(4 * r * r / d - s_x * s_x)
    lo, hi = math.sqrt(mu1) - r, math.sqrt(mu2) + r
    kmax = int(math.floor(hi / s_xi))
    ks = np.arange(-kmax, kmax + 1)
    K = np.stack(np.meshgrid(*([ks] * d), indexing="ij"), axis=-1).reshape(-1, d)
    norm = np.linalg.norm(K * s_xi, axis=1)
    keep = (norm <= hi) & (norm >= max(lo, 0.0))
    xi_index = K[keep]
    centers = _lattice_centers(d, n_x, L, s_xi, xi_index)
    cov = CoveringSpec(
        d=d,
        L=L,
        h=h,
        beta=beta,
        mu1=mu1,
        mu2=mu2,
        n_x=n_x,
        s_xi=s_xi,
        xi_index=xi_index,
        centers=centers,
        grid_N=grid.N,
    )
    probe = _shell_probe(cov, probe_factor)
    tree = cov._tree()
    emb = _embed(probe, d, L)
    ball = tree.query_ball_point(emb, r * (1 - 1e-12), return_length=True)
    supp = tree.query_ball_point(emb, 2 * r, return_length=True)
    if ball.min() < 1:
        raise RuntimeError("covering failed: a shell probe point lies in no ball")
    object.__setattr__(cov, "multiplicity", int(ball.max()))
    object.__setattr__(cov, "support_multiplicity", int(supp.max()))
    object.__setattr__(cov, "count_constant", float(len(centers) * r ** (2 * d)))
    return cov


def _shell_probe(cov, factor):
    """Probe points on the shell; x only over one lattice cell (the pattern is periodic)."""
    d = cov.d
    xs = (np.arange(factor) + 0.5) * (cov.s_x / factor)
    X = np.stack(np.meshgrid(*([xs] * d), indexing="ij"), axis=-1).reshape(-1, d)
    step = cov.s_xi / factor
    m = int(math.ceil(math.sqrt(cov.mu2) / step))
    ax = np.arange(-m, m + 1) * step
    XI = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    n2 = np.sum(XI**2, axis=1)
    XI = XI[(n2 >= cov.mu1) & (n2 <= cov.mu2)]
    if d == 1:
        # the d=1 shell is a pair of intervals; include their endpoints exactly
        ends = np.array([[math.sqrt(cov.mu1)], [math.sqrt(cov.mu2)]])
        XI = np.vstack([XI, ends, -ends])
    return np.hstack([np.repeat(X, len(XI), axis=0), np.tile(XI, (len(X), 1))])


def _splitmix64(z):
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _counter_uniform(key, index):
    """Uniform ``(0, 1)`` values that depend only on ``(key, index)``."""
    with np.errstate(over="ignore"):
        k = _splitmix64(np.uint64(key % 2**64))
        z = _splitmix64(k ^ _splitmix64(np.asarray(index, dtype=np.uint64)))
    return ((z >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53


def _raised_cosine_ppf(u):
    return stats.cosine.ppf(u) / np.pi


DENSITIES = {
    "raised-cosine": {"support": (-1.0, 1.0), "variance": 1.0 / 3.0 - 2.0 / np.pi**2, "ppf": _raised_cosine_ppf},
    "uniform": {"support": (-1.0, 1.0), "variance": 1.0 / 3.0, "ppf": lambda u: 2.0 * u - 1.0},
}


@dataclass(frozen=True)
class OmegaDraw:
    seed: int
    omega: np.ndarray = field(repr=False)
    density: str = "raised-cosine"

    @property
    def density_spec(self):
        spec = DENSITIES[self.density]
        return {"name": self.density, "support": list(spec["support"]), "variance": spec["variance"]}

    def to_json(self):
        return json.dumps(
            {"seed": self.seed, "density": self.density_spec, "omega": self.omega.tolist()}, sort_keys=True
        )

    @classmethod
    def from_json(cls, text):
        dct = json.loads(text)
        return cls(dct["seed"], np.asarray(dct["omega"], dtype=float), dct["density"]["name"])


def _density(name):
    if name not in DENSITIES:
        raise ValueError(f"unknown density {name!r}; choose from {sorted(DENSITIES)}")
    return DENSITIES[name]


def draw_omega(covering, seed, density="raised-cosine", indices=None):
    """iid coefficients; ``omega[j]`` is a pure function of ``(seed, j)``.

    ``indices`` selects a sub-draw; the values agree with the full draw.
    """
    spec = _density(density)
    j = np.arange(covering.size) if indices is None else np.asarray(indices)
    omega = spec["ppf"](_counter_uniform(int(seed), j))
    return OmegaDraw(int(seed), np.asarray(omega, dtype=float), density)


def _draw_key(seed, m):
    with np.errstate(over="ignore"):
        return int(_splitmix64(np.uint64(seed % 2**64) ^ _splitmix64(np.uint64(m) + np.uint64(0x5851F42D4C957F2D))))


def omega_batch(n_coeffs, seed, draws, density="raised-cosine", first_draw=0):
    """``(draws, n_coeffs)`` matrix of Monte-Carlo draws; row ``m`` uses key ``(seed, m)``."""
    spec = _density(density)
    out = np.empty((draws, n_coeffs))
    j = np.arange(n_coeffs)
    for r in range(draws):
        out[r] = spec["ppf"](_counter_uniform(_draw_key(seed, first_draw + r), j))
    return out


@dataclass(frozen=True)
class RandomSymbol:
    """``q_omega`` with analytic evaluation and sampling on a phase grid."""

    covering: CoveringSpec
    draw: OmegaDraw

    def __post_init__(self):
        if len(self.draw.omega) != self.covering.size:
            raise ValueError("omega length does not match the covering")

    @classmethod
    def unit(cls, covering):
        """All coefficients 1, i.e. ``sum_j q_j``."""
        return cls(covering, OmegaDraw(0, np.ones(covering.size), "uniform"))

    @property
    def omega(self):
        return self.draw.omega

    def c0_bound(self):
        return self.covering.C_cov * float(np.max(np.abs(self.omega), initial=0.0))

    def evaluate(self, x, xi, derivs=0):
        """Value (and gradient, Hessian in ``(x, xi)``) at points.

        ``x`` and ``xi`` have shape ``(P, d)``. Gradients have shape
        ``(P, 2d)``, Hessians ``(P, 2d, 2d)``.
        """
        cov = self.covering
        d, L, r = cov.d, cov.L, cov.radius
        x = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, d)
        xi = np.atleast_2d(np.asarray(xi, dtype=float)).reshape(-1, d)
        pts = np.hstack([x, xi])
        P = len(pts)
        val = np.zeros(P)
        grad = np.zeros((P, 2 * d)) if derivs >= 1 else None
        hess = np.zeros((P, 2 * d, 2 * d)) if derivs >= 2 else None
        if cov.size:
            rows, cols = _pairs(cov._tree(), _embed(pts, d, L), 2 * r)
            if len(rows):
                dz = pts[rows] - cov.centers[cols]
                dz[:, :d] = np.mod(dz[:, :d] + L / 2, L) - L / 2
                rho = np.sqrt(np.sum(dz**2, axis=1))
                chi, c1, c2 = plateau_bump_derivatives(rho / r)
                w = self.omega[cols]
                val = np.bincount(rows, weights=w * chi, minlength=P)
                if derivs >= 1:
                    safe = np.where(rho > 0, rho, 1.0)
                    u = dz / safe[:, None]
                    g = (w * c1 / r)[:, None] * u
                    for k in range(2 * d):
                        grad[:, k] = np.bincount(rows, weights=g[:, k], minlength=P)
                if derivs >= 2:
                    outer = u[:, :, None] * u[:, None, :]
                    eye = np.eye(2 * d)[None]
                    H = (w * c2 / r**2)[:, None, None] * outer + (w * c1 / (r * safe))[:, None, None] * (eye - outer)
                    for a in range(2 * d):
                        for b in range(2 * d):
                            hess[:, a, b] = np.bincount(rows, weights=H[:, a, b], minlength=P)
        if derivs == 0:
            return val
        if derivs == 1:
            return val, grad
        return val, grad, hess

    def support_indices(self, x, xi):
        """Covering indices whose bump support contains some of the given points."""
        cov = self.covering
        pts = _embed(np.hstack([np.reshape(x, (-1, cov.d)), np.reshape(xi, (-1, cov.d))]), cov.d, cov.L)
        _, cols = _pairs(cov._tree(), pts, 2 * cov.radius)
        return np.unique(cols)

    def sample(self, grid):
        """``q_omega`` on ``grid.shape * 2`` phase points (x-grid times frequency lattice).

        The x-lattice of centres is a sub-lattice of the grid, so for each
        xi-centre row the x-dependence is an exact circular convolution.
        """
        cov = self.covering
        d, N, r = grid.d, grid.N, cov.radius
        if grid.d != cov.d or grid.L != cov.L or grid.N % cov.n_x or abs(grid.h - cov.h) > 1e-15:
            raise ValueError("grid does not match the covering")
        out = np.zeros(grid.shape * 2)
        if cov.size == 0:
            return out
        stride = N // cov.n_x
        xt = np.mod(grid.axis() + grid.L / 2, grid.L) - grid.L / 2
        x2 = sum(np.meshgrid(*([xt**2] * d), indexing="ij"))
        xi_axis = grid.dxi * grid.freq_axis()
        XIg = np.stack(np.meshgrid(*([xi_axis] * d), indexing="ij"), axis=-1)
        n_xi = len(cov.xi_index)
        W = self.omega.reshape((cov.n_x,) * d + (n_xi,))
        fft_axes = tuple(range(1, d + 1))
        for k in range(n_xi):
            wk = W[..., k]
            if not np.any(wk):
                continue
            G = np.zeros(grid.shape)
            G[tuple(slice(None, None, stride) for _ in range(d))] = wk
            Gh = np.fft.fftn(G)
            dxi2 = np.sum((XIg - cov.xi_index[k] * cov.s_xi) ** 2, axis=-1)
            near = np.argwhere(dxi2 < 4 * r * r)
            if len(near) == 0:
                continue
            for chunk in np.array_split(near, max(1, len(near) // 64)):
                d2 = dxi2[tuple(chunk.T)]
                ker = plateau_bump(np.sqrt(x2[None] + d2.reshape((-1,) + (1,) * d)) / r)
                conv = np.real(np.fft.ifftn(np.fft.fftn(ker, axes=fft_axes) * Gh[None], axes=fft_axes))
                for c, idx in enumerate(chunk):
                    out[(Ellipsis,) + tuple(idx)] += conv[c]
        return out

    def to_symbol(self, grid):
        return Symbol(grid, self.sample(grid), order=COMPACT, eta=self.covering.beta, real=True)

    def to_json(self):
        return json.dumps({"covering": self.covering.to_dict(), "draw": json.loads(self.draw.to_json())}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        dct = json.loads(text)
        return cls(CoveringSpec.from_json(dct["covering"]), OmegaDraw.from_json(json.dumps(dct["draw"])))


def _pairs(tree, pts, radius):
    """``(row, col)`` pairs of query points and tree points within ``radius``."""
    hits = tree.query_ball_point(pts, radius)
    lengths = np.fromiter((len(h) for h in hits), dtype=int, count=len(hits))
    rows = np.repeat(np.arange(len(hits)), lengths)
    cols = np.fromiter((c for h in hits for c in h), dtype=int, count=int(lengths.sum()))
    return rows, cols


def validate_flow_average(covering, spec, T, samples=100, c0=1.0, step=None, seed=0):
    """Minimum over shell samples of ``(1/T) int_0^T sum_j q_j(Phi^t rho) dt``.

    ``spec`` is a :class:`~semitorus.hamflow.HamiltonianSpec` with ``delta = 0``.
    The time integral is composite Simpson on the RK4 trajectory nodes.
    """
    from scipy.integrate import simpson

    from .hamflow import flow

    if spec.delta != 0:
        raise ValueError("flow-average validation expects the unperturbed flow (delta = 0)")
    if samples < 100:
        raise ValueError("need at least 100 shell sample points")
    r = covering.radius
    step = r / 10 if step is None else step
    if step > r / 10:
        raise ValueError(f"integrator step {step:.3g} too coarse for bump scale h^beta = {r:.3g}")
    d = covering.d
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0, covering.L, size=(samples, d))
    rad = np.sqrt(rng.uniform(covering.mu1, covering.mu2, size=samples))
    if d == 1:
        dirs = np.where(rng.uniform(size=(samples, 1)) < 0.5, -1.0, 1.0)
    else:
        th = rng.uniform(0, 2 * np.pi, size=samples)
        dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    xi0 = rad[:, None] * dirs
    traj = flow(spec, (x0, xi0), T, step)
    unit = RandomSymbol.unit(covering)
    nt = len(traj.times)
    vals = unit.evaluate(traj.x.reshape(-1, d), traj.xi.reshape(-1, d)).reshape(nt, samples)
    avg = simpson(vals, x=traj.times, axis=0) / T
    c0_hat = float(avg.min())
    return {"c0_hat": c0_hat, "pass": bool(c0_hat >= c0), "per_sample": avg}
