"""Random-phase statistics, exponent budgets and sup-norm measurements."""

import datetime
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .fitting import bootstrap_slope_ci, loglog_fit
from .phasegrid import GridSpec, WaveFunction

SCHEMA_VERSION = "1.0"


# ---------------------------------------------------------------- exponents


class FeasibilityError(ValueError):
    """An exponent constraint failed; ``inequality`` names it."""

    def __init__(self, inequality, message):
        super().__init__(f"{inequality}: {message}")
        self.inequality = inequality


def as_float(v):
    """Float value of a number or a ``'p/q'`` string."""
    return float(Fraction(v)) if isinstance(v, str) else float(v)


def _frac(v):
    if isinstance(v, float):
        raise TypeError("exponent arithmetic is exact: pass int, Fraction or a 'p/q' string")
    return Fraction(v)


def check_feasible(alpha, beta):
    """``alpha in ]0, 1]``, ``beta in [0, 1/2[`` and ``beta < min(alpha/2, 2 - 2 alpha)``."""
    alpha, beta = _frac(alpha), _frac(beta)
    if not 0 < alpha <= 1:
        raise FeasibilityError("0 < alpha <= 1", f"alpha = {alpha}")
    if not 0 <= beta < Fraction(1, 2):
        raise FeasibilityError("0 <= beta < 1/2", f"beta = {beta}")
    if not beta < alpha / 2:
        raise FeasibilityError("beta < alpha/2", f"beta = {beta}, alpha/2 = {alpha / 2}")
    if not beta < 2 - 2 * alpha:
        raise FeasibilityError("beta < 2 - 2 alpha", f"beta = {beta}, 2 - 2 alpha = {2 - 2 * alpha}")
    return alpha, beta


def check_hypothesis(alpha, beta, eps0):
    """Power-law form of the admissibility of ``delta = h^alpha``, for ``h <= 1``.

    ``delta h^(-2 beta - eps0) <= 1`` needs ``alpha - 2 beta >= eps0`` and
    ``delta^2 h^(beta - 2) >= h^(-eps0)`` needs ``2 alpha + beta - 2 <= -eps0``.
    """
    alpha, beta, eps0 = _frac(alpha), _frac(beta), _frac(eps0)
    if not 0 < eps0 < Fraction(1, 4):
        raise FeasibilityError("0 < eps0 < 1/4", f"eps0 = {eps0}")
    if not alpha - 2 * beta >= eps0:
        raise FeasibilityError("delta h^(-2 beta - eps0) <= 1", f"alpha - 2 beta = {alpha - 2 * beta} < eps0")
    if not 2 * alpha + beta - 2 <= -eps0:
        raise FeasibilityError("delta^2 h^(beta - 2) >= h^(-eps0)", f"2 alpha + beta - 2 = {2 * alpha + beta - 2}")
    return True


@dataclass(frozen=True)
class ExponentBudget:
    """``Gamma`` (an open supremum) and ``Gamma' = min(Gamma, (d-1) beta / 2)``."""

    alpha: Fraction
    beta: Fraction
    d: int
    Gamma: Fraction
    GammaPrime: Fraction
    open_bound: bool = True

    @property
    def supnorm_exponent(self):
        return Fraction(1 - self.d, 2) + self.GammaPrime

    def to_dict(self):
        return {
            "alpha": str(self.alpha), "beta": str(self.beta), "d": self.d, "Gamma": str(self.Gamma),
            "GammaPrime": str(self.GammaPrime), "supnorm_exponent": str(self.supnorm_exponent),
            "open_bound": self.open_bound,
        }


def gamma_prime(alpha, beta, d):
    """Exact exponent budget for ``delta = h^alpha`` at scale ``beta`` in dimension ``d``."""
    alpha, beta = check_feasible(alpha, beta)
    G = min(1 - alpha - beta / 2, alpha - 2 * beta)
    Gp = min(G, Fraction(d - 1, 2) * beta)
    return ExponentBudget(alpha, beta, int(d), G, Gp, open_bound=True)


def _affine_parts(d):
    # each entry: (c0, ca, cb) for c0 + ca alpha + cb beta
    return [(Fraction(1), Fraction(-1), Fraction(-1, 2)), (Fraction(0), Fraction(1), Fraction(-2)),
            (Fraction(0), Fraction(0), Fraction(d - 1, 2))]


def optimize_gamma_prime(d, grid=400):
    """Maximise ``Gamma'`` over the feasible ``(alpha, beta)`` region.

    Exact answer by vertex enumeration of the piecewise-affine objective
    (pairwise equalities of its pieces and the region's boundary lines),
    cross-checked by a float grid search refined with ternary search.
    Returns ``{"alpha", "beta", "GammaPrime", "float_check"}``.
    """
    parts = _affine_parts(d)
    bounds = [(Fraction(0), Fraction(1), Fraction(0)), (Fraction(1), Fraction(-1), Fraction(0)),
              (Fraction(0), Fraction(0), Fraction(1)), (Fraction(1, 2), Fraction(0), Fraction(-1)),
              (Fraction(0), Fraction(1, 2), Fraction(-1)), (Fraction(2), Fraction(-2), Fraction(-1))]
    lines = [(p[0] - q[0], p[1] - q[1], p[2] - q[2]) for i, p in enumerate(parts) for q in parts[i + 1:]]
    lines += bounds
    best = None
    for i, l1 in enumerate(lines):
        for l2 in lines[i + 1:]:
            det = l1[1] * l2[2] - l1[2] * l2[1]
            if det == 0:
                continue
            a = (-l1[0] * l2[2] + l1[2] * l2[0]) / det
            b = (-l1[1] * l2[0] + l1[0] * l2[1]) / det
            # closure of the feasible region; strict bounds make the optimum a supremum
            if not (0 <= a <= 1 and 0 <= b <= Fraction(1, 2) and b <= a / 2 and b <= 2 - 2 * a):
                continue
            val = min(c0 + ca * a + cb * b for c0, ca, cb in parts)
            if best is None or val > best[2]:
                best = (a, b, val)
    a, b, val = best
    return {"alpha": a, "beta": b, "GammaPrime": val, "float_check": _float_optimum(d, grid)}


def _float_optimum(d, grid):
    def g(a, b):
        return min(1 - a - b / 2, a - 2 * b, (d - 1) * b / 2)

    def best_beta(a):
        hi = min(0.5, a / 2, 2 - 2 * a)
        lo = 0.0
        for _ in range(100):
            m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
            if g(a, m1) < g(a, m2):
                lo = m1
            else:
                hi = m2
        return 0.5 * (lo + hi)

    alphas = np.linspace(1e-6, 1.0, grid)
    vals = [g(a, best_beta(a)) for a in alphas]
    k = int(np.argmax(vals))
    lo, hi = alphas[max(k - 1, 0)], alphas[min(k + 1, grid - 1)]
    for _ in range(100):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        if g(m1, best_beta(m1)) < g(m2, best_beta(m2)):
            lo = m1
        else:
            hi = m2
    a = 0.5 * (lo + hi)
    b = best_beta(a)
    return {"alpha": a, "beta": b, "GammaPrime": g(a, b)}


# ---------------------------------------------------------------- Z statistics


def char_function(u, density="raised-cosine"):
    """``E[exp(i u omega)]`` for the coefficient densities on ``[-1, 1]``."""
    u = np.asarray(u, dtype=float)
    x = u / np.pi
    if density == "uniform":
        return np.sinc(x)
    if density == "raised-cosine":
        den = 1.0 - x**2
        near = np.abs(den) < 1e-9
        return np.where(near, 0.5, np.sinc(x) / np.where(near, 1.0, den))
    raise ValueError(f"unknown density {density!r}")


@dataclass(frozen=True)
class ZSample:
    """Per-sheet terms ``Z_j = s_j b_j exp(i phi_{j,t,delta}(x)/h)`` at one point over draws.

    ``base`` holds ``s_j b_j exp(i phi_{j,t,0}/h)``; ``K`` the sparse
    ``(J, n_coeffs)`` phase-integral matrix; ``Zj`` the ``(M, J)`` draws.
    """

    x: np.ndarray
    h: float
    delta: float
    base: np.ndarray = field(repr=False)
    K: object = field(repr=False)
    dependency: list = field(repr=False)
    Zj: np.ndarray = field(repr=False)
    density: str = "raised-cosine"

    @property
    def Z(self):
        return self.Zj.sum(axis=1)

    def exact_mean_terms(self):
        """``E[Z_j] = base_j prod_i phi_m(-delta K_ji / h)``: the independence oracle."""
        if self.K is None or self.delta == 0:
            return self.base.copy()
        out = np.empty(len(self.base), dtype=complex)
        Kc = self.K.tocsr()
        for j in range(len(self.base)):
            row = Kc.getrow(j).data
            out[j] = self.base[j] * np.prod(char_function(-self.delta * row / self.h, self.density))
        return out

    def exact_mean(self):
        return complex(np.sum(self.exact_mean_terms()))


def z_sample(x, h, delta, base, K, dependency, omega, density="raised-cosine"):
    """Evaluate ``Z_j`` for a ``(M, n_coeffs)`` draw matrix ``omega``."""
    base = np.asarray(base, dtype=complex)
    if K is None or delta == 0:
        Zj = np.broadcast_to(base, (len(omega), len(base))).copy()
    else:
        phase = (K @ omega.T).T  # (M, J)
        Zj = base[None, :] * np.exp(-1j * delta * phase / h)
    return ZSample(np.asarray(x, float), h, delta, base, K, dependency, Zj, density)


def independence_check(samples):
    """Disjointness of dependency sets and empirical correlations of co-evaluated sheets.

    Returns ``disjoint_fraction``, the per-pair flags, the correlation matrix
    of ``(Re Z_j, Im Z_j)`` for each sample and the largest ``|corr|`` over
    disjoint pairs.
    """
    pairs = disjoint = 0
    worst = 0.0
    corrs = []
    flags = []
    for s in samples:
        J = s.Zj.shape[1]
        feats = np.concatenate([s.Zj.real, s.Zj.imag], axis=1)
        std = feats.std(axis=0)
        live = std > 1e-14
        C = np.zeros((2 * J, 2 * J))
        if live.sum() >= 2:
            C[np.ix_(live, live)] = np.corrcoef(feats[:, live], rowvar=False)
        corrs.append(C)
        for j in range(J):
            for k in range(j + 1, J):
                dj, dk = s.dependency[j], s.dependency[k]
                ok = len(np.intersect1d(dj, dk)) == 0
                pairs += 1
                disjoint += ok
                flags.append((j, k, ok))
                if ok:
                    blk = C[np.ix_([j, J + j], [k, J + k])]
                    worst = max(worst, float(np.max(np.abs(blk))))
    return {"disjoint_fraction": disjoint / pairs if pairs else 1.0, "pairs": flags, "pairwise_corr": corrs,
            "max_abs_corr_disjoint": worst}


def concentration_check(samples, hs, g_norms, Gamma, beta, epsilon, d=1, min_draws=1000, resamples=1000,
                        seed=0):
    """Mean decay of ``|E^[Z]| / ||g||`` against ``h`` and the tail frequency.

    ``samples[i]`` is the :class:`ZSample` at ``hs[i]``. The exact mean from
    the characteristic-function oracle is fitted alongside the empirical one,
    together with the Monte-Carlo noise floor ``std(Z)/sqrt(M)``.
    """
    rows = []
    for s, h, gn in zip(samples, hs, g_norms):
        M = s.Zj.shape[0]
        if M < min_draws:
            raise ValueError(f"insufficient draws: {M} < {min_draws}")
        Z = s.Z
        emp = abs(np.mean(Z)) / gn
        exact = abs(s.exact_mean()) / gn
        floor = float(np.std(Z) / math.sqrt(M)) / gn
        thresh = h ** (-epsilon) * (1 + h ** (Gamma - (d - 1) * (beta - epsilon) / 2)) * gn
        tail = float(np.mean(np.abs(Z) > thresh))
        q = np.quantile(np.abs(Z) / gn, [0.5, 0.9, 0.99]).tolist()
        per = np.abs(s.exact_mean_terms()) / np.maximum(np.abs(s.base), 1e-300)
        rows.append({"h": h, "mean_emp": emp, "mean_exact": exact, "noise_floor": floor, "tail_fraction": tail,
                     "tail_ok": tail <= 10.0 / M, "quantiles": q, "draws": M, "per_sheet_decay": per.tolist(),
                     "sum_Zj_sq_over_g": float(np.max(np.sum(np.abs(s.Zj) ** 2, axis=1))) / gn**2})
    predicted = Gamma - (d - 1) * (beta - epsilon) / 2
    out = {"rows": rows, "predicted_slope": predicted}
    emp = [r["mean_emp"] for r in rows]
    if all(v > 0 for v in emp):
        f = loglog_fit(hs, emp)
        out.update(slope=f["slope"], r2=f["r2"])
        boot = [s.Z / gn for s, gn in zip(samples, g_norms)]
        out["slope_ci"] = bootstrap_slope_ci(hs, boot, stat=lambda z: abs(np.mean(z)), resamples=resamples, seed=seed)
    ex = [r["mean_exact"] for r in rows]
    if all(v > 0 for v in ex):
        out["exact_slope"] = loglog_fit(hs, ex)["slope"]
    out["signal_above_floor"] = all(r["mean_exact"] > 3 * r["noise_floor"] for r in rows)
    out["tail_ok"] = all(r["tail_ok"] for r in rows)
    return out


def separated_sheet_pipeline(h, beta, epsilon, alpha=None, delta=None, t=1.0, mu=(0.81, 1.21), x0=1.0, M=2000,
                             seed=0, density="raised-cosine", spacing=None, max_sheets=None):
    """Co-evaluated ``d = 1`` plane sheets on the shell, transported and randomised.

    Sheets sit at covectors spaced by ``max(h^(beta-eps), 4.4 h^beta)`` (wider
    than the diameter ``4 h^beta`` of a bump support) inside ``[sqrt(mu1),
    sqrt(mu2)]``, with equal weights normalising ``||g||_2 = 1``. Returns the
    :class:`ZSample` at ``x0`` and ``||g||_2``.
    """
    from .hamflow import HamiltonianSpec, metric_family
    from .lagdecomp import phase_integral, plane_sheet, wkb_propagate
    from .randsymbol import RandomSymbol, build_covering, draw_omega, omega_batch

    if delta is None:
        delta = h**alpha
    r = h**beta
    # the grid only fixes the lattice and the covering's window; take it wide enough
    need = (math.sqrt(mu[1]) + 2 * r) / (0.875 * h)
    N = 1 << max(8, int(math.ceil(math.log2(2 * need + 1))))
    grid = GridSpec(1, N, h)
    cov = build_covering(mu[0], mu[1], beta, h, grid)
    spacing = max(h ** (beta - epsilon), 4.4 * r) if spacing is None else spacing
    lo, hi = math.sqrt(mu[0]), math.sqrt(mu[1])
    xis = np.arange(lo, hi + 1e-12, spacing)
    if max_sheets:
        xis = xis[:max_sheets]
    ns = np.unique(np.round(xis / (h * grid.k0)).astype(int))
    metric = metric_family("flat", 1)
    free = HamiltonianSpec(metric)
    rs = RandomSymbol(cov, draw_omega(cov, seed, density))
    spec = HamiltonianSpec(metric, delta, rs, xi_window=grid.xi_max)
    J = len(ns)
    s = np.full(J, 1.0 / math.sqrt(J * grid.L))
    base, rows, dep = [], [], []
    step = r / 10
    for n in ns:
        sheet = plane_sheet(grid, int(n), patch=np.array([[x0]]))
        st = wkb_propagate(sheet, free, t, step, targets=np.array([[x0]]))
        pc = phase_integral(st, spec, t, mode="zeroth", step=step)
        base.append(st.amplitude[0] * np.exp(1j * st.phi[0] / h))
        rows.append(pc.K)
        dep.append(pc.dependency[0])
    from scipy import sparse

    K = sparse.vstack(rows).tocsr()
    omega = omega_batch(cov.size, seed + 1, M, density)
    zs = z_sample([x0], h, delta, s * np.array(base), K, dep, omega, density)
    g_norm = float(math.sqrt(grid.L * np.sum(s**2)))
    return zs, g_norm, {"N": N, "sheets": J, "frequencies": ns.tolist(), "spacing": spacing, "delta": delta,
                        "n_coeffs": cov.size}


# ---------------------------------------------------------------- sup norms


def supnorm_measure(psi, mode="spectral", rtol=0.01, max_refine=16, h=None):
    """Certified ``L^inf`` of a band-limited state by oversampled evaluation.

    The state is resampled by zero-padded FFT on grids refined by 1, 2, 4,
    ... and the grid maximum is certified against off-grid values using a
    gradient bound ``G``: ``max |psi| <= linf + G * spacing * sqrt(d) / 2``.
    ``mode="spectral"`` uses ``G = sum k0 |n| |c_n|``; ``mode="sobolev"``
    the cruder ``k0 n_max sqrt(#modes) ||c||_2``, the semiclassical
    Sobolev chain ``C h^(-d/2-1) ||psi||_2`` with its constant explicit.
    Refinement stops once the correction is below ``rtol * linf``.
    """
    grid = psi.grid
    d, N, L = grid.d, grid.N, grid.L
    c = np.fft.fftn(psi.values, norm="forward")
    nmesh = grid.freq_mesh()
    nabs = np.sqrt(sum(m**2 for m in nmesh))
    if mode == "spectral":
        G = float(np.sum(grid.k0 * nabs * np.abs(c)))
    elif mode == "sobolev":
        live = np.abs(c) > 0
        nmax = float(np.max(nabs[live], initial=0.0))
        G = grid.k0 * nmax * math.sqrt(int(live.sum())) * float(np.linalg.norm(c))
    else:
        raise ValueError("mode must be 'spectral' or 'sobolev'")
    factor = 1
    while True:
        M = N * factor
        pad = np.zeros((M,) * d, dtype=complex)
        idx = np.fft.fftfreq(N, 1.0 / N).astype(int) % M
        pad[np.ix_(*([idx] * d))] = c
        vals = np.fft.ifftn(pad, norm="forward")
        linf = float(np.max(np.abs(vals)))
        spacing = L / M
        corr = G * spacing * math.sqrt(d) / 2
        if corr <= rtol * max(linf, 1e-300) or factor >= max_refine:
            break
        factor *= 2
    return {"linf": linf, "upper": linf + corr, "correction": corr, "gradient_bound": G, "refine": factor,
            "mode": mode, "conclusive": corr < linf}


def worst_shell_mode(grid, mu):
    """Integer ``K`` in the shell with the most lattice representations and its aligned combination."""
    from .lagdecomp import shell_eigenmode

    s = (grid.h * grid.k0) ** 2
    lo, hi = int(math.ceil(mu[0] / s)), int(math.floor(mu[1] / s))
    best, bestK = -1, None
    r = int(math.isqrt(hi)) + 1
    axes = [np.arange(-r, r + 1)] * grid.d
    n = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    sq = np.sum(n**2, axis=1)
    for K in range(max(lo, 1), hi + 1):
        c = int(np.sum(sq == K))
        if c > best:
            best, bestK = c, K
    if not best or best <= 0:
        raise ValueError("no lattice frequency on the shell")
    psi, freqs = shell_eigenmode(grid, bestK)
    return psi, bestK, freqs


@dataclass
class ExperimentReport:
    """Versioned experiment record; the digest excludes the timestamp."""

    kind: str
    config: dict
    seeds: list
    measurements: list
    fits: dict
    flags: dict
    timestamp: str = ""
    schema_version: str = SCHEMA_VERSION

    def body(self):
        return {"schema_version": self.schema_version, "kind": self.kind, "config": self.config,
                "seeds": self.seeds, "measurements": self.measurements, "fits": self.fits, "flags": self.flags}

    def digest(self):
        return hashlib.sha256(_canonical(self.body()).encode()).hexdigest()

    def to_json(self):
        dct = self.body()
        dct["timestamp"] = self.timestamp
        dct["sha256"] = self.digest()
        return _canonical(dct, indent=1)

    @property
    def passed(self):
        return all(bool(v) for v in self.flags.values())


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if math.isfinite(v) else repr(v)
    if isinstance(o, Fraction):
        return str(o)
    if isinstance(o, complex):
        return [o.real, o.imag]
    return o


def _canonical(obj, indent=None):
    return json.dumps(_jsonable(obj), sort_keys=True, indent=indent)


def now_stamp():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _ladder_task(h, seed, cfg, delta):
    from .hamflow import metric_family
    from .qprop import build_propagator, hamiltonian_operator
    from .randsymbol import RandomSymbol, build_covering, draw_omega

    d, N = cfg["d"], cfg["N"]
    grid = GridSpec(d, N, h)
    mu = tuple(cfg["mu"])
    psi, K, freqs = worst_shell_mode(grid, mu)
    psi = psi.normalized()
    metric = metric_family(cfg.get("metric", "flat"), d)
    rs = None
    if delta != 0:
        cov = build_covering(mu[0], mu[1], as_float(cfg["beta"]), h, grid)
        rs = RandomSymbol(cov, draw_omega(cov, seed, cfg.get("density", "raised-cosine")))
    H = hamiltonian_operator(grid, metric, delta, rs)
    prop = build_propagator(H, method=cfg.get("method", "eigh" if d == 1 else "chebyshev"))
    out = prop.apply(cfg["t"], psi)
    m = supnorm_measure(out, cfg.get("gradient_mode", "spectral"))
    return {"h": h, "seed": seed, "delta": delta, "K": K, "multiplicity": len(freqs),
            "ratio": m["linf"] / out.l2(), "ratio_upper": m["upper"] / out.l2(), "linf": m["linf"], "correction": m["correction"],
            "conclusive": m["conclusive"]}


def supnorm_sweep(cfg, seeds=(0,), parallel=1):
    """Baseline (``delta = 0``) against perturbed (``delta = h^alpha``) certified ``L^inf/L^2`` ratios.

    ``cfg`` needs ``d, N, hs, mu, t, alpha, beta``. The perturbed exponent is
    fitted to the seed-mean ratio with a bootstrap CI over seeds; the gap is
    reported descriptively.
    """
    hs = sorted(cfg["hs"], reverse=True)
    tasks = [(h, None) for h in hs] + [(h, s) for h in hs for s in seeds]

    def run(task):
        h, s = task
        delta = 0.0 if s is None else h ** as_float(cfg["alpha"])
        return _ladder_task(h, 0 if s is None else s, cfg, delta)

    if parallel > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(parallel) as ex:
            results = list(ex.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    base = [r for r, t in zip(results, tasks) if t[1] is None]
    pert = [r for r, t in zip(results, tasks) if t[1] is not None]
    pert.sort(key=lambda r: (r["h"], r["seed"]))
    base.sort(key=lambda r: r["h"])
    hb = [r["h"] for r in base]
    fb = loglog_fit(hb, [r["ratio"] for r in base]) if len(hb) > 1 else {"slope": 0.0, "r2": 1.0}
    samples = [[r["ratio"] for r in pert if r["h"] == h] for h in hb]
    fp = loglog_fit(hb, [np.mean(s) for s in samples]) if len(hb) > 1 else {"slope": 0.0, "r2": 1.0}
    ci = bootstrap_slope_ci(hb, samples, resamples=1000, seed=0) if len(hb) > 1 else (0.0, 0.0)
    fits = {"baseline_slope": fb["slope"], "baseline_r2": fb["r2"], "perturbed_slope": fp["slope"],
            "perturbed_r2": fp["r2"], "perturbed_slope_ci": list(ci), "gap": fp["slope"] - fb["slope"]}
    flags = {"all_certificates_conclusive": all(r["conclusive"] for r in results)}
    return ExperimentReport("supnorm-sweep", dict(cfg), list(seeds), base + pert, fits, flags, now_stamp())
