"""Command-line front door: ``semitorus <subcommand> --config PATH``.

Configs are JSON files (``//`` and ``/* */`` comments allowed). Every report
embeds the resolved config and seeds; the exit code is nonzero iff a gate
fails or a stage raises.
"""

import argparse
import json
import math
import os
import re
import sys
import time
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from .expstats import (
    ExperimentReport,
    FeasibilityError,
    as_float,
    check_feasible,
    check_hypothesis,
    concentration_check,
    gamma_prime,
    independence_check,
    now_stamp,
    optimize_gamma_prime,
    separated_sheet_pipeline,
    supnorm_sweep,
)

SUBCOMMANDS = ["validate", "quantize-check", "egorov", "decompose", "propagate", "concentration", "supnorm-sweep",
               "exponents"]
OUT_ENV = "SEMITORUS_OUT"
SHIPPED = ("d1-small", "d2-small")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


def _strip_comments(text):
    # drop /* */ blocks and // line comments outside strings, keeping line numbers
    out, i, n = [], 0, len(text)
    in_str = False
    while i < n:
        c = text[i]
        if in_str:
            out.append(c)
            if c == "\\" and i + 1 < n:
                out.append(text[i + 1])
                i += 1
            elif c == '"':
                in_str = False
        elif c == '"':
            in_str = True
            out.append(c)
        elif text.startswith("//", i):
            j = text.find("\n", i)
            i = n if j < 0 else j
            continue
        elif text.startswith("/*", i):
            j = text.find("*/", i + 2)
            if j < 0:
                raise ConfigError("unterminated /* comment")
            out.append(re.sub(r"[^\n]", " ", text[i:j + 2]))
            i = j + 2
            continue
        else:
            out.append(c)
        i += 1
    return "".join(out)


def shipped_config_path(name):
    return resources.files("semitorus") / "configs" / f"{name}.json"


def load_config(path):
    """Parse a config file (or a shipped config name) and fill defaults."""
    p = str(path)
    if p in SHIPPED:
        text = shipped_config_path(p).read_text()
        origin = p
    else:
        text = Path(p).read_text()
        origin = p
    try:
        raw = json.loads(_strip_comments(text))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{origin}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    return resolve_config(raw)


_REQUIRED = {
    "domain": ["d", "N"],
    "ladder": ["hs"],
    "model": ["mu1", "mu2", "t"],
    "perturbation": ["beta", "seeds"],
    "decomposition": ["gamma", "epsilon"],
}


def resolve_config(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    for sec, keys in _REQUIRED.items():
        if sec not in raw or not isinstance(raw[sec], dict):
            raise ConfigError(f"{sec}: missing section")
        for k in keys:
            if k not in raw[sec]:
                raise ConfigError(f"{sec}.{k}: missing field")
    cfg = json.loads(json.dumps(raw))
    dom = cfg["domain"]
    dom.setdefault("L", 2 * math.pi)
    if dom["d"] not in (1, 2):
        raise ConfigError(f"domain.d: expected 1 or 2, got {dom['d']}")
    if not isinstance(dom["N"], int) or dom["N"] < 4 or dom["N"] & (dom["N"] - 1):
        raise ConfigError(f"domain.N: expected a power of two >= 4, got {dom['N']}")
    hs = cfg["ladder"]["hs"]
    if not hs or any((not isinstance(h, (int, float))) or h <= 0 or h > 1 for h in hs):
        raise ConfigError("ladder.hs: expected positive values <= 1")
    m = cfg["model"]
    m.setdefault("metric", "flat")
    if not 0 < m["mu1"] < m["mu2"]:
        raise ConfigError("model.mu1, model.mu2: need 0 < mu1 < mu2")
    pert = cfg["perturbation"]
    pert.setdefault("density", "raised-cosine")
    pert.setdefault("alpha", None)
    pert.setdefault("eps0", None)
    for k in ("alpha", "beta", "eps0"):
        if pert[k] is not None:
            try:
                Fraction(pert[k]) if isinstance(pert[k], str) else float(pert[k])
            except (ValueError, ZeroDivisionError):
                raise ConfigError(f"perturbation.{k}: not a number or 'p/q' string: {pert[k]!r}") from None
    if not isinstance(pert["seeds"], list) or not all(isinstance(s, int) for s in pert["seeds"]):
        raise ConfigError("perturbation.seeds: expected a list of integers")
    run = cfg.setdefault("run", {})
    run.setdefault("draws", 2000)
    run.setdefault("parallel", 1)
    cfg.setdefault("name", "config")
    cfg.setdefault("egorov", {})
    cfg.setdefault("quantize", {})
    cfg.setdefault("concentration", {})
    return cfg


def _exact(v):
    return Fraction(v) if isinstance(v, str) else Fraction(repr(float(v))) if isinstance(v, float) else Fraction(v)


# ---------------------------------------------------------------- subcommands


def cmd_validate(cfg):
    """Feasibility and coverage checks; allocates nothing larger than the ladder."""
    pert, dom, m = cfg["perturbation"], cfg["domain"], cfg["model"]
    beta = _exact(pert["beta"])
    checks, flags = {}, {}
    try:
        if pert["alpha"] is not None:
            check_feasible(_exact(pert["alpha"]), beta)
        elif not 0 <= beta < Fraction(1, 2):
            raise FeasibilityError("0 <= beta < 1/2", f"beta = {beta}")
        flags["feasible"] = True
    except FeasibilityError as e:
        checks["feasibility"] = str(e)
        flags["feasible"] = False
    if pert["alpha"] is not None and pert["eps0"] is not None and flags["feasible"]:
        try:
            check_hypothesis(_exact(pert["alpha"]), beta, _exact(pert["eps0"]))
            flags["hypothesis"] = True
        except FeasibilityError as e:
            checks["hypothesis"] = str(e)
            flags["hypothesis"] = False
    cover = []
    L = dom["L"]
    for h in cfg["ladder"]["hs"]:
        xi_max = h * (2 * math.pi / L) * (dom["N"] // 2)
        r = h ** float(beta)
        need = math.sqrt(m["mu2"]) + 2 * r
        cover.append({"h": h, "xi_max": xi_max, "shell_plus_support": need, "ok": need <= 0.875 * xi_max})
    checks["coverage"] = cover
    flags["coverage"] = all(c["ok"] for c in cover)
    return ExperimentReport("validate", cfg, pert["seeds"], [checks], {}, flags, now_stamp())


def cmd_exponents(cfg):
    pert, d = cfg["perturbation"], cfg["domain"]["d"]
    rows = []
    if pert["alpha"] is not None:
        rows.append(gamma_prime(_exact(pert["alpha"]), _exact(pert["beta"]), d).to_dict())
    rows.append(gamma_prime(Fraction(5, 7), Fraction(2, 7), 2).to_dict())
    opt = {}
    for dd in (2, 3):
        o = optimize_gamma_prime(dd)
        opt[str(dd)] = {"alpha": str(o["alpha"]), "beta": str(o["beta"]), "GammaPrime": str(o["GammaPrime"]),
                        "supnorm_exponent": str(Fraction(1 - dd, 2) + o["GammaPrime"]),
                        "float_check": o["float_check"]}
    flags = {"d2_budget": rows[-1]["GammaPrime"] == "1/7" and rows[-1]["supnorm_exponent"] == "-5/14",
             "d3_optimum": opt["3"]["GammaPrime"] == "2/9"}
    return ExperimentReport("exponents", cfg, pert["seeds"], rows, {"optimizer": opt}, flags, now_stamp())


def _format_exponents(rep):
    lines = [f"{'d':>2} {'alpha':>6} {'beta':>6} {'Gamma':>8} {'Gamma_prime':>12} {'sup-norm exp':>13}"]
    for r in rep.measurements:
        lines.append(f"{r['d']:>2} {r['alpha']:>6} {r['beta']:>6} {r['Gamma']:>8} {r['GammaPrime']:>12} "
                     f"{r['supnorm_exponent']:>13}")
    for d, o in rep.fits["optimizer"].items():
        lines.append(f"{d:>2} {o['alpha']:>6} {o['beta']:>6} {'-':>8} {o['GammaPrime']:>12} "
                     f"{o['supnorm_exponent']:>13}  (optimum)")
    return "\n".join(lines)


def _egorov_block(cfg):
    e = dict(cfg["egorov"])
    e.setdefault("N", 256)
    e.setdefault("hs", [0.25, 0.125, 0.0625, 0.03125])
    e.setdefault("betas", [as_float(cfg["perturbation"]["beta"])])
    e.setdefault("mu", [0.81, 1.21])
    e.setdefault("width", [2.0, 0.5])
    e.setdefault("t", 1.0)
    e.setdefault("delta_offset", 0.1)
    e.setdefault("order", 0)
    return e


def cmd_egorov(cfg):
    from .qprop import egorov_ladder

    e = _egorov_block(cfg)
    meas, fits, flags = [], {}, {}
    seed = cfg["perturbation"]["seeds"][0]
    for beta in e["betas"]:
        off = e["delta_offset"]
        res = egorov_ladder(e["hs"], e["N"], beta, lambda h, b=beta: h ** (2 * b + off), t=e["t"], mu=tuple(e["mu"]),
                            seed=seed, density=cfg["perturbation"]["density"], order=e["order"], width=tuple(e["width"]))
        meas.append(res)
        key = f"beta={beta}"
        fits[key] = {"exponent_fit": res["exponent_fit"], "r2": res["r2"], "target": 1 - 2 * beta - 0.2}
        flags[key] = res["exponent_fit"] >= 1 - 2 * beta - 0.2 and res["r2"] >= 0.9
    out = {"config": e, "ladder": meas[0]["ladder"], "exponent_fit": meas[0]["exponent_fit"], "runs": meas}
    return ExperimentReport("egorov", cfg, cfg["perturbation"]["seeds"], [out], fits, flags, now_stamp())


def _decompose_state(cfg):
    from .expstats import worst_shell_mode
    from .phasegrid import GridSpec

    dcfg = cfg["decomposition"]
    d, N = cfg["domain"]["d"], cfg["domain"]["N"]
    if "K" in dcfg:
        K = int(dcfg["K"])
        h = 1 / math.sqrt(K)
        grid = GridSpec(d, N, h, cfg["domain"]["L"])
        from .lagdecomp import shell_eigenmode

        psi, freqs = shell_eigenmode(grid, K)
    else:
        h = cfg["ladder"]["hs"][0]
        grid = GridSpec(d, N, h, cfg["domain"]["L"])
        psi, K, freqs = worst_shell_mode(grid, (cfg["model"]["mu1"], cfg["model"]["mu2"]))
    return grid, psi, K, freqs


def cmd_decompose(cfg):
    from .lagdecomp import band_decompose, classes_to_superpositions, group_classes, orthogonality_ratio, \
        reconstruction_residual

    grid, psi, K, freqs = _decompose_state(cfg)
    dcfg = cfg["decomposition"]
    gamma, eps = as_float(dcfg["gamma"]), as_float(dcfg["epsilon"])
    mu_h = grid.h * grid.k0 * math.sqrt(K)
    bd = band_decompose(psi, mu_h, eps)
    cm = group_classes(bd, gamma, eps)
    sups = classes_to_superpositions(bd, cm)
    members = sorted(int(i) for v in cm.classes.values() for i in v)
    partition = members == list(range(bd.count))
    labels = len(bd.labels())
    ratio = orthogonality_ratio(sups, psi)
    rec = reconstruction_residual(bd, sups)
    meas = {"K": K, "h": grid.h, "mu_h": mu_h, "kept": bd.count, "count_constant": bd.count_constant,
            "N_h": cm.N_h, "classes": cm.count, "expected_classes": labels * cm.N_h ** (grid.d - 1),
            "superpositions": len(sups), "min_separation": min(s.separation_certificate for s in sups),
            "h_gamma": grid.h**gamma, "reconstruction_residual": rec, "dropped_mass": bd.residual_norm,
            "orthogonality_ratio": ratio, "frame": "sector rotation (torus normal form)"}
    flags = {"reconstruction": rec <= 1e-8, "partition": partition and cm.count == meas["expected_classes"]}
    if gamma > 0.5:
        flags["near_orthogonality"] = ratio <= 1 + 1e-6
    return ExperimentReport("decompose", cfg, cfg["perturbation"]["seeds"], [meas], {}, flags, now_stamp())


def cmd_propagate(cfg):
    from .hamflow import metric_family
    from .phasegrid import GridSpec
    from .qprop import build_propagator, conjugate_laplacian, hamiltonian_operator
    from .randsymbol import RandomSymbol, build_covering, draw_omega

    d, N, L = cfg["domain"]["d"], cfg["domain"]["N"], cfg["domain"]["L"]
    pert, m = cfg["perturbation"], cfg["model"]
    beta = as_float(pert["beta"])
    alpha = as_float(pert["alpha"]) if pert["alpha"] is not None else 2 * beta + 0.1
    meas, flags = [], {}
    method = "eigh" if d == 1 else "chebyshev"
    for h in cfg["ladder"]["hs"]:
        grid = GridSpec(d, N, h, L)
        cov = build_covering(m["mu1"], m["mu2"], beta, h, grid)
        rs = RandomSymbol(cov, draw_omega(cov, pert["seeds"][0], pert["density"]))
        delta = h**alpha
        H = hamiltonian_operator(grid, metric_family(m["metric"], d, L=L), delta, rs)
        prop = build_propagator(H, method)
        row = {"h": h, "delta": delta, "method": method}
        if method == "eigh":
            row["unitarity_error"] = prop.unitarity_error()
            U = prop.matrix(m["t"])
            row["propagator_unitarity"] = float(np.linalg.norm(U.conj().T @ U - np.eye(len(U)), 2))
            conj = conjugate_laplacian(prop, m["t"])
            row["spectrum_error"] = conj.spectrum_error()
            row["difference_norm"] = conj.difference_norm()
            flags[f"h={h}"] = row["propagator_unitarity"] <= 1e-10 and row["spectrum_error"] <= 1e-9
        else:
            from .expstats import worst_shell_mode

            psi, K, _ = worst_shell_mode(grid, (m["mu1"], m["mu2"]))
            out = prop.apply(m["t"], psi)
            row["norm_drift"] = abs(out.l2() - psi.l2()) / psi.l2()
            row["spectrum_error"] = None
            flags[f"h={h}"] = row["norm_drift"] <= 1e-10
        meas.append(row)
    return ExperimentReport("propagate", cfg, pert["seeds"], meas, {}, flags, now_stamp())


def _opnorm(M):
    """Spectral norm; the largest singular value alone for large matrices."""
    if M.shape[0] <= 512:
        return float(np.linalg.norm(M, 2))
    from scipy.sparse.linalg import svds

    return float(svds(M, k=1, return_singular_vectors=False, random_state=0)[0])


def cmd_quantize_check(cfg):
    from .fitting import loglog_fit
    from .pdo import COMPACT, Symbol, quantize
    from .phasegrid import GridSpec

    d, N, L = cfg["domain"]["d"], cfg["domain"]["N"], cfg["domain"]["L"]
    # symbols centred at xi = 0 so the widest ladder step stays alias free
    xi0 = 0.0
    meas = []
    for h in cfg.get("quantize", {}).get("hs", cfg["ladder"]["hs"]):
        grid = GridSpec(d, N, h, L)

        def gauss(c, w, wxi=0.45):
            def f(*args):
                x, xi = args[:d], args[d:]
                r2 = sum((np.mod(xx - c + L / 2, L) - L / 2) ** 2 for xx in x) / w**2
                r2 = r2 + ((xi[0] - xi0) ** 2 + sum(v**2 for v in xi[1:])) / wxi**2
                return np.where(r2 < 42, np.exp(-0.5 * r2), 0.0)
            return f

        from .pdo import phase_mesh

        x, xi = phase_mesh(grid)
        mesh = np.broadcast_arrays(*x, *xi)
        a = Symbol(grid, gauss(np.pi, 0.6)(*mesh), order=COMPACT, real=True)
        b = Symbol(grid, gauss(np.pi + 0.3, 0.6)(*mesh), order=COMPACT, real=True)
        A, B = quantize(a), quantize(b)
        AB = quantize(Symbol(grid, a.samples * b.samples, order=COMPACT, real=True))
        herm = float(np.max(np.abs(A.matrix - A.matrix.conj().T)))
        comp = _opnorm(A.matrix @ B.matrix - AB.matrix)
        meas.append({"h": h, "hermiticity_error": herm, "composition_error": comp})
    fits, flags = {}, {"hermitian": all(r["hermiticity_error"] <= 1e-12 for r in meas)}
    if len(meas) > 1:
        f = loglog_fit([r["h"] for r in meas], [r["composition_error"] for r in meas])
        fits["composition_slope"] = f["slope"]
        fits["composition_r2"] = f["r2"]
        flags["composition_rate"] = f["slope"] >= 0.8
    return ExperimentReport("quantize-check", cfg, cfg["perturbation"]["seeds"], meas, fits, flags, now_stamp())


def _concentration_block(cfg):
    c = dict(cfg["concentration"])
    c.setdefault("hs", [2.0**-5, 2.0**-6, 2.0**-7, 2.0**-8])
    c.setdefault("alpha", cfg["perturbation"]["alpha"] or "5/7")
    c.setdefault("beta", cfg["perturbation"]["beta"])
    c.setdefault("epsilon", cfg["decomposition"]["epsilon"])
    c.setdefault("t", cfg["model"]["t"])
    c.setdefault("mu", [cfg["model"]["mu1"], cfg["model"]["mu2"]])
    c.setdefault("draws", cfg["run"]["draws"])
    c.setdefault("x0", 1.0)
    c.setdefault("max_sheets", None)
    return c


def run_concentration(c, seed, density="raised-cosine"):
    """The ``d = 1`` Z-statistics pipeline over the concentration ladder."""
    alpha, beta, eps = _exact(c["alpha"]), _exact(c["beta"]), as_float(c["epsilon"])
    budget = gamma_prime(alpha, beta, 1)
    samples, norms, meta = [], [], []
    for h in c["hs"]:
        zs, gn, info = separated_sheet_pipeline(h, float(beta), eps, alpha=float(alpha), t=c["t"], mu=tuple(c["mu"]),
                                                x0=c["x0"], M=c["draws"], seed=seed, density=density,
                                                max_sheets=c["max_sheets"])
        samples.append(zs)
        norms.append(gn)
        meta.append(info)
    ind = independence_check(samples)
    conc = concentration_check(samples, c["hs"], norms, float(budget.Gamma), float(beta), eps, d=1)
    return budget, samples, ind, conc, meta


def cmd_concentration(cfg):
    c = _concentration_block(cfg)
    seed = cfg["perturbation"]["seeds"][0]
    budget, samples, ind, conc, meta = run_concentration(c, seed, cfg["perturbation"]["density"])
    M = c["draws"]
    meas = {"sheets": meta, "disjoint_fraction": ind["disjoint_fraction"],
            "max_abs_corr_disjoint": ind["max_abs_corr_disjoint"], "corr_bound": 4 / math.sqrt(M),
            "concentration": conc, "budget": budget.to_dict()}
    flags = {"independence_disjoint": ind["disjoint_fraction"] == 1.0,
             "independence_corr": ind["max_abs_corr_disjoint"] <= 4 / math.sqrt(M),
             "tail": conc["tail_ok"]}
    if "slope" in conc:
        flags["mean_slope"] = abs(conc["slope"] - conc["predicted_slope"]) <= 0.3
    else:
        flags["mean_slope"] = False
    return ExperimentReport("concentration", cfg, [seed], [meas], {}, flags, now_stamp())


def cmd_supnorm_sweep(cfg, parallel=1):
    d = cfg["domain"]
    s = dict(cfg.get("sweep", {}))
    sw = {"d": d["d"], "N": d["N"], "hs": s.get("hs", cfg["ladder"]["hs"]),
          "mu": [cfg["model"]["mu1"], cfg["model"]["mu2"]], "t": cfg["model"]["t"],
          "alpha": cfg["perturbation"]["alpha"] or "5/7", "beta": cfg["perturbation"]["beta"],
          "density": cfg["perturbation"]["density"], "metric": cfg["model"]["metric"]}
    rep = supnorm_sweep(sw, seeds=cfg["perturbation"]["seeds"], parallel=parallel)
    rep.config = cfg
    rep.fits["sweep_config"] = sw
    return rep


def run(subcommand, cfg, parallel=1):
    if subcommand not in SUBCOMMANDS:
        raise ValueError(f"unknown subcommand {subcommand!r}")
    fn = {
        "validate": cmd_validate,
        "quantize-check": cmd_quantize_check,
        "egorov": cmd_egorov,
        "decompose": cmd_decompose,
        "propagate": cmd_propagate,
        "concentration": cmd_concentration,
        "supnorm-sweep": lambda c: cmd_supnorm_sweep(c, parallel),
        "exponents": cmd_exponents,
    }[subcommand]
    try:
        return fn(cfg)
    except (FeasibilityError, ConfigError):
        raise
    except Exception as exc:
        raise StageError(subcommand, exc) from exc


def build_parser():
    p = argparse.ArgumentParser(prog="semitorus", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="config file, or a shipped name: " + ", ".join(SHIPPED))
    p.add_argument("--out", default=None, help=f"report directory (default ${OUT_ENV} or ./semitorus-reports)")
    p.add_argument("--parallel", type=int, default=None, help="worker threads for independent tasks")
    p.add_argument("--seed-offset", type=int, default=0, help="added to every declared seed")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.seed_offset:
        cfg["perturbation"]["seeds"] = [s + args.seed_offset for s in cfg["perturbation"]["seeds"]]
    parallel = args.parallel or cfg["run"]["parallel"]
    t0 = time.perf_counter()
    try:
        rep = run(args.subcommand, cfg, parallel)
    except FeasibilityError as e:
        print(f"feasibility error: {e}", file=sys.stderr)
        return 1
    except StageError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return 1
    out = Path(args.out or os.environ.get(OUT_ENV) or "semitorus-reports")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.subcommand}-{cfg['name']}.json"
    path.write_text(rep.to_json())
    if args.subcommand == "exponents":
        print(_format_exponents(rep))
    for k, v in rep.flags.items():
        print(f"{'PASS' if v else 'FAIL'} {k}")
    print(f"report: {path} sha256={rep.digest()} ({time.perf_counter() - t0:.1f}s)")
    return 0 if rep.passed else 1


if __name__ == "__main__":
    sys.exit(main())
