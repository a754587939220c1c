import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semitorus.hamflow import HamiltonianSpec, metric_family
from semitorus.lagdecomp import (
    CausticError,
    band_decompose,
    classes_to_superpositions,
    group_classes,
    n_classes,
    orthogonality_ratio,
    phase_integral,
    plane_sheet,
    radial_sheet,
    reconstruction_residual,
    shell_eigenmode,
    wkb_propagate,
)
from semitorus.phasegrid import GridSpec, WaveFunction
from semitorus.randsymbol import RandomSymbol, build_covering, draw_omega

FLAT1 = HamiltonianSpec(metric_family("flat", 1))
FLAT2 = HamiltonianSpec(metric_family("flat", 2))


@pytest.fixture(scope="module")
def shell():
    g = GridSpec(2, 64, 1 / 20)
    psi, n = shell_eigenmode(g, 325, phases=np.linspace(0, 3, 24))
    mu_h = g.h * g.k0 * math.sqrt(325)
    bd = band_decompose(psi, mu_h, 0.05)
    cm = group_classes(bd, 0.55)
    return g, psi, n, bd, cm, classes_to_superpositions(bd, cm)


def test_single_plane_wave():
    g = GridSpec(1, 64, 1 / 8)
    psi = WaveFunction.plane_wave(g, 8)
    bd = band_decompose(psi, g.h * g.k0 * 8, 0.05)
    assert bd.count == 1 and bd.freqs[0, 0] == 8
    assert abs(bd.coeffs[0] - 1) < 1e-12 and bd.residual_norm < 1e-12


def test_out_of_band_term_is_residual():
    g = GridSpec(1, 64, 1 / 8)
    vals = WaveFunction.plane_wave(g, 8).values + WaveFunction.plane_wave(g, -8).values
    vals = vals + 0.3 * WaveFunction.plane_wave(g, 20).values
    psi = WaveFunction(g, vals)
    with pytest.raises(ValueError, match="normal-form"):
        band_decompose(psi, 1.0, 0.05)
    bd = band_decompose(psi, 1.0, 0.05, check_normal_form=False)
    assert bd.count == 2
    assert bd.residual_norm == pytest.approx(0.3 * math.sqrt(2 * np.pi), rel=1e-12)
    # Parseval: kept and dropped parts split the norm
    assert bd.residual_norm**2 + g.volume * bd.coeff_l2() ** 2 == pytest.approx(psi.l2() ** 2, rel=1e-12)
    assert bd.cut_state().l2() == pytest.approx(psi.l2())


def test_band_window_error():
    g = GridSpec(1, 16, 1 / 8)
    with pytest.raises(ValueError, match="window"):
        band_decompose(WaveFunction.plane_wave(g, 7), g.h * g.k0 * 7, 0.05)
    with pytest.raises(ValueError, match="positive"):
        band_decompose(WaveFunction.plane_wave(g, 1), 0.0, 0.05)


def test_class_count_formula():
    assert n_classes(1e-2, 0.5, 0.05) == 12
    assert n_classes(1e-2, 1.05, 0.05) == 1


@given(st.floats(1e-4, 0.5), st.floats(0.05, 0.95), st.floats(0, 0.1))
def test_class_count_matches_power(h, gamma, eps):
    assert n_classes(h, gamma, eps) == math.floor(h ** (gamma - 1 - eps) + 1e-12)


def test_classes_partition_the_band(shell):
    g, psi, n, bd, cm, sups = shell
    assert bd.count == 24 and cm.N_h == 4
    assert cm.count == len(bd.labels()) * cm.N_h
    idx = np.concatenate([v for v in cm.classes.values()])
    assert sorted(idx.tolist()) == list(range(bd.count))


def test_superposition_certificates(shell):
    g, psi, n, bd, cm, sups = shell
    for s in sups:
        assert s.separation_certificate >= g.h * g.k0 * cm.N_h - 1e-12
        assert s.separation_certificate > g.h**0.55
    assert orthogonality_ratio(sups, psi) <= 1 + 1e-6
    assert orthogonality_ratio(sups, psi) == pytest.approx(1.0, abs=1e-12)
    assert reconstruction_residual(bd, sups) <= 1e-8
    s = sups[0]
    assert s.state(g).l2() ** 2 == pytest.approx(g.volume * np.sum(np.abs(s.weights) ** 2))
    assert all(sh.lam == pytest.approx(325 * (g.h * g.k0) ** 2) for _, sh in s.sheets(g, patch=np.zeros((1, 2))))


def test_separation_failure_is_reported(shell):
    g, psi, n, bd, cm, sups = shell
    with pytest.raises(RuntimeError, match="separation"):
        classes_to_superpositions(bd, group_classes(bd, 0.7))


def test_shell_eigenmode_errors():
    g = GridSpec(2, 16, 0.25)
    with pytest.raises(ValueError, match="sum of"):
        shell_eigenmode(g, 3)
    with pytest.raises(ValueError, match="window"):
        shell_eigenmode(g, 100)


def test_wkb_free_plane_sheet():
    g = GridSpec(1, 64, 1 / 8)
    sheet = plane_sheet(g, 8, patch=np.array([[0.5], [1.0], [2.0]]))
    out = wkb_propagate(sheet, FLAT1, 0.7, 0.01)
    xi = g.h * g.k0 * 8
    assert np.allclose(out.patch[:, 0], sheet.patch[:, 0] + 0.7 * xi, atol=1e-12)
    assert np.allclose(out.phi, xi * out.patch[:, 0] - 0.7 * xi**2 / 2, atol=1e-12)
    assert np.allclose(out.amplitude, 1.0)


def test_wkb_targets_by_shooting():
    sheet = radial_sheet([0, 0], 1.0, lambda y: np.ones(len(y)), np.array([[1.0, 0.2], [0.9, 0.5]]))
    targets = np.array([[1.8, 0.4], [1.6, 0.9]])
    out = wkb_propagate(sheet, FLAT2, 0.8, 0.01, targets=targets)
    assert np.allclose(out.patch, targets, atol=1e-9)


def test_wkb_radial_flux_conservation():
    th = np.linspace(0.1, 0.6, 7)
    r0 = 1.0
    patch = np.column_stack([r0 * np.cos(th), r0 * np.sin(th)])
    amp = lambda y: np.exp(-np.sum(y**2, axis=1))
    sheet = radial_sheet([0, 0], 1.0, amp, patch)
    t = 1.5
    out = wkb_propagate(sheet, FLAT2, t, 0.01)
    # |b0|^2 r dtheta is transported: r_t |b_t|^2 = r_0 |a|^2
    assert np.allclose((r0 + t) * np.abs(out.amplitude) ** 2, r0 * amp(patch) ** 2, rtol=1e-8)
    assert out.monochromatic_error() <= 1e-10


def test_wkb_caustic_on_converging_front():
    th = np.linspace(0.1, 0.4, 5)
    patch = np.column_stack([0.6 * np.cos(th), 0.6 * np.sin(th)])
    sheet = radial_sheet([0, 0], -1.0, lambda y: np.ones(len(y)), patch)
    with pytest.raises(CausticError, match="caustic"):
        wkb_propagate(sheet, FLAT2, 1.0, 0.01)


def test_wkb_errors():
    th = np.linspace(0, 3, 20)
    big = np.column_stack([3 + 2 * np.cos(th), 3 + 2 * np.sin(th)])
    sheet = radial_sheet([3, 3], 1.0, lambda y: np.ones(len(y)), big)
    with pytest.raises(ValueError, match="wrap-around"):
        wkb_propagate(sheet, FLAT2, 0.5, 0.01)
    small = radial_sheet([0, 0], 1.0, lambda y: np.ones(len(y)), np.array([[1.0, 0.0]]))
    with pytest.raises(NotImplementedError):
        wkb_propagate(small, FLAT2, 0.5, 0.01, order=1)
    with pytest.raises(ValueError, match="centre"):
        radial_sheet([0, 0], 1.0, lambda y: np.ones(len(y)), np.zeros((1, 2)))


class _Constant:
    """A bump so wide it is constant along every characteristic."""

    def evaluate(self, x, xi, derivs=0):
        v = np.ones(len(x))
        if derivs == 0:
            return v
        g = np.zeros((len(x), 2 * x.shape[1]))
        if derivs == 1:
            return v, g
        return v, g, np.zeros((len(x), 2 * x.shape[1], 2 * x.shape[1]))


def _d1_setup(delta=0.2, seed=0):
    g = GridSpec(1, 256, 1 / 16)
    cov = build_covering(0.81, 1.21, 0.25, 1 / 16, g)
    rs = RandomSymbol(cov, draw_omega(cov, seed))
    spec = HamiltonianSpec(metric_family("flat", 1), delta, rs, xi_window=g.xi_max)
    sheet = plane_sheet(g, 16, patch=np.linspace(0.3, 5.9, 9)[:, None])
    return g, cov, rs, spec, sheet


def test_phase_integral_unperturbed():
    g, cov, rs, spec, sheet = _d1_setup(delta=0.0)
    pc = phase_integral(sheet, spec, 1.0)
    assert np.all(pc.correction == 0) and np.array_equal(pc.phase, sheet.phi)


def test_phase_integral_constant_perturbation():
    sheet = plane_sheet(GridSpec(1, 64, 1 / 8), 8, patch=np.array([[1.0], [2.0]]))
    spec = HamiltonianSpec(metric_family("flat", 1), 0.3, _Constant())
    pc = phase_integral(sheet, spec, 2.0, step=0.01)
    assert np.allclose(pc.correction, -0.3 * 2.0, atol=1e-12)
    assert np.allclose(pc.grad_shift, 0)


def test_phase_integral_matches_direct_quadrature():
    g, cov, rs, spec, sheet = _d1_setup()
    pc = phase_integral(sheet, spec, 1.0, step=cov.radius / 100)
    coarse = phase_integral(sheet, spec, 1.0)
    # unperturbed backward characteristics are straight lines x - (t - s) xi
    s = np.linspace(0, 1, 20001)
    x = sheet.patch[:, 0][:, None] - (1 - s)[None] * sheet.grad[:, 0][:, None]
    vals = rs.evaluate(x.reshape(-1, 1), np.repeat(sheet.grad, len(s), axis=0)).reshape(x.shape)
    direct = np.trapezoid(vals, s, axis=1) if hasattr(np, "trapezoid") else np.trapz(vals, s, axis=1)
    assert np.allclose(pc.correction, -0.2 * direct, atol=1e-8)
    # the default step h^beta/10 keeps the Simpson error well below delta * h
    assert np.allclose(coarse.correction, pc.correction, atol=5e-5)


def test_mode_discrepancy_is_second_order():
    gaps = []
    for delta in (0.1, 0.05):
        _, _, _, spec, sheet = _d1_setup(delta=delta)
        a = phase_integral(sheet, spec, 1.0, mode="zeroth").correction
        b = phase_integral(sheet, spec, 1.0, mode="full").correction
        gaps.append(np.max(np.abs(a - b)))
    assert 3.0 <= gaps[0] / gaps[1] <= 5.0


def test_dependency_contains_quadrature_support():
    _, cov, _, spec, sheet = _d1_setup()
    pc = phase_integral(sheet, spec, 1.0)
    for k in range(len(sheet.patch)):
        used = set(pc.K[k].indices[pc.K[k].data != 0].tolist())
        assert used <= set(pc.dependency[k].tolist())
        assert len(pc.dependency[k]) >= 1


def test_phase_integral_errors():
    _, cov, _, spec, sheet = _d1_setup()
    with pytest.raises(ValueError, match="mode"):
        phase_integral(sheet, spec, 1.0, mode="first")
    with pytest.raises(ValueError, match="under-resolution"):
        phase_integral(sheet, spec, 1.0, step=cov.radius)
