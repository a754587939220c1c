import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semitorus.fitting import loglog_fit
from semitorus.hamflow import HamiltonianSpec, metric_family
from semitorus.pdo import PseudoOp, Symbol, operator_norm, quantize
from semitorus.phasegrid import GridSpec, WaveFunction
from semitorus.qprop import (
    build_propagator,
    conjugate_laplacian,
    egorov_ladder,
    egorov_residual,
    hamiltonian_operator,
    laplacian_operator,
    sobolev_constant,
)
from semitorus.randsymbol import RandomSymbol, build_covering, draw_omega

FLAT1 = metric_family("flat", 1)


def perturbed(h=1 / 16, N=128, delta=0.2, seed=0):
    g = GridSpec(1, N, h)
    cov = build_covering(0.81, 1.21, 0.25, h, g)
    rs = RandomSymbol(cov, draw_omega(cov, seed))
    H = hamiltonian_operator(g, FLAT1, delta, rs)
    return g, rs, H, build_propagator(H)


@pytest.fixture(scope="module")
def model():
    return perturbed()


def test_free_propagator_is_diagonal_phase():
    g = GridSpec(1, 64, 1 / 8)
    prop = build_propagator(hamiltonian_operator(g, FLAT1))
    xi = g.dxi * g.freq_axis()
    t = 0.7
    assert np.allclose(prop.matrix(t), np.diag(np.exp(-1j * t * xi**2 / 2 / g.h)), atol=1e-12)


@pytest.mark.parametrize("t", [0.1, 1.0, 5.0])
def test_unitarity(model, t):
    _, _, _, prop = model
    U = prop.matrix(t)
    assert np.linalg.norm(U.conj().T @ U - np.eye(len(U)), 2) <= 1e-10
    assert prop.unitarity_error() <= 1e-10 and prop.reconstruction_error() <= 1e-12


@settings(max_examples=10)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_group_law(s, t):
    _, _, _, prop = perturbed(N=64, h=1 / 8)
    assert np.allclose(prop.matrix(s) @ prop.matrix(t), prop.matrix(s + t), atol=1e-10)


@pytest.mark.parametrize("method", ["chebyshev", "krylov"])
def test_state_propagators_agree_with_eigh(model, method):
    g, _, H, prop = model
    other = build_propagator(H, method=method)
    psi = WaveFunction.from_function(g, lambda x: np.exp(1j * x / g.h) * np.exp(-((x - 3) ** 2))).normalized()
    a = prop.apply(1.0, psi).values
    b = other.apply(1.0, psi).values
    assert np.max(np.abs(a - b)) <= 1e-8
    with pytest.raises(ValueError, match="eigendecomposition"):
        other.matrix(1.0)


def test_rejects_non_hermitian():
    g = GridSpec(1, 16, 0.5)
    M = np.triu(np.ones((16, 16)))
    with pytest.raises(ValueError, match="Hermitian"):
        build_propagator(PseudoOp(g, M))
    with pytest.raises(ValueError, match="unknown"):
        build_propagator(laplacian_operator(g), method="pade")


def test_conjugation_unperturbed_is_identity():
    g = GridSpec(1, 64, 1 / 8)
    conj = conjugate_laplacian(build_propagator(hamiltonian_operator(g, FLAT1)), 1.3)
    assert conj.difference_norm() <= 1e-10


def test_conjugation_identity_and_bound(model):
    g, rs, H, prop = model
    delta, t = 0.2, 1.0
    conj = conjugate_laplacian(prop, t)
    assert conj.spectrum_error() <= 1e-9
    # P = |xi|^2/2 + delta Q commutes with U, so the difference is 2 delta (Q - U Q U*)
    Q = (H.matrix - 0.5 * laplacian_operator(g).matrix) / delta
    U = prop.matrix(t)
    exact = 2 * delta * (Q - U @ Q @ U.conj().T)
    assert np.max(np.abs(conj.result.matrix - conj.base.matrix - exact)) <= 1e-10
    qn = operator_norm(PseudoOp(g, Q), method="svd")
    assert conj.difference_norm() <= 4 * delta * qn + 1e-12


def test_sobolev_constants(model):
    _, _, _, prop = model
    for s in (1, 2):
        assert 1 - 1e-9 <= sobolev_constant(prop, 1.0, s) <= 3
    assert sobolev_constant(prop, 1.0, 0) == pytest.approx(1.0)


def test_egorov_unperturbed_rate():
    # fixed Gaussian symbol, free flow: the residual is O(h^2)
    spec = HamiltonianSpec(FLAT1)

    def a(x, xi):
        dx = np.mod(x[0] - np.pi + np.pi, 2 * np.pi) - np.pi
        return np.exp(-0.5 * ((dx / 0.6) ** 2 + ((xi[0] - 1.0) / 0.3) ** 2))

    hs = [1 / 8, 1 / 16, 1 / 32]
    res = []
    for h in hs:
        g = GridSpec(1, 256, h)
        prop = build_propagator(hamiltonian_operator(g, FLAT1))
        res.append(egorov_residual(prop, a, 1.0, HamiltonianSpec(FLAT1, xi_window=g.xi_max), 0.01))
    assert loglog_fit(hs, res)["slope"] >= 1.5


@pytest.mark.parametrize("delta_of_h", [lambda h: h**0.6, lambda h: 0.0], ids=["perturbed", "free"])
def test_order_one_correction_reduces_residual(delta_of_h):
    # the correction also absorbs the O(h) defect of the symmetrized quantization,
    # so it is nonzero even for the free flow
    out = egorov_ladder([1 / 8], 256, 0.25, delta_of_h, order=1, width=0.5)
    row = out["ladder"][0]
    assert row["residual_order1"] < 0.8 * row["residual"]


def test_free_transport_matches_sampling():
    g = GridSpec(1, 64, 1 / 8)
    spec = HamiltonianSpec(FLAT1, xi_window=g.xi_max)
    from semitorus.qprop import transported_symbol

    a = lambda x, xi: np.exp(-((x[0] - 3) ** 2) - 4 * (xi[0] - 1) ** 2)
    b = transported_symbol(g, a, spec, 0.5, 0.01)
    X, XI = np.meshgrid(g.axis(), g.dxi * g.freq_axis(), indexing="ij")
    direct = a([X + 0.5 * XI], [XI])
    assert np.allclose(b.reshape(direct.shape), direct, atol=1e-10)


def test_chebyshev_bounds_are_reproducible(model):
    _, _, H, prop = model
    a = build_propagator(H, method="chebyshev").bounds
    b = build_propagator(H, method="chebyshev").bounds
    assert a == b
    lo, hi = a
    assert lo <= prop.eigenvalues.min() and hi >= prop.eigenvalues.max()
