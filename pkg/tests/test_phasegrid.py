import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semitorus.phasegrid import (
    GridSpec,
    PhasePoint,
    WaveFunction,
    export_modulus_csv,
    fft_forward,
    fft_inverse,
    load_wavefunction,
    norms,
    save_wavefunction,
)

grids = st.builds(
    GridSpec,
    d=st.sampled_from([1, 2]),
    N=st.sampled_from([8, 16, 32]),
    h=st.floats(0.01, 1.0),
    L=st.sampled_from([2 * np.pi, 1.0, 5.0]),
)


def random_state(grid, seed):
    r = np.random.default_rng(seed)
    return WaveFunction(grid, r.standard_normal(grid.shape) + 1j * r.standard_normal(grid.shape))


def test_grid_validation():
    for bad in [dict(d=3, N=16, h=0.1), dict(d=1, N=12, h=0.1), dict(d=1, N=4, h=0.1), dict(d=1, N=16, h=0.0)]:
        with pytest.raises(ValueError):
            GridSpec(**bad)


def test_covector_lattice():
    g = GridSpec(1, 256, 1 / 16)
    assert g.xi_max == pytest.approx(128 / 16)
    assert g.dxi == pytest.approx(1 / 16)
    assert set(g.freq_axis()) == set(range(-128, 128))


def test_shell_check():
    g = GridSpec(1, 32, 1 / 16)
    assert not g.shell_resolved(1.21)
    with pytest.raises(ValueError, match="aliasing"):
        g.check_shell(1.21)
    GridSpec(1, 256, 1 / 16).check_shell(1.21)


def test_phase_point_reduced():
    p = PhasePoint([7.0, -1.0], [0.5, 0.2])
    assert np.all((p.x >= 0) & (p.x < 2 * np.pi))
    assert p.as_array().shape == (4,)


def test_constant_has_single_coefficient():
    g = GridSpec(1, 32, 0.1)
    c = fft_forward(WaveFunction(g, np.ones(32)))
    assert c[0] == pytest.approx(1.0)
    assert np.max(np.abs(c[1:])) < 1e-15


def test_plane_wave_coefficient_d2():
    g = GridSpec(2, 32, 0.1)
    c = fft_forward(WaveFunction.plane_wave(g, (3, 0)))
    assert abs(c[3, 0] - 1) < 1e-13
    c[3, 0] = 0
    assert np.max(np.abs(c)) < 1e-13


@given(grids, st.integers(0, 2**32 - 1))
def test_fft_round_trip(grid, seed):
    psi = random_state(grid, seed)
    back = fft_inverse(grid, fft_forward(psi))
    assert np.max(np.abs(back.values - psi.values)) <= 1e-12 * np.max(np.abs(psi.values))


@given(grids, st.integers(0, 2**32 - 1))
def test_parseval(grid, seed):
    psi = random_state(grid, seed)
    c = fft_forward(psi)
    lhs = grid.volume * np.sum(np.abs(c) ** 2)
    assert lhs == pytest.approx(psi.l2() ** 2, rel=1e-12)


@given(grids, st.integers(0, 2**32 - 1))
def test_linf_dominates_normalized_l2(grid, seed):
    n = norms(random_state(grid, seed))
    assert n["linf"] >= n["l2"] / np.sqrt(grid.volume) * (1 - 1e-12)


def test_norms_of_constant_and_plane_wave():
    g = GridSpec(1, 64, 0.1)
    n = norms(WaveFunction(g, np.ones(64)))
    assert n["l2"] == pytest.approx(np.sqrt(2 * np.pi))
    assert n["linf"] == pytest.approx(1.0)
    assert norms(WaveFunction.plane_wave(g, 3))["linf"] == pytest.approx(1.0)


def test_sum_of_plane_waves():
    g = GridSpec(1, 64, 0.1)
    K = 5
    psi = WaveFunction(g, sum(WaveFunction.plane_wave(g, n).values for n in [1, 4, -7, 9, 12]))
    n = norms(psi)
    assert n["l2"] == pytest.approx(np.sqrt(K) * np.sqrt(2 * np.pi))
    assert n["linf"] == pytest.approx(K)  # all phases align at x = 0
    # dense-sampling oracle: the continuum maximum is also K
    x = np.linspace(0, 2 * np.pi, 20001)
    dense = np.abs(sum(np.exp(1j * k * x) for k in [1, 4, -7, 9, 12]))
    assert dense.max() == pytest.approx(K)


def test_non_finite_rejected():
    g = GridSpec(1, 8, 0.1)
    with pytest.raises(ValueError):
        WaveFunction(g, np.array([np.nan] + [0] * 7))
    with pytest.raises(ValueError, match="non-finite"):
        fft_inverse(g, np.array([np.inf] + [0] * 7))


def test_wavefunction_is_immutable():
    psi = WaveFunction(GridSpec(1, 8, 0.1), np.ones(8))
    with pytest.raises(ValueError):
        psi.values[0] = 2


def test_serialization_round_trip(tmp_path):
    g = GridSpec(2, 16, 0.25)
    psi = random_state(g, 7)
    save_wavefunction(psi, tmp_path / "state")
    back = load_wavefunction(tmp_path / "state")
    assert back.grid == g
    assert np.max(np.abs(back.values - psi.values)) < 1e-5 * np.max(np.abs(psi.values))
    assert (tmp_path / "state.bin").stat().st_size == 8 * g.size
    export_modulus_csv(psi, tmp_path / "mod.csv")
    table = np.loadtxt(tmp_path / "mod.csv", delimiter=",", skiprows=1)
    assert table.shape == (g.size, 3)
    assert np.allclose(table[:, 2], np.abs(psi.flat()))
