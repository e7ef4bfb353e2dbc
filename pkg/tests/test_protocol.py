import math

import numpy as np
import pytest

from oat_dissim import analysis, mft
from oat_dissim.params import EffectiveRates, EngineCapError, scheme_rates
from oat_dissim.protocol import (Mode, ProtocolSpec, WinelandUndefined, backend, estimation_error,
                                 gain_from_series, parabolic_peak, run_amplification,
                                 run_protocol, run_twist_untwist, sample_times, wineland)

IDEAL = EffectiveRates(chi=1.0)


def test_estimation_error_examples():
    N = 100
    G = math.sqrt(N / math.e)
    _, gmet = estimation_error(G, 0.0, 1.0, N)
    assert gmet == pytest.approx(N / (2 * math.e))
    dphi2, _ = estimation_error(1.0, 0.0, 0.0, N)
    assert dphi2 == pytest.approx(1 / N)
    _, gmet = estimation_error(10.0, 3.0, 1.0, N)
    assert gmet == pytest.approx(20.0)
    with pytest.raises(ValueError):
        estimation_error(0.0, 0.0, 1.0, N)


def test_estimation_error_clamps_sigma():
    _, gmet = estimation_error(1.0, -5.0, 0.0, 10)
    assert gmet == pytest.approx(1 / (1 - 0.99))


def test_wineland_examples():
    N = 20
    css = {"Sx": N / 2, "Sy": 0, "Sz": 0, "Cxx": 0, "Cxy": 0, "Cxz": 0, "Cyy": N / 4,
           "Cyz": 0, "Czz": N / 4}
    assert wineland(css, N) == pytest.approx(1.0)
    assert wineland(css | {"Cyy": N / 8}, N) < 1
    with pytest.raises(WinelandUndefined):
        wineland(css | {"Sx": 0.0}, N)


def test_spec_guards():
    for phi in (0.0, -1e-3, 0.1):
        with pytest.raises(ValueError):
            ProtocolSpec("SCF", "MFT", 10, IDEAL, phi=phi)
    with pytest.raises(ValueError):
        ProtocolSpec("SCF", "MFT", 10, IDEAL, t_sqz=0.1)
    with pytest.raises(ValueError):
        ProtocolSpec("SCF", "MFT", 10, IDEAL, t_sqz=0.1, t_unsqz=0.2, mode="TWIST_UNTWIST")
    with pytest.raises(EngineCapError):
        run_protocol(ProtocolSpec("SCF", "DICKE", 500, IDEAL))
    with pytest.raises(EngineCapError):
        run_protocol(ProtocolSpec("SCF", "ORACLE", 9, IDEAL))


def test_ideal_gain_dicke():
    r = run_protocol(ProtocolSpec("SCF", "DICKE", 30, IDEAL))
    assert r.G == pytest.approx(math.sqrt(30 / math.e), rel=0.02)
    assert r.t_opt == pytest.approx(1 / math.sqrt(30), rel=0.05)
    assert r.flags == []


def test_scf_zero_signal_has_no_background():
    for engine, N in (("MFT", 200), ("DICKE", 12)):
        spec = ProtocolSpec("SCF", engine, N, scheme_rates("SCF", 2.0, 0.5))
        series = run_amplification(spec)
        assert series.background is None
        be = backend(engine, N, spec.rates)
        bg, _ = be.run(be.initial(), 1.0, series.times)
        assert np.max(np.abs(bg[1])) < 1e-10


def test_tc_background_present():
    spec = ProtocolSpec("TC", "MFT", 100, scheme_rates("TC", 1.0, 1.0))
    series = run_amplification(spec)
    assert series.background is not None
    assert np.max(np.abs(series.background[1])) > 1e-3
    res = run_protocol(spec)
    assert math.isfinite(res.G_sub) and res.G_sub > 0


def test_gain_from_constant_series():
    t = np.linspace(0, 1, 11)
    N, phi = 50, 1e-3
    G, _, _ = gain_from_series(t, np.full(11, 0.7 * N * phi / 2), phi, N)
    assert G == pytest.approx(0.7)


def test_parabolic_peak_exact_for_parabola():
    x = np.linspace(0, 1, 9)
    y = 2 - (x - 0.41) ** 2
    xp, yp, edge = parabolic_peak(x, y)
    assert xp == pytest.approx(0.41) and yp == pytest.approx(2.0) and not edge


def test_first_peak_selection():
    x = np.linspace(0, 10, 201)
    y = np.exp(-(x - 2) ** 2) + 2 * np.exp(-(x - 7) ** 2)
    assert parabolic_peak(x, y, first=True)[0] == pytest.approx(2, abs=0.01)
    assert parabolic_peak(x, y)[0] == pytest.approx(7, abs=0.01)


def test_sample_times_strictly_increasing():
    t = sample_times(0.5, 401)
    assert t[0] == 0 and t[-1] == pytest.approx(0.5)
    assert np.all(np.diff(t) > 0)


def test_strong_dissipation_attenuates():
    # sqrt(N) eta = 0.04
    r = run_protocol(ProtocolSpec("SCF", "MFT", 400, scheme_rates("SCF", 0.002, 0.5)))
    assert r.G < 1


def test_twist_untwist_ideal_restores_projection_noise():
    N = 1000
    r = run_twist_untwist(ProtocolSpec("SCF", "MFT", N, IDEAL, t_sqz=0.01, mode="TWIST_UNTWIST"))
    assert abs(r.sigma_diss_sq) < 1e-3
    assert r.xi_R_sq < 0.1
    assert r.t_opt == pytest.approx(0.02)


def test_twist_untwist_zero_time_leaves_signal_in_sz():
    N, phi = 50, 1e-3
    r = run_protocol(ProtocolSpec("SCF", "MFT", N, IDEAL, t_sqz=0.0, mode="TWIST_UNTWIST",
                                  phi=phi))
    assert r.final["Sz"] / (N * phi / 2) == pytest.approx(1.0, rel=1e-6)
    assert r.G == pytest.approx(0.0, abs=1e-12)
    assert "no-gain" in r.flags
    assert r.sigma_diss_sq == pytest.approx(0.0, abs=1e-12)


def test_twist_untwist_orientation_independent_of_chi_sign():
    N = 200
    a = run_protocol(ProtocolSpec("SCF", "MFT", N, IDEAL, t_sqz=0.05, mode="TWIST_UNTWIST"))
    b = run_protocol(ProtocolSpec("SCF", "MFT", N, EffectiveRates(chi=-1.0), t_sqz=0.05,
                                  mode="TWIST_UNTWIST"))
    assert a.G > 1 and b.G == pytest.approx(a.G, rel=1e-8)


def test_ideal_metrological_gain_dicke():
    opt = analysis.maximize_gmet("SCF", 100, math.inf, engine="DICKE")
    assert opt.value == pytest.approx(analysis.gmet_ideal(100, 1.0), rel=0.02)
    assert opt.flags == []


def test_ideal_metrological_gain_large_n_mft():
    # the Gaussian closure underestimates the exact peak gain by several percent
    opt = analysis.maximize_gmet("SCF", 100_000, math.inf)
    assert opt.value == pytest.approx(analysis.gmet_ideal(1e5, 1.0), rel=0.15)
    assert opt.value < analysis.gmet_ideal(1e5, 1.0)


def test_acf_sz_constant_through_protocol():
    N, phi = 300, 1e-3
    spec = ProtocolSpec("ACF", "MFT", N, scheme_rates("ACF", 0.3, 1.0), t_sqz=0.04,
                        mode="TWIST_UNTWIST", phi=phi)
    r = run_protocol(spec)
    squeezed = mft.integrate(mft.coherent_moments(N), spec.rates, 1.0, t_end=0.04).final
    after_rotation = mft.rotate_about_y(squeezed, phi).S[2]
    assert r.final["Sz"] == pytest.approx(after_rotation, abs=1e-10)


def test_pinned_scf_twist_untwist():
    # Dicke N=10, SCF eta=1, lambda=1/2, t_sqz=0.2; checked against MFT to 3%
    spec = ProtocolSpec("SCF", "DICKE", 10, scheme_rates("SCF", 1.0, 0.5), t_sqz=0.2,
                        mode="TWIST_UNTWIST")
    r = run_protocol(spec)
    assert r.G == pytest.approx(0.22008354722174825, rel=1e-6)
    assert r.sigma_diss_sq == pytest.approx(0.7659280658626451, rel=1e-6)
    assert r.gmet == pytest.approx(0.017511940514837978, rel=1e-6)
    m = run_protocol(ProtocolSpec("SCF", "MFT", 10, spec.rates, t_sqz=0.2, mode="TWIST_UNTWIST"))
    assert m.G == pytest.approx(r.G, rel=0.03)


@pytest.mark.parametrize("mode, t", [("AMPLIFY_ONLY", 0.0), ("TWIST_UNTWIST", 0.3)])
def test_dicke_matches_oracle(mode, t):
    rates = scheme_rates("TC", 2.0, 0.7)
    a = run_protocol(ProtocolSpec("TC", "DICKE", 5, rates, t_sqz=t, mode=mode))
    b = run_protocol(ProtocolSpec("TC", "ORACLE", 5, rates, t_sqz=t, mode=mode))
    for key in ("G", "G_sub", "sigma_diss_sq", "gmet"):
        assert getattr(a, key) == pytest.approx(getattr(b, key), rel=1e-6)


def test_dicke_and_mft_agree_near_peak():
    rates = scheme_rates("SCF", 10.0, 1.0)
    a = run_protocol(ProtocolSpec("SCF", "DICKE", 40, rates))
    b = run_protocol(ProtocolSpec("SCF", "MFT", 40, rates))
    assert b.G == pytest.approx(a.G, rel=0.15)


def test_linearity_check_passes_at_default_phi():
    r = run_protocol(ProtocolSpec("SCF", "MFT", 1000, scheme_rates("SCF", 0.1, 0.5)))
    assert "linearity-fail" not in r.flags and "linearity-retry" not in r.flags


def test_linearity_retry_when_phi_too_large():
    r = run_protocol(ProtocolSpec("SCF", "MFT", 10_000, IDEAL, phi=0.05))
    assert "linearity-retry" in r.flags or "linearity-fail" in r.flags
    assert r.phi < 0.05


def test_result_serializes():
    r = run_protocol(ProtocolSpec("SCF", "MFT", 50, IDEAL))
    d = r.to_dict()
    assert set(d) >= {"G", "G_sub", "sigma_diss_sq", "xi_R_sq", "delta_phi_sq", "gmet", "t_opt"}
    assert all(isinstance(v, float) for k, v in d.items() if k != "flags")
    assert Mode.parse("twist_untwist") is Mode.TWIST_UNTWIST
