import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from oat_dissim import analysis
from oat_dissim.cli import EXIT_CAP, EXIT_FIT, EXIT_USAGE, RATE_KEYS, main
from oat_dissim.sweep import (HEADER, ManifestMismatch, SweepGrid, SweepRecord, manifest_path,
                              read_records, run_sweep, write_records)

DATA = Path(__file__).parent / "data"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# --- rates ---

def test_rates_json(capsys):
    code, out, _ = run(capsys, "rates", "--scheme", "scf", "--chi", 1, "--eta", 2, "--lambda", 0.5)
    assert code == 0
    d = json.loads(out)
    assert tuple(d) == RATE_KEYS
    assert d["gamma_minus"] == 0.5 and d["Gamma_phi"] == 2.0


def test_rates_acf(capsys):
    code, out, _ = run(capsys, "rates", "--scheme", "acf", "--chi", 1, "--eta", 2, "--lambda", 0.5)
    assert code == 0 and json.loads(out)["gamma_plus"] == 0.0


def test_rates_physical_flags(capsys):
    code, out, _ = run(capsys, "rates", "--scheme", "tc", "--g", 10, "--kappa", 1, "--Delta", 100,
                       "--gamma-rel", 0.2, "--gamma-phi", 0.4)
    assert code == 0
    d = json.loads(out)
    assert d["chi"] == pytest.approx(1.0) and d["gamma_z"] == pytest.approx(0.2)


def test_rates_missing_lambda(capsys):
    code, _, err = run(capsys, "rates", "--scheme", "scf", "--eta", 2)
    assert code == EXIT_USAGE and "--lambda" in err


def test_bad_flags_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["rates", "--scheme", "xyz", "--eta", "1", "--lambda", "1"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["rates", "--scheme", "scf", "--eta", "abc", "--lambda", "1"])
    assert exc.value.code == 2


# --- simulate ---

def test_simulate_ideal_dicke(capsys):
    code, out, _ = run(capsys, "simulate", "--scheme", "scf", "--engine", "DICKE", "--N", 100)
    assert code == 0
    d = json.loads(out)
    assert d["gain"] == pytest.approx(math.sqrt(100 / math.e), rel=0.05)


def test_simulate_rejects_zero_phi(capsys):
    code, _, err = run(capsys, "simulate", "--scheme", "scf", "--N", 10, "--phi", 0)
    assert code == EXIT_USAGE and "phi" in err


def test_simulate_cap(capsys):
    code, _, err = run(capsys, "simulate", "--scheme", "scf", "--engine", "DICKE", "--N", 500)
    assert code == EXIT_CAP
    code, _, _ = run(capsys, "simulate", "--scheme", "scf", "--engine", "ORACLE", "--N", 9)
    assert code == EXIT_CAP


def test_simulate_pinned_regression(capsys):
    code, out, _ = run(capsys, "simulate", "--scheme", "scf", "--engine", "DICKE", "--N", 10,
                       "--eta", 1, "--lambda", 0.5, "--mode", "TWIST_UNTWIST", "--t-sqz", 0.2)
    assert code == 0
    got = json.loads(out)
    want = json.loads((DATA / "simulate_scf_n10.json").read_text())
    assert got.keys() == want.keys()
    for k, v in want.items():
        if isinstance(v, float):
            assert got[k] == pytest.approx(v, rel=1e-8), k
        else:
            assert got[k] == v, k


def test_simulate_trajectory(capsys, tmp_path):
    path = tmp_path / "traj.csv"
    code, _, _ = run(capsys, "simulate", "--scheme", "tc", "--N", 50, "--eta", 5, "--lambda", 1,
                     "--trajectory", path)
    assert code == 0
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "S_x", "S_y", "S_z", "C_xx", "C_xy", "C_xz", "C_yy", "C_yz", "C_zz"]
    assert float(rows[1][1]) == pytest.approx(25.0, rel=1e-5)
    assert len(rows) > 400


def test_config_file_and_override(capsys, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"scheme": "SCF", "N": 40, "eta": 2.0, "lam": 0.5}))
    code, out, _ = run(capsys, "simulate", "--config", cfg, "--scheme", "scf", "--N", 40)
    assert code == 0
    base = json.loads(out)
    code, out, _ = run(capsys, "simulate", "--config", cfg, "--scheme", "scf", "--N", 40,
                       "--eta", 20)
    assert json.loads(out)["gain"] > base["gain"]
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--config", str(cfg), "--scheme", "scf", "--N", "40"])
    assert exc.value.code == 2


# --- sweep, manifest, CSV ---

def small_grid(**kw):
    return SweepGrid(**({"schemes": ["SCF"], "Ns": [30, 60], "etas": [0.3, 3.0, math.inf],
                         "n_lambda": 8} | kw))


def test_sweep_header_and_rows(tmp_path):
    out = tmp_path / "s.csv"
    manifest = run_sweep(small_grid(), out, workers=1)
    assert manifest.complete
    rows = list(csv.reader(out.open()))
    assert rows[0] == HEADER
    assert len(rows) == 1 + 6
    recs = read_records(out)
    for N in (30, 60):
        g = [r.G for r in recs if r.N == N]
        assert g == sorted(g)


def test_sweep_resume_matches_uninterrupted(tmp_path):
    grid = small_grid()
    full = tmp_path / "full.csv"
    run_sweep(grid, full, workers=1)
    part = tmp_path / "part.csv"
    m = run_sweep(grid, part, workers=1, limit=3)
    assert not m.complete and m.completed_prefix() == 3
    # an interrupted write leaves a partial trailing line behind
    with open(part, "a") as fh:
        fh.write("SCF,MFT,60,0.3,garbage")
    m = run_sweep(grid, part, resume=True, workers=1)
    assert m.complete
    assert part.read_bytes() == full.read_bytes()


def test_resume_rejects_changed_grid(tmp_path):
    out = tmp_path / "s.csv"
    run_sweep(small_grid(), out, workers=1, limit=1)
    with pytest.raises(ManifestMismatch):
        run_sweep(small_grid(etas=[0.3, 3.0]), out, resume=True, workers=1)


def test_sweep_deterministic_and_worker_independent(tmp_path):
    grid = small_grid(Ns=[30], etas=[0.3, 3.0])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run_sweep(grid, a, workers=1)
    run_sweep(grid, b, workers=2)
    assert a.read_bytes() == b.read_bytes()


def test_csv_round_trip(tmp_path):
    recs = [SweepRecord("TC", "MFT", 10, 0.1 / 3, 0.7, 0.01, 1.2345678901234567, -0.5,
                        1e-300, math.nan, 2.5, ["lambda-boundary", "t-boundary"]),
            SweepRecord("SCF", "DICKE", 20, math.inf, math.nan, 0.2, 3.0, math.nan, 0.0, 1.0,
                        4.0, [])]
    p1, p2 = tmp_path / "1.csv", tmp_path / "2.csv"
    write_records(p1, recs)
    write_records(p2, read_records(p1))
    assert p1.read_bytes() == p2.read_bytes()
    back = read_records(p1)
    assert back[0].eta == recs[0].eta and back[0].flags == recs[0].flags
    assert math.isinf(back[1].eta) and back[1].flags == []


def test_cli_sweep(capsys, tmp_path):
    out = tmp_path / "cli.csv"
    code, stdout, _ = run(capsys, "sweep", "--scheme", "scf", "--N", 30, "--eta", "1,10",
                          "--include-ideal", "--n-lambda", 8, "--out", out, "--workers", 1)
    assert code == 0
    assert json.loads(stdout)["points"] == 3
    code, _, _ = run(capsys, "sweep", "--scheme", "scf", "--N", 30, "--eta", "1,10",
                     "--n-lambda", 8, "--out", out, "--workers", 1, "--resume")
    assert code == EXIT_USAGE
    assert manifest_path(out).exists()


# --- fit ---

def synthetic_sweep(path, Ns, fn):
    recs = []
    for N in Ns:
        for x in np.geomspace(1e-2, 1e3, 21):
            g = float(fn(x))
            recs.append(SweepRecord("SCF", "MFT", N, x / math.sqrt(N), 0.5, 0.1, g, math.nan,
                                    0.0, 1.0, 1.0, []))
        recs.append(SweepRecord("SCF", "MFT", N, math.inf, math.nan, 0.1, 1.0, math.nan, 0.0,
                                1.0, 1.0, []))
    write_records(path, recs)


def test_fit_exponent_synthetic(capsys, tmp_path):
    path = tmp_path / "syn.csv"
    synthetic_sweep(path, [100, 1000, 10_000], lambda x: analysis.tanh_model(x, 1.2, 0.7))
    code, out, _ = run(capsys, "fit", "--input", path, "--kind", "exponent", "--f", 0.5)
    assert code == 0
    d = json.loads(out)
    assert d["params"]["alpha"] == pytest.approx(0.5, abs=1e-9)


def test_fit_tanh_synthetic(capsys, tmp_path):
    path = tmp_path / "syn.csv"
    synthetic_sweep(path, [100, 1000], lambda x: analysis.tanh_model(x, 1.31, 0.64))
    code, out, _ = run(capsys, "fit", "--input", path, "--kind", "tanh")
    assert code == 0
    d = json.loads(out)
    assert d["params"]["a"] == pytest.approx(1.31, abs=1e-6)
    assert d["params"]["b"] == pytest.approx(0.64, abs=1e-6)
    assert set(d) >= {"params", "stderr", "window"}


@pytest.mark.parametrize("content", ["", ",".join(HEADER) + "\n", "a,b,c\n1,2,3\n"])
def test_fit_unusable_data(capsys, tmp_path, content):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    code, _, _ = run(capsys, "fit", "--input", path)
    assert code == EXIT_FIT


def test_fit_missing_file(capsys, tmp_path):
    code, _, _ = run(capsys, "fit", "--input", tmp_path / "nope.csv")
    assert code == EXIT_FIT


# --- squeeze, figure ---

def test_squeeze(capsys):
    code, out, _ = run(capsys, "squeeze", "--scheme", "scf", "--N", 200, "--eta", 1.0,
                       "--n-lambda", 12)
    assert code == 0
    d = json.loads(out)
    assert 0 < d["xi_R_sq"] < 1


@pytest.mark.parametrize("name", ["fig1", "fig3", "fig4", "fig5", "fig6", "figB", "figD"])
def test_figure_presets(capsys, tmp_path, name):
    code, out, _ = run(capsys, "figure", name, "--out-dir", tmp_path)
    assert code == 0
    meta = json.loads((tmp_path / f"{name}.grid.json").read_text())
    assert meta == json.loads(out)
    assert meta["figure"] == name and meta["Ns"] and meta["etas"]
