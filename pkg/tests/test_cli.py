import json

import numpy as np
import pytest

from dden import io
from dden.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_VERIFY, run
from dden.grid import TimeGrid
from dden.suite import drifted_surface

SMALL = ["--set", "grid.T_max=2", "--set", "grid.N=20", "--set", "run.n_paths=400",
         "--set", "price.T=1", "--set", "model.cox.m=4"]


def _simulate(tmp_path, model="hjm_mult", name="s.bin"):
    out = tmp_path / name
    code = run(["simulate", *SMALL, "--set", f"model.id={model}", "--out", str(out)])
    assert code == EXIT_OK
    return out


@pytest.mark.parametrize("model", ["hjm_mult", "cox", "constant", "hjm_add"])
def test_simulate_writes_surface_and_metadata(tmp_path, model):
    out = _simulate(tmp_path, model)
    meta = json.loads(out.with_suffix(".json").read_text())
    assert meta["sha256"] == io.file_digest(out)
    assert meta["provenance"]["model_id"] == model
    assert (tmp_path / "s.bin.meta.json").exists()
    assert io.read_surface(out).n_paths == 400


def test_simulation_is_byte_reproducible(tmp_path):
    a = _simulate(tmp_path, name="a.bin")
    b = _simulate(tmp_path, name="b.bin")
    assert a.read_bytes() == b.read_bytes()
    ja = json.loads(a.with_suffix(".json").read_text())
    jb = json.loads(b.with_suffix(".json").read_text())
    ja.pop("surface"), jb.pop("surface")
    assert ja == jb


def test_price_decompose_change_export(tmp_path, capsys):
    s = _simulate(tmp_path)
    assert run(["price", *SMALL, "--surface", str(s), "--payoff", "unit",
                "--out", str(tmp_path / "p.json")]) == EXIT_OK
    rep = json.loads((tmp_path / "p.json").read_text())
    assert rep["report"]["estimate"] == pytest.approx(1.0, abs=1e-12)
    assert run(["price", *SMALL, "--surface", str(s), "--t", "0.5", "--paths", "0,1",
                "--m", "4", "--out", str(tmp_path / "p2.json")]) == EXIT_OK
    assert run(["decompose", *SMALL, "--surface", str(s), "--csv-dir", str(tmp_path / "csv"),
                "--out", str(tmp_path / "d.json")]) == EXIT_OK
    assert (tmp_path / "csv" / "decomposition.csv").exists()
    assert run(["change-measure", *SMALL, "--surface", str(s), "--kind", "immersion",
                "--out", str(tmp_path / "c.bin")]) == EXIT_OK
    summary = json.loads((tmp_path / "c.json").read_text())
    assert summary["immersion_metric"] <= 1e-10
    assert run(["export", *SMALL, "--surface", str(s), "--out-dir", str(tmp_path / "x")]) == EXIT_OK
    assert {p.name for p in (tmp_path / "x").iterdir()} == {"rows.csv", "diagonal.csv", "row_mass.csv"}
    assert run(["verify", *SMALL, "--surface", str(s), "--out", str(tmp_path / "v.json")]) == EXIT_OK


@pytest.mark.parametrize("argv", [["simulate", "--set", "grid.N=1"],
                                  ["simulate", "--set", "no.such=1"],
                                  ["simulate", "--bogus"],
                                  ["price", "--surface"]])
def test_invalid_input_exits_1(argv, tmp_path):
    assert run(argv + ["--out", str(tmp_path / "o")]) == EXIT_INVALID


def test_missing_file_exits_3(tmp_path):
    assert run(["price", "--surface", str(tmp_path / "missing.bin")]) == EXIT_IO
    (tmp_path / "junk.bin").write_bytes(b"junk")
    assert run(["export", "--surface", str(tmp_path / "junk.bin")]) == EXIT_IO


def test_rejected_change_exits_2(tmp_path):
    # the drift of Q^F needs a longer horizon and more paths to show
    big = ["--set", "grid.N=100", "--set", "run.n_paths=3000", "--set", "run.record_every=25"]
    s = tmp_path / "s.bin"
    assert run(["simulate", *big, "--out", str(s)]) == EXIT_OK
    code = run(["change-measure", *big, "--surface", str(s), "--kind", "after_default",
                "--sigma", "0.4", "--out", str(tmp_path / "c.bin")])
    assert code == EXIT_VERIFY
    assert (tmp_path / "c.bin.failure.json").exists()


def test_drifted_surface_fails_verification(tmp_path, capsys):
    g = TimeGrid(2.0, 20)
    p = tmp_path / "drift.bin"
    io.write_surface(drifted_surface(g, 2000, 3), p)
    code = run(["verify", *SMALL, "--surface", str(p), "--out", str(tmp_path / "v.json")])
    assert code == EXIT_VERIFY
    rep = json.loads((tmp_path / "v.json").read_text())
    assert "M_F_martingale" in rep["failed"] and "L_F_martingale" in rep["failed"]
    assert "failed identity: M_F_martingale" in capsys.readouterr().err
