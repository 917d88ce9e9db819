import csv
import json

import numpy as np
import pytest

from dden import io
from dden.grid import TimeGrid, gaussian_ensemble
from dden.measure import immersion_change
from dden.decompositions import doob_meyer


def test_ensemble_round_trip(tmp_path):
    ens = gaussian_ensemble(TimeGrid(2.0, 20), 7, 2, 5)
    p = tmp_path / "e.bin"
    io.write_ensemble(ens, p)
    back = io.read_ensemble(p)
    np.testing.assert_array_equal(back.increments, ens.increments)
    assert back.seed == 5 and back.grid.N == 20 and back.d == 2


@pytest.mark.parametrize("name", ["hjm", "cox", "const"])
def test_surface_round_trip_is_byte_stable(name, hjm, cox, const, tmp_path):
    s = {"hjm": hjm, "cox": cox, "const": const}[name].subset(np.arange(30))
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    io.write_surface(s, a)
    back = io.read_surface(a)
    for attr in ("alpha", "tail", "diag_alpha", "surv", "record", "zeta_F", "adjust", "neg_count"):
        np.testing.assert_array_equal(getattr(back, attr), getattr(s, attr))
    assert back.model_id == s.model_id and back.seed == s.seed
    io.write_surface(back, b)
    assert io.file_digest(a) == io.file_digest(b)


def test_changed_model_round_trip(hjm, tmp_path):
    s = hjm.subset(np.arange(40))
    _, ch = immersion_change(s, doob_meyer(s))
    p = tmp_path / "c.bin"
    io.write_changed(ch, p)
    back = io.read_changed(p)
    np.testing.assert_array_equal(back["QF"], ch.QF)
    np.testing.assert_array_equal(back["lamFQ"], ch.lamFQ)
    assert back["header"]["model_id"] == "hjm_mult"


def test_bad_magic_and_truncation_raise(const, tmp_path):
    p = tmp_path / "s.bin"
    io.write_surface(const.subset(np.arange(5)), p)
    raw = p.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "short.bin").write_bytes(raw[:-10])
    with pytest.raises(io.FormatError):
        io.read_surface(tmp_path / "bad.bin")
    with pytest.raises(io.FormatError):
        io.read_surface(tmp_path / "short.bin")
    with pytest.raises(io.FormatError):
        io.read_ensemble(p)


def test_sanitize_makes_strict_json():
    obj = {"a": np.nan, "b": np.inf, "c": -np.inf, "d": np.float64(1.5), "e": np.int64(3),
           "f": np.array([1.0, np.nan]), "g": np.bool_(True)}
    text = io.dumps(obj)
    back = json.loads(text)
    assert back == {"a": "NaN", "b": "Infinity", "c": "-Infinity", "d": 1.5, "e": 3,
                    "f": [1.0, "NaN"], "g": True}


def test_csv_has_one_header_and_quotes(tmp_path):
    p = tmp_path / "x.csv"
    io.write_csv(p, ["name", "value"], [("a,b", 0.1), ('say "hi"', 2.0)])
    raw = p.read_bytes()
    assert raw.startswith(b"name,value\r\n")
    assert b'"a,b"' in raw and b'"say ""hi"""' in raw
    rows = list(csv.reader(p.open(newline="")))
    assert rows[0] == ["name", "value"] and float(rows[1][1]) == 0.1 and len(rows) == 3


def test_timestamp_only_in_sidecar(const, tmp_path):
    p = tmp_path / "s.bin"
    io.write_surface(const.subset(np.arange(3)), p)
    side = io.write_metadata(p, {"command": "test"})
    assert "created" in json.loads(side.read_text())
    assert "created" not in io.dumps(io.provenance(const))


def test_exports(hjm, tmp_path):
    s = hjm.subset(np.arange(4))
    io.export_surface_csv(s, 1, tmp_path / "rows.csv")
    io.export_diagonal_csv(s, doob_meyer(s), 1, tmp_path / "diag.csv")
    rows = list(csv.reader((tmp_path / "rows.csv").open(newline="")))
    assert len(rows) == 1 + s.record.shape[0] * (s.grid.N + 1)
    diag = list(csv.reader((tmp_path / "diag.csv").open(newline="")))
    assert diag[0][:3] == ["t", "S", "alpha_tt"] and len(diag) == s.grid.N + 2
