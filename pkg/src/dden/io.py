"""Persistence in binary form, with JSON and CSV side outputs.

Binary layouts (all little-endian):

* DDEN1 ensemble: magic (8 bytes), T_max (f64), N, n_paths, d, seed (u64),
  then the increments as row-major f64 (path, step, component).
* DSRF1 surface: magic, T_max (f64), N, n_paths (u64), model id (16 bytes,
  NUL padded), seed, d, R, flags (u64), record indices (R x u64), JSON
  parameter block (u64 length + UTF-8), then one record per path: alpha
  (R x N), tail (R), and the diagnostics block diag (N), surv (N + 1),
  zeta_F, adjust (R), neg_count, inner_se (R).
* DCHG1 changed model: magic, JSON header (u64 length + UTF-8) naming the
  arrays and shapes, then the arrays as f64 in header order.
"""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .grid import PathEnsemble, TimeGrid
from .models import DensitySurfaceEnsemble, model_from_params

MAGIC_ENSEMBLE = b"DDEN1\x00\x00\x00"
MAGIC_SURFACE = b"DSRF1\x00\x00\x00"
MAGIC_CHANGE = b"DCHG1\x00\x00\x00"
_CHUNK = 512


class FormatError(OSError):
    """File is not a valid dden artifact."""


def _json_block(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    return struct.pack("<Q", len(raw)) + raw


def _read_json_block(f) -> dict:
    (length,) = struct.unpack("<Q", _read(f, 8))
    return json.loads(_read(f, length).decode())


def _read(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated file")
    return b


def _magic(f, expected: bytes):
    if _read(f, 8) != expected:
        raise FormatError(f"bad magic, expected {expected[:5].decode()}")


# ---------------------------------------------------------------------------
# ensembles


def write_ensemble(ens: PathEnsemble, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC_ENSEMBLE)
        f.write(struct.pack("<dQQQQ", ens.grid.T_max, ens.grid.N, ens.n_paths, ens.d,
                            ens.seed & 0xFFFFFFFFFFFFFFFF))
        np.ascontiguousarray(ens.increments, dtype="<f8").tofile(f)


def read_ensemble(path) -> PathEnsemble:
    with open(path, "rb") as f:
        _magic(f, MAGIC_ENSEMBLE)
        T_max, N, n, d, seed = struct.unpack("<dQQQQ", _read(f, 40))
        data = np.frombuffer(_read(f, 8 * N * n * d), dtype="<f8").reshape(n, N, d)
    return PathEnsemble(TimeGrid(T_max, N), data.astype(float), int(seed))


# ---------------------------------------------------------------------------
# surfaces


def _surface_dtype(R: int, N: int) -> np.dtype:
    return np.dtype([("alpha", "<f8", (R, N)), ("tail", "<f8", (R,)), ("diag", "<f8", (N,)),
                     ("surv", "<f8", (N + 1,)), ("zeta_F", "<i8"), ("adjust", "<f8", (R,)),
                     ("neg_count", "<i8"), ("inner_se", "<f8", (R,))])


def write_surface(surface: DensitySurfaceEnsemble, path) -> None:
    g = surface.grid
    n, N, R = surface.n_paths, g.N, surface.record.shape[0]
    mid = surface.model_id.encode()[:16].ljust(16, b"\x00")
    flags = 1 if surface.inner_se is not None else 0
    dt = _surface_dtype(R, N)
    with open(path, "wb") as f:
        f.write(MAGIC_SURFACE)
        f.write(struct.pack("<dQQ", g.T_max, N, n))
        f.write(mid)
        f.write(struct.pack("<QQQQ", surface.seed & 0xFFFFFFFFFFFFFFFF, surface.d, R, flags))
        np.asarray(surface.record, dtype="<u8").tofile(f)
        f.write(_json_block(sanitize(surface.params)))
        for s in range(0, n, _CHUNK):
            e = min(n, s + _CHUNK)
            buf = np.zeros(e - s, dtype=dt)
            buf["alpha"] = surface.alpha[s:e]
            buf["tail"] = surface.tail[s:e]
            buf["diag"] = surface.diag_alpha[s:e]
            buf["surv"] = surface.surv[s:e]
            buf["zeta_F"] = surface.zeta_F[s:e]
            buf["adjust"] = surface.adjust[s:e]
            buf["neg_count"] = surface.neg_count[s:e]
            if surface.inner_se is not None:
                buf["inner_se"] = surface.inner_se[s:e]
            buf.tofile(f)


def read_surface(path) -> DensitySurfaceEnsemble:
    with open(path, "rb") as f:
        _magic(f, MAGIC_SURFACE)
        T_max, N, n = struct.unpack("<dQQ", _read(f, 24))
        model_id = _read(f, 16).rstrip(b"\x00").decode()
        seed, d, R, flags = struct.unpack("<QQQQ", _read(f, 32))
        record = np.frombuffer(_read(f, 8 * R), dtype="<u8").astype(np.int64)
        params = _read_json_block(f)
        dt = _surface_dtype(R, N)
        data = np.frombuffer(_read(f, dt.itemsize * n), dtype=dt)
    grid = TimeGrid(T_max, N)
    model = model_from_params(grid, model_id, params, seed)
    return DensitySurfaceEnsemble(
        grid, model_id, params, int(seed), record, data["alpha"].copy(), data["tail"].copy(),
        data["diag"].copy(), data["surv"].copy(), data["zeta_F"].astype(np.int64),
        data["adjust"].copy(), data["neg_count"].astype(np.int64),
        data["inner_se"].copy() if flags & 1 else None, int(d), model, None)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# changed models


def write_changed(changed, path) -> None:
    arrays = {"qnodes": changed.qnodes.astype(float), "QF": changed.QF, "SQ": changed.SQ,
              "LFQ": changed.LFQ, "lamFQ": changed.lamFQ, "excluded": changed.excluded.astype(float)}
    header = {"spec": changed.spec.to_dict(), "model_id": changed.surface.model_id,
              "seed": changed.surface.seed, "grid": changed.surface.grid.to_dict(),
              "arrays": [[k, list(v.shape)] for k, v in arrays.items()]}
    with open(path, "wb") as f:
        f.write(MAGIC_CHANGE)
        f.write(_json_block(sanitize(header)))
        for v in arrays.values():
            np.ascontiguousarray(v, dtype="<f8").tofile(f)


def read_changed(path) -> dict:
    with open(path, "rb") as f:
        _magic(f, MAGIC_CHANGE)
        header = _read_json_block(f)
        out = {"header": header}
        for name, shape in header["arrays"]:
            size = int(np.prod(shape))
            out[name] = np.frombuffer(_read(f, 8 * size), dtype="<f8").reshape(shape).copy()
    return out


# ---------------------------------------------------------------------------
# JSON and CSV


def sanitize(obj):
    """Make ``obj`` strict-JSON serializable (non-finite floats become strings)."""
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return sanitize(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else ("NaN" if np.isnan(x) else ("Infinity" if x > 0 else "-Infinity"))
    return obj


def provenance(surface: Optional[DensitySurfaceEnsemble] = None, model_id=None, seed=None,
               grid: Optional[TimeGrid] = None) -> dict:
    if surface is not None:
        model_id, seed, grid = surface.model_id, surface.seed, surface.grid
    return {"model_id": model_id, "seed": seed, "grid": None if grid is None else grid.to_dict(),
            "code_version": __version__}


def dumps(obj) -> str:
    return json.dumps(sanitize(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj))


def write_metadata(path, extra: dict) -> Path:
    """Sidecar ``<path>.meta.json``; the only place a timestamp is written."""
    meta = dict(extra)
    meta["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    out = Path(str(path) + ".meta.json")
    write_json(meta, out)
    return out


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def export_surface_csv(surface: DensitySurfaceEnsemble, path_index: int, out) -> None:
    """Long-format rows (t, theta, alpha) of one path plus its tail masses."""
    g = surface.grid
    rows = []
    for r, k in enumerate(surface.record):
        t = float(k * g.dt)
        for j in range(g.N):
            rows.append((t, float(j * g.dt), surface.alpha[path_index, r, j]))
        rows.append((t, "tail", surface.tail[path_index, r]))
    write_csv(out, ["t", "theta", "alpha"], rows)


def export_diagonal_csv(surface: DensitySurfaceEnsemble, bundle, path_index: int, out) -> None:
    g = surface.grid
    rows = []
    for k in range(g.N + 1):
        rows.append((float(k * g.dt), surface.surv[path_index, k],
                     surface.diag_alpha[path_index, k] if k < g.N else "",
                     bundle.lamF[path_index, k] if k < g.N else "",
                     bundle.M[path_index, k], bundle.A[path_index, k], bundle.L[path_index, k],
                     bundle.Lam[path_index, k]))
    write_csv(out, ["t", "S", "alpha_tt", "lambda_F", "M_F", "A_F", "L_F", "Lambda_F"], rows)
