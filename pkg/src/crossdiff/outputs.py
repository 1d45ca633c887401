"""Diagnostics CSV and field snapshots, both written atomically (temp file, then rename).

CSV layout: optional ``#`` comment lines carrying the effective config as
TOML, then the fixed header

    step,time,mass_1..mass_m,entropy,entropy_weighted,energy,diss_grad,
    diss_moll,min_value,est0_lhs,est0_rhs,picard_iters,linear_residual

and one row per step. Floats use ``repr`` (shortest round-trip form) and a
quantity that does not apply is an empty cell.

A snapshot is a directory ``step_<n>`` holding ``meta.json`` and one file
``species_<i>.f64`` per species: n^N little-endian doubles in row-major order.
"""

from __future__ import annotations

import csv
import io
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from . import grid as tg
from .entropy import SpeciesState
from .scheme import DiagnosticsRecord


def csv_header(m: int) -> list[str]:
    return (
        ["step", "time"]
        + [f"mass_{i + 1}" for i in range(m)]
        + ["entropy", "entropy_weighted", "energy", "diss_grad", "diss_moll", "min_value",
           "est0_lhs", "est0_rhs", "picard_iters", "linear_residual"]
    )


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def csv_row(rec: DiagnosticsRecord) -> list[str]:
    return [_cell(v) for v in (
        rec.step, rec.time, *rec.masses, rec.entropy, rec.entropy_weighted, rec.energy,
        rec.diss_grad, rec.diss_moll, rec.min_value, rec.est0_lhs, rec.est0_rhs,
        rec.picard_iters, rec.linear_residual,
    )]


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class DiagnosticsWriter:
    """Collects rows in memory and publishes the file on :meth:`close`.

    ``close`` is also called when the run fails, so partial diagnostics
    still appear (atomically) on disk.
    """

    def __init__(self, path, m: int, config_text: str | None = None):
        self.path = Path(path)
        self.m = m
        self._buf = io.StringIO()
        if config_text:
            for line in config_text.splitlines():
                self._buf.write(f"# {line}".rstrip() + "\n")
        self._csv = csv.writer(self._buf, lineterminator="\n")
        self._csv.writerow(csv_header(m))
        self.rows = 0

    def write(self, rec: DiagnosticsRecord) -> None:
        if len(rec.masses) != self.m:
            raise ValueError(f"record holds {len(rec.masses)} masses, writer expects {self.m}")
        self._csv.writerow(csv_row(rec))
        self.rows += 1

    def close(self) -> None:
        _atomic_write_bytes(self.path, self._buf.getvalue().encode("utf-8"))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_diagnostics(path) -> tuple[str, list[dict[str, str]]]:
    """Return (config echo text, rows as dicts of raw strings)."""
    comments = []
    body = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") and not body:
                comments.append(line[2:] if line.startswith("# ") else line[1:])
            else:
                body.append(line)
    rows = list(csv.DictReader(body))
    return "".join(comments), rows


def snapshot_name(step: int) -> str:
    return f"step_{step:08d}"


def write_snapshot(directory, state: SpeciesState, step: int | None = None) -> Path:
    """Write ``state`` as a snapshot directory and return its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = snapshot_name(step) if step is not None else "state"
    target = directory / name
    tmp = Path(tempfile.mkdtemp(dir=directory, prefix=f".{name}."))
    try:
        grid = state.grid
        meta = {
            "dim": grid.dim, "n": grid.n, "m": state.m, "time": float(state.time),
            "byte_order": "little", "dtype": "f64",
        }
        (tmp / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        for i, f in enumerate(state.fields):
            (tmp / f"species_{i + 1}.f64").write_bytes(np.ascontiguousarray(f, dtype="<f8").tobytes(order="C"))
        if target.exists():
            shutil.rmtree(target)
        os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return target


def read_snapshot(path) -> SpeciesState:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    if meta.get("byte_order") != "little" or meta.get("dtype") != "f64":
        raise ValueError(f"unsupported snapshot encoding in {path}")
    grid = tg.GridSpec(int(meta["dim"]), int(meta["n"]))
    fields = []
    for i in range(int(meta["m"])):
        raw = (path / f"species_{i + 1}.f64").read_bytes()
        if len(raw) != 8 * grid.size:
            raise ValueError(f"species_{i + 1}.f64 holds {len(raw)} bytes, expected {8 * grid.size}")
        fields.append(np.frombuffer(raw, dtype="<f8").reshape(grid.shape).astype(float))
    return SpeciesState(grid, np.stack(fields), float(meta["time"]))


def write_table(path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) if not isinstance(v, str) else v for v in r])
    _atomic_write_bytes(Path(path), buf.getvalue().encode("utf-8"))
