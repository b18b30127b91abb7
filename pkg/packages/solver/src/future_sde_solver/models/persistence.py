"""Atomic file emission: CSV tables, gnuplot .dat twins, PSIF field snapshots."""

from __future__ import annotations

import contextlib
import csv
import io
import os
import struct
import tempfile
import zlib
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from future_sde_solver.models.errors import SnapshotError
from future_sde_solver.models.fd_oracle import FdSolution
from future_sde_solver.models.feynman_kac import PsiField
from future_sde_solver.models.lattice import Lattice, TimeGrid

MAGIC = b"PSIF"
VERSION = 1
_HEAD = struct.Struct("<4sHHHI")
_COUNT = struct.Struct("<Q")
_CRC = struct.Struct("<I")


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------

def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a temp file in the target directory, then os.replace()."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp_path)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def format_cell(value: object) -> str:
    """Locale-independent, round-trippable rendering of one table cell."""
    if isinstance(value, bool | np.bool_):
        return str(bool(value)).lower()
    if isinstance(value, int | np.integer):
        return str(int(value))
    if isinstance(value, float | np.floating):
        return format(float(value), ".17g")
    return "" if value is None else str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(v) for v in row])
    return buffer.getvalue()


def render_dat(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """Whitespace-separated columns with a ``#`` header line, as gnuplot reads them."""
    lines = ["# " + " ".join(header)]
    lines += [" ".join(format_cell(v) or "nan" for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def write_table(
    path: Path, header: Sequence[str], rows: Sequence[Sequence[object]], *, dat: bool = False
) -> list[Path]:
    """Write ``path`` as CSV (and ``path.with_suffix('.dat')`` when asked); return what was written."""
    atomic_write_text(path, render_csv(header, rows))
    written = [path]
    if dat:
        twin = path.with_suffix(".dat")
        atomic_write_text(twin, render_dat(header, rows))
        written.append(twin)
    return written


# ---------------------------------------------------------------------------
# PSIF snapshots
# ---------------------------------------------------------------------------

def _f64(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def encode_snapshot(field: PsiField | FdSolution) -> bytes:
    if isinstance(field, FdSolution):
        field = field.as_field()
    lattice, grid = field.lattice, field.grid
    n_slices, _, m = field.values.shape
    parts = [
        _HEAD.pack(MAGIC, VERSION, lattice.dim, m, n_slices),
        struct.pack(f"<{lattice.dim}I", *lattice.nodes_per_axis),
        _f64(grid.slice_times),
        _f64(lattice.coords),
        _f64(field.values),
    ]
    if field.gradients is None:
        parts.append(_COUNT.pack(0))
    else:
        parts += [_COUNT.pack(field.gradients.size), _f64(field.gradients)]
    parts.append(_f64(field.stderr))
    payload = b"".join(parts)
    return payload + _CRC.pack(zlib.crc32(payload))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data) - _CRC.size:
            raise SnapshotError(f"truncated file: need {size} bytes at offset {self.offset}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(float)


def decode_snapshot(data: bytes) -> PsiField:
    if len(data) < 4 or data[:4] != MAGIC:
        raise SnapshotError("bad magic: not a PSIF snapshot")
    if len(data) < _HEAD.size + _CRC.size:
        raise SnapshotError("truncated file: header incomplete")
    _, version, d, m, n_slices = _HEAD.unpack_from(data)
    if version != VERSION:
        raise SnapshotError(f"unsupported version {version}")
    reader = _Reader(data)
    reader.offset = _HEAD.size
    nodes = struct.unpack(f"<{d}I", reader.take(4 * d))
    try:
        lattice = Lattice(tuple(int(n) for n in nodes))
    except ValueError as exc:
        raise SnapshotError(f"bad lattice in header: {exc}") from exc
    n_nodes = lattice.n_nodes
    times = reader.floats(n_slices)
    reader.floats(n_nodes * d)
    values = reader.floats(n_slices * n_nodes * m).reshape(n_slices, n_nodes, m)
    (grad_count,) = _COUNT.unpack(reader.take(_COUNT.size))
    gradients = None
    if grad_count:
        if grad_count != n_slices * n_nodes * d * m:
            raise SnapshotError(f"gradient block of {grad_count} values does not match the header")
        gradients = reader.floats(grad_count).reshape(n_slices, n_nodes, d, m)
    stderr = reader.floats(n_slices * n_nodes * m).reshape(n_slices, n_nodes, m)
    if reader.offset != len(data) - _CRC.size:
        raise SnapshotError(f"{len(data) - _CRC.size - reader.offset} unexpected trailing bytes")
    (stored,) = _CRC.unpack_from(data, reader.offset)
    if stored != zlib.crc32(data[:reader.offset]):
        raise SnapshotError("CRC mismatch: snapshot is corrupted")
    if n_slices < 2:
        raise SnapshotError("snapshot needs at least two time slices")
    grid = TimeGrid(float(times[-1]), n_slices - 1)
    return PsiField(grid, lattice, values, stderr, gradients, provenance="snapshot")


def write_snapshot(field: PsiField | FdSolution, path: Path) -> None:
    atomic_write_bytes(path, encode_snapshot(field))


def read_snapshot(path: Path) -> PsiField:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise SnapshotError(f"cannot read snapshot {path}: {exc}") from exc
    return decode_snapshot(data)


def snapshot_io(field: PsiField | FdSolution | None, path: Path, direction: str) -> PsiField | None:
    """``direction`` is ``"write"`` (returns None) or ``"read"`` (returns the field)."""
    match direction:
        case "write":
            if field is None:
                raise SnapshotError("nothing to write")
            write_snapshot(field, path)
            return None
        case "read":
            return read_snapshot(path)
        case _:
            raise ValueError(f"direction must be 'write' or 'read', got {direction!r}")
