"""Dense matrix files in a text and a binary format.

Text format::

    rows cols
    v00 v01 ...
    ...

with values written to 17 significant digits (exact round trip).

Binary format: the 8-byte magic ``SBLMAT01``, rows and cols as
little-endian uint64, then ``rows * cols`` little-endian float64 values in
row-major order. :func:`read_matrix` detects the format from the magic.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

__all__ = ["MAGIC", "MatrixFormatError", "write_matrix", "read_matrix", "atomic_write_bytes"]

MAGIC = b"SBLMAT01"
_HEADER = struct.Struct("<8sQQ")


class MatrixFormatError(ValueError):
    """Raised for malformed or non-finite matrix files."""


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to a temporary file in the target directory, then rename."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got {A.ndim} dimensions")
    if not np.all(np.isfinite(A)):
        raise MatrixFormatError("matrix contains non-finite values")
    return A


def encode_matrix(A, fmt: str = "binary") -> bytes:
    A = _as_matrix(A)
    rows, cols = A.shape
    if fmt == "binary":
        return _HEADER.pack(MAGIC, rows, cols) + np.ascontiguousarray(A, dtype="<f8").tobytes()
    if fmt == "text":
        lines = [f"{rows} {cols}"]
        lines += [" ".join(f"{x:.17g}" for x in row) for row in A]
        return ("\n".join(lines) + "\n").encode("ascii")
    raise ValueError(f"unknown matrix format {fmt!r}; expected 'binary' or 'text'")


def write_matrix(path, A, fmt: str = "binary") -> None:
    atomic_write_bytes(path, encode_matrix(A, fmt))


def decode_matrix(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if data[:8] == MAGIC:
        if len(data) < _HEADER.size:
            raise MatrixFormatError(f"{source}: truncated binary header")
        _, rows, cols = _HEADER.unpack_from(data)
        payload = len(data) - _HEADER.size
        if payload != 8 * rows * cols:
            raise MatrixFormatError(
                f"{source}: size mismatch, header says {rows}x{cols} "
                f"({8 * rows * cols} bytes) but payload has {payload} bytes")
        A = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols)
        A = A.astype(float)
    else:
        try:
            text = data.decode("ascii")
        except UnicodeDecodeError as exc:
            raise MatrixFormatError(f"{source}: neither binary magic nor ASCII text") from exc
        lines = text.split("\n", 1)
        head = lines[0].split()
        if len(head) != 2 or not all(h.isdigit() for h in head):
            raise MatrixFormatError(f"{source}: malformed header {lines[0]!r}, expected 'rows cols'")
        rows, cols = int(head[0]), int(head[1])
        body = lines[1].split() if len(lines) > 1 else []
        if len(body) != rows * cols:
            raise MatrixFormatError(
                f"{source}: size mismatch, header says {rows}x{cols} "
                f"({rows * cols} values) but found {len(body)} values")
        try:
            A = np.array([float(x) for x in body], dtype=float).reshape(rows, cols)
        except ValueError as exc:
            raise MatrixFormatError(f"{source}: unparsable value ({exc})") from exc
    if not np.all(np.isfinite(A)):
        raise MatrixFormatError(f"{source}: matrix contains non-finite values")
    return A


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    return decode_matrix(path.read_bytes(), str(path))
