"""Minimal NRRD reader/writer for 3D scalar volumes.

Supported subset: ``raw`` and ``gzip`` encodings, uint8 / int16 / uint16 /
float32 / float64 scalars, little or big endian payloads, three dimensions.
Anything else is rejected rather than guessed at.
"""
from __future__ import annotations

import gzip
import os
import re
from pathlib import Path

import numpy as np

from ..errors import NrrdParseError, UnsupportedFormatError
from .grid import VoxelGrid

_TYPES = {
    "uchar": "u1", "unsigned char": "u1", "uint8": "u1", "uint8_t": "u1",
    "short": "i2", "short int": "i2", "signed short": "i2", "signed short int": "i2",
    "int16": "i2", "int16_t": "i2",
    "ushort": "u2", "unsigned short": "u2", "unsigned short int": "u2",
    "uint16": "u2", "uint16_t": "u2",
    "float": "f4",
    "double": "f8",
}
_ENCODINGS = {"raw": "raw", "gzip": "gzip", "gz": "gzip"}
_VECTOR = re.compile(r"\(([^)]*)\)")


def _parse_vector(text: str, field: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise NrrdParseError(f"malformed vector in field '{field}': {text!r}") from None


def _parse_header(lines: list[str]) -> dict[str, str]:
    fields: dict[str, str] = {}
    for line in lines:
        if not line or line.startswith("#"):
            continue
        if ":=" in line:  # key/value pairs carry no geometry we honour
            continue
        if ": " not in line:
            raise NrrdParseError(f"malformed header line: {line!r}")
        key, value = line.split(": ", 1)
        fields[key.strip().lower()] = value.strip()
    return fields


def _read_header(raw: bytes) -> tuple[dict[str, str], int]:
    if not raw.startswith(b"NRRD"):
        raise NrrdParseError("missing NRRD magic")
    end = raw.find(b"\n\n")
    if end < 0:
        raise NrrdParseError("header is not terminated by a blank line")
    text = raw[:end].decode("ascii", errors="replace").replace("\r", "")
    lines = text.split("\n")[1:]
    return _parse_header(lines), end + 2


def _field(fields: dict[str, str], name: str) -> str:
    if name not in fields:
        raise NrrdParseError(f"missing required field '{name}'")
    return fields[name]


def read_nrrd(path: str | os.PathLike, binarize: bool = False) -> VoxelGrid:
    """Read a 3D NRRD volume.

    Spacing and origin come from ``space directions`` / ``space origin``
    (the norm of each direction vector is the spacing); both default to
    unit spacing at the world origin. With ``binarize`` set, values > 0.5
    become 1 and the result is a binary grid.
    """
    raw = Path(path).read_bytes()
    fields, offset = _read_header(raw)

    try:
        dimension = int(_field(fields, "dimension"))
    except ValueError:
        raise NrrdParseError("malformed field 'dimension'") from None
    if dimension != 3:
        raise NrrdParseError(f"unsupported dimension {dimension} in field 'dimension'")

    type_name = _field(fields, "type").lower()
    if type_name not in _TYPES:
        raise UnsupportedFormatError(f"unsupported type '{type_name}'")
    encoding = _field(fields, "encoding").lower()
    if encoding not in _ENCODINGS:
        raise UnsupportedFormatError(f"unsupported encoding '{encoding}'")
    if "data file" in fields or "datafile" in fields:
        raise UnsupportedFormatError("detached data files are not supported")

    try:
        sizes = [int(s) for s in _field(fields, "sizes").split()]
    except ValueError:
        raise NrrdParseError("malformed field 'sizes'") from None
    if len(sizes) != 3 or min(sizes) < 1:
        raise NrrdParseError(f"field 'sizes' must hold 3 positive integers, got {sizes}")

    code = _TYPES[type_name]
    if code != "u1":
        endian = fields.get("endian", "little").lower()
        if endian not in ("little", "big"):
            raise NrrdParseError(f"malformed field 'endian': {endian!r}")
        code = ("<" if endian == "little" else ">") + code
    dtype = np.dtype(code)

    spacing = [1.0, 1.0, 1.0]
    if "space directions" in fields:
        vectors = _VECTOR.findall(fields["space directions"])
        if len(vectors) != 3:
            raise NrrdParseError("field 'space directions' must hold 3 vectors")
        spacing = []
        for vec in vectors:
            v = _parse_vector(vec, "space directions")
            if len(v) != 3:
                raise NrrdParseError("field 'space directions' vectors must have 3 components")
            spacing.append(float(np.linalg.norm(v)))
        if min(spacing) <= 0:
            raise NrrdParseError("field 'space directions' has a zero-length vector")
    elif "spacings" in fields:
        try:
            spacing = [float(s) for s in fields["spacings"].split()]
        except ValueError:
            raise NrrdParseError("malformed field 'spacings'") from None
        if len(spacing) != 3:
            raise NrrdParseError("field 'spacings' must hold 3 values")

    origin = [0.0, 0.0, 0.0]
    if "space origin" in fields:
        vectors = _VECTOR.findall(fields["space origin"])
        if len(vectors) != 1:
            raise NrrdParseError("malformed field 'space origin'")
        origin = _parse_vector(vectors[0], "space origin")
        if len(origin) != 3:
            raise NrrdParseError("field 'space origin' must have 3 components")

    payload = raw[offset:]
    if _ENCODINGS[encoding] == "gzip":
        try:
            payload = gzip.decompress(payload)
        except OSError as exc:
            raise NrrdParseError(f"corrupt gzip payload: {exc}") from None
    count = int(np.prod(sizes))
    nbytes = count * dtype.itemsize
    if len(payload) < nbytes:
        raise NrrdParseError(f"payload holds {len(payload)} bytes, header 'sizes' needs {nbytes}")
    flat = np.frombuffer(payload, dtype=dtype, count=count)
    data = flat.reshape(sizes, order="F")

    if binarize:
        data = (data > 0.5).astype(np.uint8)
    elif dtype.kind == "u" and dtype.itemsize == 1 and data.max(initial=0) <= 1:
        data = data.astype(np.uint8)
    else:
        data = data.astype(np.float64)
    return VoxelGrid(data, spacing, origin)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_nrrd(grid: VoxelGrid, path: str | os.PathLike, compress: bool = True) -> None:
    """Write ``grid`` as a single-file NRRD.

    Binary grids are stored as uint8, fractional ones as little-endian
    float64 so a read-back is bit-exact. Output bytes depend only on the
    grid (gzip header timestamp is pinned to zero).
    """
    if grid.binary:
        type_name, dtype = "uint8", np.dtype("u1")
    else:
        type_name, dtype = "double", np.dtype("<f8")
    sx, sy, sz = grid.spacing
    lines = [
        "NRRD0004",
        "# Complete NRRD file format specification at:",
        "# http://teem.sourceforge.net/nrrd/format.html",
        f"type: {type_name}",
        "dimension: 3",
        "space: left-posterior-superior",
        "sizes: " + " ".join(str(d) for d in grid.dims),
        f"space directions: ({_fmt(sx)},0,0) (0,{_fmt(sy)},0) (0,0,{_fmt(sz)})",
        "kinds: domain domain domain",
        "endian: little",
        f"encoding: {'gzip' if compress else 'raw'}",
        "space origin: (" + ",".join(_fmt(o) for o in grid.origin) + ")",
    ]
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    payload = np.asarray(grid.data, dtype=dtype).tobytes(order="F")
    if compress:
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
