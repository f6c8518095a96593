"""Cloud files, binary checkpoints and transform/report records."""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .geometry import PointCloud, RigidTransform

MAGIC = b"LOGD"
CHECKPOINT_VERSION = 1


class CloudParseError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def atomic_write(path, data: bytes | str):
    """Write to a sibling temp file and rename over ``path`` on success."""
    path = Path(path)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- clouds


def _floats(path, lineno, tokens, count):
    if len(tokens) < count:
        raise CloudParseError(path, lineno, f"expected {count} values, found {len(tokens)}")
    try:
        return [float(t) for t in tokens[:count]]
    except ValueError as exc:
        raise CloudParseError(path, lineno, f"non-numeric token ({exc})") from None


def _read_xyz(path, lines):
    pts = []
    for lineno, line in enumerate(lines, 1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        pts.append(_floats(path, lineno, tokens, 3))
    if not pts:
        raise CloudParseError(path, len(lines), "no points found")
    return np.array(pts)


def _read_off(path, lines):
    rows = [(i, ln.split()) for i, ln in enumerate(lines, 1)]
    rows = [(i, t) for i, t in rows if t and not t[0].startswith("#")]
    if not rows:
        raise CloudParseError(path, 1, "empty file")
    lineno, first = rows[0]
    head = first[0]
    if not head.endswith("OFF"):
        raise CloudParseError(path, lineno, "missing OFF header")
    rest = first[1:]
    pos = 1
    if not rest:
        if len(rows) < 2:
            raise CloudParseError(path, lineno, "missing element counts")
        lineno, rest = rows[1]
        pos = 2
    try:
        n_vert = int(rest[0])
    except (ValueError, IndexError):
        raise CloudParseError(path, lineno, "bad vertex count") from None
    if n_vert < 1:
        raise CloudParseError(path, lineno, "no vertices")
    if len(rows) - pos < n_vert:
        raise CloudParseError(path, len(lines), f"truncated: {n_vert} vertices declared, {len(rows) - pos} lines left")
    return np.array([_floats(path, i, t, 3) for i, t in rows[pos : pos + n_vert]])


def _read_ply(path, lines):
    if not lines or lines[0].strip() != "ply":
        raise CloudParseError(path, 1, "missing ply magic")
    n_vert, props, fmt, in_vertex, end = None, [], None, False, None
    for lineno, line in enumerate(lines[1:], 2):
        tokens = line.split()
        if not tokens:
            continue
        key = tokens[0]
        if key == "format":
            fmt = tokens[1] if len(tokens) > 1 else ""
            if fmt != "ascii":
                raise CloudParseError(path, lineno, f"only ascii PLY is supported, got {fmt!r}")
        elif key == "element":
            in_vertex = len(tokens) > 2 and tokens[1] == "vertex"
            if in_vertex:
                try:
                    n_vert = int(tokens[2])
                except ValueError:
                    raise CloudParseError(path, lineno, "bad vertex count") from None
        elif key == "property" and in_vertex:
            if tokens[1] == "list":
                raise CloudParseError(path, lineno, "list properties on vertices are unsupported")
            props.append(tokens[-1])
        elif key == "end_header":
            end = lineno
            break
    if end is None or fmt is None:
        raise CloudParseError(path, len(lines), "incomplete header")
    if n_vert is None:
        raise CloudParseError(path, end, "no vertex element")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise CloudParseError(path, end, "vertex element lacks x/y/z properties") from None
    body = lines[end:]
    if len(body) < n_vert:
        raise CloudParseError(path, len(lines), f"truncated: {n_vert} vertices declared, {len(body)} lines left")
    pts = np.empty((n_vert, 3))
    for i in range(n_vert):
        vals = _floats(path, end + i + 1, body[i].split(), len(props))
        pts[i] = [vals[c] for c in cols]
    return pts


def detect_format(path) -> str:
    suffix = Path(path).suffix.lower()
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head.startswith(b"ply"):
        return "ply-ascii"
    if head[:3] in (b"OFF", b"COF", b"NOF") or suffix == ".off":
        return "off"
    if suffix == ".ply":
        return "ply-ascii"
    return "xyz"


def read_cloud(path, fmt: str = "auto") -> PointCloud:
    if fmt == "auto":
        fmt = detect_format(path)
    readers = {"ply-ascii": _read_ply, "ply": _read_ply, "off": _read_off, "xyz": _read_xyz}
    if fmt not in readers:
        raise ValueError(f"unknown cloud format {fmt!r}")
    with open(path, encoding="utf-8", errors="replace") as fh:
        lines = fh.read().splitlines()
    return PointCloud(readers[fmt](str(path), lines))


def write_cloud(cloud, path, fmt: str | None = None):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    fmt = fmt or {".ply": "ply-ascii", ".off": "off"}.get(Path(path).suffix.lower(), "xyz")
    body = "\n".join(f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts)
    if fmt in ("ply", "ply-ascii"):
        head = (
            f"ply\nformat ascii 1.0\nelement vertex {len(pts)}\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
    elif fmt == "off":
        head = f"OFF\n{len(pts)} 0 0\n"
    elif fmt == "xyz":
        head = ""
    else:
        raise ValueError(f"unknown cloud format {fmt!r}")
    atomic_write(path, head + body + "\n")


# ------------------------------------------------------------ checkpoints


def checkpoint_bytes(tensors: dict[str, np.ndarray], version: int = CHECKPOINT_VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<II", version, len(tensors))]
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)


def write_checkpoint(tensors: dict[str, np.ndarray], path):
    if len(set(tensors)) != len(tensors):
        raise CheckpointError("parameter names must be unique")
    atomic_write(path, checkpoint_bytes(tensors))


def parse_checkpoint(blob: bytes) -> OrderedDict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a LOGD checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptCheckpointError("CRC mismatch: checkpoint is corrupted")
    version, count = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    pos = 12
    out = OrderedDict()

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CorruptCheckpointError("truncated checkpoint")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(body):
        raise CorruptCheckpointError("trailing bytes after last tensor")
    return out


def read_checkpoint(path) -> OrderedDict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# ------------------------------------------------------- records / reports


def transform_record(transform: RigidTransform, estimator: str, metrics=None, seed=None, config=None) -> dict:
    return {
        "matrix": [[float(v) for v in row] for row in transform.matrix()],
        "estimator": estimator,
        "metrics": dict(metrics or {}),
        "seed": seed,
        "config": dict(config or {}),
    }


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(obj, path):
    atomic_write(path, dump_json(obj))


def read_transform_record(path) -> tuple[RigidTransform, dict]:
    with open(path, encoding="utf-8") as fh:
        rec = json.load(fh)
    return RigidTransform.from_matrix(np.array(rec["matrix"])), rec


def key_value_block(metrics: dict, prefix: str = "") -> str:
    """Flat ``key = value`` lines, nested dicts joined with dots."""
    lines = []
    for key in sorted(metrics):
        val = metrics[key]
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            lines.append(key_value_block(val, name + ".").rstrip("\n"))
        elif isinstance(val, float):
            lines.append(f"{name} = {val:.6g}")
        else:
            lines.append(f"{name} = {val}")
    return "\n".join(line for line in lines if line) + "\n"
