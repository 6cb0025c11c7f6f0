"""On-disk formats: FMAP1 feature maps, parameter blobs, PGM heatmaps and
the line-delimited text files (rigs, trajectories, configs)."""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .geometry import CameraRig, PinholeCamera, SE2Pose
from .grid import FeatureMap

FMAP_MAGIC = b"FMAP1"
PARAM_MAGIC = b"PBLOB1"


class FormatError(ValueError):
    """Raised for malformed input files; the message names the path."""


def atomic_write(path, payload: bytes | str) -> None:
    """Write via a temporary sibling and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, str):
        payload = payload.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc


def _read_lines(path) -> list[list[str]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    return rows


# -- FMAP1 ------------------------------------------------------------------


def fmap_to_bytes(fmap: FeatureMap) -> bytes:
    header = FMAP_MAGIC + struct.pack("<IIIf", fmap.height, fmap.width, fmap.channels, fmap.resolution)
    return header + fmap.data.astype("<f4").tobytes()


def fmap_from_bytes(buf: bytes, source: str = "<bytes>") -> FeatureMap:
    if len(buf) < 21 or buf[:5] != FMAP_MAGIC:
        raise FormatError(f"{source}: not an FMAP1 file")
    h, w, c, res = struct.unpack_from("<IIIf", buf, 5)
    expected = 21 + 4 * h * w * c
    if len(buf) != expected:
        raise FormatError(f"{source}: expected {expected} bytes, found {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=21).reshape(h, w, c)
    try:
        return FeatureMap(data.astype(np.float32), float(res))
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def write_fmap(path, fmap: FeatureMap) -> None:
    atomic_write(path, fmap_to_bytes(fmap))


def read_fmap(path) -> FeatureMap:
    return fmap_from_bytes(_read_bytes(path), str(path))


# -- parameter blobs ----------------------------------------------------------
#
# PBLOB1 | u32 seed | u32 n_sections | per section:
#   u16 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | f32 data


def storable(arr) -> np.ndarray:
    """``arr`` rounded to the blob's 32-bit precision, kept as float64, so
    save/load round-trips are exact."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def params_to_bytes(sections: Mapping[str, np.ndarray], seed: int) -> bytes:
    parts = [PARAM_MAGIC, struct.pack("<II", seed, len(sections))]
    for name in sorted(sections):
        arr = np.asarray(sections[name], dtype="<f4")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def params_from_bytes(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], int]:
    if buf[:6] != PARAM_MAGIC:
        raise FormatError(f"{source}: not a parameter blob")
    try:
        seed, n = struct.unpack_from("<II", buf, 6)
        off = 14
        out = {}
        for _ in range(n):
            (klen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + klen].decode()
            off += klen
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float64)
            off += 4 * count
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{source}: truncated parameter blob") from exc
    if off != len(buf):
        raise FormatError(f"{source}: trailing bytes in parameter blob")
    return out, seed


def write_params(path, sections: Mapping[str, np.ndarray], seed: int) -> None:
    atomic_write(path, params_to_bytes(sections, seed))


def read_params(path) -> tuple[dict[str, np.ndarray], int]:
    return params_from_bytes(_read_bytes(path), str(path))


# -- PGM ------------------------------------------------------------------------


def heatmap_to_pgm(values: np.ndarray) -> bytes:
    """16-bit binary PGM (P5) scaled so the maximum maps to 65535."""
    v = np.asarray(values, dtype=np.float64)
    peak = v.max()
    scaled = np.zeros(v.shape) if peak <= 0 else v / peak * 65535.0
    pixels = np.clip(np.rint(scaled), 0, 65535).astype(">u2")
    h, w = v.shape
    return f"P5\n{w} {h}\n65535\n".encode() + pixels.tobytes()


def read_pgm(path) -> np.ndarray:
    buf = _read_bytes(path)
    tokens = []
    off = 0
    while len(tokens) < 4:
        while buf[off:off + 1].isspace():
            off += 1
        start = off
        while not buf[off:off + 1].isspace():
            off += 1
        tokens.append(buf[start:off].decode())
    off += 1
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(buf, dtype=dtype, offset=off, count=w * h).reshape(h, w)


# -- camera rigs --------------------------------------------------------------


def rig_to_text(rig: CameraRig) -> str:
    lines = []
    for cam in rig:
        vals = [cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, *cam.quaternion, *cam.translation]
        lines.append("cam " + cam.id + " " + " ".join(_fmt(v) for v in vals))
    return "\n".join(lines) + "\n"


def write_rig(path, rig: CameraRig) -> None:
    atomic_write(path, rig_to_text(rig))


def read_rig(path) -> CameraRig:
    cams = []
    for row in _read_lines(path):
        if row[0] != "cam" or len(row) != 15:
            raise FormatError(f"{path}: bad camera line {' '.join(row)!r}")
        try:
            v = [float(t) for t in row[2:]]
            cams.append(PinholeCamera(
                row[1], v[0], v[1], v[2], v[3], int(v[4]), int(v[5]),
                tuple(v[6:10]), tuple(v[10:13]),
            ))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    try:
        return CameraRig(tuple(cams))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- trajectories -----------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def trajectory_to_text(frame_ids: Iterable[int], timestamps: Iterable[float], poses: Iterable[SE2Pose]) -> str:
    lines = []
    for fid, ts, p in zip(frame_ids, timestamps, poses):
        lines.append(f"{int(fid)} {_fmt(ts)} {_fmt(p.x)} {_fmt(p.y)} {_fmt(p.yaw)}")
    return "\n".join(lines) + "\n"


def write_trajectory(path, frame_ids, timestamps, poses) -> None:
    atomic_write(path, trajectory_to_text(frame_ids, timestamps, poses))


def read_trajectory(path) -> tuple[list[int], list[float], list[SE2Pose]]:
    ids, stamps, poses = [], [], []
    for row in _read_lines(path):
        if len(row) != 5:
            raise FormatError(f"{path}: trajectory lines need 5 fields, got {' '.join(row)!r}")
        try:
            ids.append(int(row[0]))
            stamps.append(float(row[1]))
            poses.append(SE2Pose(float(row[2]), float(row[3]), float(row[4])))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return ids, stamps, poses


# -- key = value configs ---------------------------------------------------------


def read_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def config_to_text(values: Mapping[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def upper_triangle(m: np.ndarray) -> list[float]:
    return [float(m[i, j]) for i in range(3) for j in range(i, 3)]


def from_upper_triangle(vals) -> np.ndarray:
    m = np.zeros((3, 3))
    k = 0
    for i in range(3):
        for j in range(i, 3):
            m[i, j] = m[j, i] = float(vals[k])
            k += 1
    return m


fmt_number = _fmt
read_rows = _read_lines
