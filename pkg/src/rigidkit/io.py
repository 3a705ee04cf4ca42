"""Readers and writers for .flo, PFM, 16-bit PGM and JSON reports."""
import json
import re
from pathlib import Path

import numpy as np

FLO_MAGIC = 202021.25
PGM_INVALID = 65535


class FormatError(ValueError):
    pass


def write_flo(path, flow):
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError("flow must be (H, W, 2)")
    H, W = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(np.array([FLO_MAGIC], "<f4").tobytes())
        f.write(np.array([W, H], "<i4").tobytes())
        f.write(np.ascontiguousarray(flow).tobytes())


def read_flo(path):
    data = Path(path).read_bytes()
    if len(data) < 12 or np.frombuffer(data[:4], "<f4")[0] != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: not a .flo file")
    W, H = (int(x) for x in np.frombuffer(data[4:12], "<i4"))
    if W < 0 or H < 0 or len(data) != 12 + 8 * W * H:
        raise FormatError(f"{path}: truncated or malformed .flo payload")
    return np.frombuffer(data[12:], "<f4").reshape(H, W, 2).copy()


def write_pfm(path, image):
    """Single-channel little-endian PFM; rows stored bottom to top."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    H, W = img.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


_PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def read_pfm(path):
    data = Path(path).read_bytes()
    m = _PFM_HEADER.match(data)
    if not m:
        raise FormatError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    W, H = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    n = W * H * channels
    body = data[m.end():]
    if len(body) != 4 * n:
        raise FormatError(f"{path}: PFM payload has {len(body)} bytes, expected {4 * n}")
    arr = np.frombuffer(body, dtype).astype(np.float32)
    shape = (H, W) if channels == 1 else (H, W, 3)
    return arr.reshape(shape)[::-1].copy()


def labels_to_pgm16(labels):
    labels = np.asarray(labels)
    if labels.max(initial=0) >= PGM_INVALID:
        raise ValueError("too many instances for a 16-bit label map")
    return np.where(labels < 0, PGM_INVALID, labels).astype(">u2")


def write_pgm16(path, labels):
    """Label map as binary P5 with maxval 65535; negative labels become 65535."""
    img = labels_to_pgm16(labels)
    H, W = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n65535\n".encode("ascii"))
        f.write(img.tobytes())


_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm16(path, raw=False):
    """Read a 16-bit PGM; unless ``raw``, 65535 maps back to -1 (int32)."""
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if not m:
        raise FormatError(f"{path}: not a binary PGM file")
    W, H, maxval = (int(m.group(i)) for i in (1, 2, 3))
    if maxval < 256:
        raise FormatError(f"{path}: expected a 16-bit PGM")
    body = data[m.end():]
    if len(body) != 2 * W * H:
        raise FormatError(f"{path}: PGM payload size mismatch")
    img = np.frombuffer(body, ">u2").reshape(H, W)
    if raw:
        return img.copy()
    out = img.astype(np.int32)
    out[img == PGM_INVALID] = -1
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def dumps_report(obj):
    """JSON text with insertion-ordered keys, two-space indent and a trailing newline."""
    return json.dumps(_plain(obj), indent=2, allow_nan=False) + "\n"


def write_report(path, obj):
    Path(path).write_text(dumps_report(obj), encoding="utf-8")


def read_report(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
