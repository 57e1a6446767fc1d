"""File formats: TED1 tensors, checkpoints, key=value configs, image codecs.

TED1 layout (all little-endian)::

    b"TED1" | uint32 n | uint32 c | uint32 h | uint32 w | float32[n*c*h*w]

Checkpoint layout::

    TEDNET-CHECKPOINT 1\\n
    key=value\\n            (model config, one pair per line)
    ...
    \\n                     (blank line ends the header)
    then, per parameter in model order:
    <name>\\n               (ASCII layer path)
    <TED1 blob>            (weights as (o, i, kh, kw); biases as (1, c, 1, 1))
"""
import io as _io
import struct
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"TED1"
CKPT_MAGIC = "TEDNET-CHECKPOINT 1"


def _as4d(arr):
    arr = np.asarray(arr)
    if arr.ndim == 4:
        return arr
    if arr.ndim == 1:
        return arr.reshape(1, -1, 1, 1)
    if arr.ndim == 2:
        return arr.reshape(1, 1, *arr.shape)
    if arr.ndim == 3:
        return arr.reshape(1, *arr.shape)
    raise ValueError(f"cannot store a {arr.ndim}-D array as TED1")


def pack_tensor(arr):
    arr = _as4d(arr)
    header = MAGIC + struct.pack("<4I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def unpack_tensor(buf, offset=0):
    """Decode one TED1 blob from ``buf``; returns (array, next_offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise ValueError(f"bad TED1 magic at byte {offset}: {bytes(buf[offset:offset + 4])!r}")
    dims = struct.unpack_from("<4I", buf, offset + 4)
    if min(dims) < 1:
        raise ValueError(f"TED1 dims must be >= 1, got {dims}")
    count = int(np.prod(dims))
    start = offset + 20
    end = start + 4 * count
    if end > len(buf):
        raise ValueError(f"TED1 payload truncated: need {end} bytes, have {len(buf)}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(dims)
    return arr.astype(np.float32), end


def save_tensor(path, arr):
    Path(path).write_bytes(pack_tensor(arr))


def load_tensor(path):
    buf = Path(path).read_bytes()
    arr, end = unpack_tensor(buf)
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes after TED1 payload")
    return arr


def format_config(cfg):
    return "".join(f"{k}={v}\n" for k, v in cfg.items())


def parse_config(text):
    """Parse key=value lines; blank lines and '#' comments are skipped."""
    cfg = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        cfg[key.strip()] = value.strip()
    return cfg


def read_config(path):
    return parse_config(Path(path).read_text())


def write_checkpoint(path, config, params):
    """``config`` is a flat dict of strings; ``params`` an ordered name -> array map."""
    out = _io.BytesIO()
    out.write((CKPT_MAGIC + "\n" + format_config(config) + "\n").encode("ascii"))
    for name, arr in params.items():
        out.write(name.encode("ascii") + b"\n")
        out.write(pack_tensor(arr))
    Path(path).write_bytes(out.getvalue())


def read_checkpoint(path):
    """Returns (config dict, ordered dict of float32 arrays in TED1 4-D shape)."""
    buf = Path(path).read_bytes()
    first = buf.find(b"\n")
    if buf[:first].decode("ascii", "replace") != CKPT_MAGIC:
        raise ValueError(f"{path}: not a TEDnet checkpoint")
    end = buf.find(b"\n\n", first)
    if end < 0:
        raise ValueError(f"{path}: unterminated checkpoint header")
    config = parse_config(buf[first + 1:end].decode("ascii"))
    pos = end + 2
    params = {}
    while pos < len(buf):
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise ValueError(f"{path}: truncated tensor name at byte {pos}")
        name = buf[pos:nl].decode("ascii")
        params[name], pos = unpack_tensor(buf, nl + 1)
    return config, params


def read_image(path):
    """Decode an image to a float array (3, h, w) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_image(path, img):
    """Write a (3, h, w) or (h, w) array in [0, 1] as PNG/PGM (by extension)."""
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def write_density_visual(path, density):
    """8-bit visualization scaled by 255/max; not a lossless artifact."""
    d = np.asarray(density, dtype=np.float64).squeeze()
    peak = d.max()
    scaled = d / peak if peak > 0 else np.zeros_like(d)
    write_image(path, scaled)
