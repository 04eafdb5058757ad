"""Binary Netpbm (P5 greymap / P6 pixmap) reading and writing.

Samples are stored as unsigned integers; 16-bit files use big-endian
sample order.  Floating point helpers convert [0, 1] images to and from the
stored integer depth.
"""

import os

import numpy as np

from .errors import NetpbmError

_MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}


def _tokens(data, count, start):
    """Return ``count`` header tokens from ``data`` and the offset after them."""
    out = []
    pos = start
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        begin = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if begin == pos:
            raise NetpbmError("truncated header")
        out.append(data[begin:pos])
    return out, pos


def decode_pnm(data):
    """Decode P5/P6 bytes into an ``(H, W)`` or ``(H, W, 3)`` integer array."""
    data = bytes(data)
    magic = data[:2]
    if magic not in _MAGIC_CHANNELS:
        raise NetpbmError(f"unsupported magic {magic!r}; expected P5 or P6")
    channels = _MAGIC_CHANNELS[magic]
    try:
        (w, h, maxval), pos = _tokens(data, 3, 2)
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise NetpbmError(f"malformed header: {exc}") from None
    if width <= 0 or height <= 0:
        raise NetpbmError(f"bad dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise NetpbmError(f"maxval {maxval} out of range")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetpbmError("missing whitespace after maxval")
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise NetpbmError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=dtype).astype(
        np.uint16 if maxval > 255 else np.uint8
    )
    shape = (height, width) if channels == 1 else (height, width, 3)
    arr = arr.reshape(shape)
    if arr.max(initial=0) > maxval:
        raise NetpbmError("sample exceeds maxval")
    return arr, maxval


def encode_pnm(arr, maxval=None):
    arr = np.asarray(arr)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot store array of shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise NetpbmError("expected integer samples; use to_uint8/to_uint16")
    if maxval is None:
        maxval = 65535 if arr.dtype.itemsize > 1 else 255
    if arr.size and (arr.min() < 0 or arr.max() > maxval):
        raise NetpbmError("samples out of range for maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    header = b"%s\n%d %d\n%d\n" % (magic, arr.shape[1], arr.shape[0], maxval)
    return header + arr.astype(dtype).tobytes()


def read_pnm(path):
    """Read a P5/P6 file. Returns the integer sample array."""
    with open(path, "rb") as fh:
        arr, _ = decode_pnm(fh.read())
    return arr


def write_pnm(path, arr, maxval=None):
    data = encode_pnm(arr, maxval)
    with open(os.fspath(path), "wb") as fh:
        fh.write(data)


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_uint16(img):
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)


def to_float(arr):
    """Integer samples -> float32 in [0, 1]."""
    arr = np.asarray(arr)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float32) / np.float32(scale)
