"""Binary portable graymap (P5) and pixmap (P6) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    pass


def _tokens(data: bytes, count: int, path) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    out, i, n = [], 0, len(data)
    while len(out) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise PnmError(f"{path}: truncated header")
        try:
            out.append(int(data[i:j]))
        except ValueError:
            raise PnmError(f"{path}: bad header field {data[i:j]!r}") from None
        i = j
    if i >= n or not data[i:i + 1].isspace():
        raise PnmError(f"{path}: missing whitespace after header")
    return out, i + 1


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Return (integer pixel array, maxval). P5 gives [H, W], P6 gives [H, W, 3]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise PnmError(f"{path}: {exc.strerror}") from None
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    (width, height, maxval), off = _tokens(data[2:], 3, path)
    off += 2
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise PnmError(f"{path}: invalid size {width}x{height} or maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    payload = data[off:off + need]
    if len(payload) != need:
        raise PnmError(f"{path}: expected {need} pixel bytes, found {len(payload)}")
    pix = np.frombuffer(payload, dtype=dtype).astype(np.int64)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return pix.reshape(shape), maxval


def read_pgm(path) -> np.ndarray:
    """Grayscale image scaled to [0, 1]."""
    pix, maxval = read_pnm(path)
    if pix.ndim != 2:
        raise PnmError(f"{path}: expected a graymap (P5)")
    return pix / float(maxval)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a [0, 1] image as 8-bit P5."""
    q = _quantize(img)
    h, w = q.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + q.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a [0, 1] image of shape [H, W, 3] as 8-bit P6."""
    q = _quantize(rgb)
    h, w, _ = q.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + q.tobytes())
