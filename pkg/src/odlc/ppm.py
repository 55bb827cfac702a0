"""Binary PPM (P6) image I/O, the codec's interchange format.

Images are float32 CHW arrays in [0,1]; 8-bit samples map via /255 on
read and round-half-up on write, so write(read(p)) is byte-identical for
canonical comment-free files.
"""

from __future__ import annotations

import numpy as np


class PpmError(ValueError):
    pass


def _read_token(buf: bytes, pos: int):
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":  # comment runs to end of line
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PpmError("malformed header: unexpected end of file")
    return buf[start:pos], pos


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 2:
        raise PpmError("malformed header: file too short")
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise PpmError(f"unsupported format: {magic.decode('ascii', 'replace')} (only binary P6 is supported)")
    w_tok, pos = _read_token(buf, pos)
    h_tok, pos = _read_token(buf, pos)
    max_tok, pos = _read_token(buf, pos)
    try:
        w, h, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError:
        raise PpmError("malformed header: non-numeric dimension") from None
    if w <= 0 or h <= 0:
        raise PpmError(f"malformed header: invalid dimensions {w}x{h}")
    if maxval != 255:
        raise PpmError(f"unsupported format: maxval {maxval} (only 8-bit channels are supported)")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    raw = buf[pos : pos + need]
    if len(raw) < need:
        raise PpmError(f"truncated data: expected {need} sample bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_ppm(path, img: np.ndarray):
    if img.ndim != 3 or img.shape[0] != 3:
        raise PpmError(f"image must be 3xHxW, got shape {img.shape}")
    c, h, w = img.shape
    # round half up, the exact inverse of /255 on byte-valued inputs
    samples = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(samples.transpose(1, 2, 0).tobytes())
