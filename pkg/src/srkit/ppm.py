"""Bit-exact binary PPM (P6, maxval 255) image IO; PNG optional via Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        ch = buf[pos : pos + 1]
        if ch == b"#":  # comment runs to end of line
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated PPM header")
    return buf[start:pos], pos


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a P6 PPM into an (h, w, 3) uint8 array."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise ImageFormatError(f"{path}: not a P6 PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"{path}: bad PPM header token {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = buf[pos : pos + width * height * 3]
    if len(raster) != width * height * 3:
        raise ImageFormatError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ImageFormatError(f"write_ppm: expected (h, w, 3) uint8, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """PPM natively; anything else goes through Pillow when installed."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageFormatError(
            f"{path}: only .ppm is supported without the optional Pillow dependency"
        ) from exc
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, img)
        return
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageFormatError(
            f"{path}: only .ppm is supported without the optional Pillow dependency"
        ) from exc
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(path)
