"""8-bit grayscale image files: binary PGM (P5) natively, PNG through Pillow."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

QUALITY_TAGS = ("low_quality", "high_quality", "generated")


@dataclass
class Image:
    """2-D grayscale pixels in [0, 1] tagged with where they came from."""

    pixels: np.ndarray
    quality: str = "low_quality"
    source: str | None = None

    def __post_init__(self):
        if self.quality not in QUALITY_TAGS:
            raise ValueError(f"unknown quality tag {self.quality!r}")
        if self.pixels.ndim != 2:
            raise ValueError(f"images are 2-D, got shape {self.pixels.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temporary file in the same directory and rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_pgm(pixels: np.ndarray) -> bytes:
    data = to_uint8(pixels)
    h, w = data.shape
    return b"P5\n%d %d\n255\n" % (w, h) + data.tobytes()


def decode_pgm(raw: bytes) -> np.ndarray:
    """Parse a binary 8-bit PGM; returns float32 pixels in [0, 1]."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"only 8-bit PGM is supported (maxval {maxval})")
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise ValueError("truncated PGM pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


def write_image(path: str | os.PathLike, pixels: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        import io

        from PIL import Image as PILImage

        buf = io.BytesIO()
        PILImage.fromarray(to_uint8(pixels), mode="L").save(buf, format="PNG")
        atomic_write_bytes(path, buf.getvalue())
    else:
        atomic_write_bytes(path, encode_pgm(pixels))


def read_image(path: str | os.PathLike, quality: str = "low_quality") -> Image:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            pixels = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    else:
        pixels = decode_pgm(path.read_bytes())
    return Image(pixels, quality, str(path))
