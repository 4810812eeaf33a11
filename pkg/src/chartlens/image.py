"""RGB bitmap container and the PPM/PBM codecs used for fixtures and artifacts."""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


@dataclass(eq=False)
class ChartImage:
    """8-bit RGB bitmap, stored as an ``(height, width, 3)`` uint8 array."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ImageFormatError(f"expected (H, W, 3) pixels, got {px.shape}")
        self.pixels = np.ascontiguousarray(px, dtype=np.uint8)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @classmethod
    def blank(cls, width: int, height: int, color=(255, 255, 255)) -> "ChartImage":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[:] = color
        return cls(px)

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes) -> "ChartImage":
        if len(data) != width * height * 3:
            raise ImageFormatError(
                f"{len(data)} bytes cannot hold a {width}x{height} RGB image"
            )
        return cls(np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3))

    def to_bytes(self) -> bytes:
        return self.pixels.tobytes()

    def copy(self) -> "ChartImage":
        return ChartImage(self.pixels.copy())

    def digest(self) -> str:
        """SHA-256 over dimensions and raw pixel bytes."""
        h = hashlib.sha256(f"{self.width}x{self.height}:".encode())
        h.update(self.to_bytes())
        return h.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ChartImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )


def encode_ppm(image: ChartImage) -> bytes:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + image.to_bytes()


def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_ppm(data: bytes) -> ChartImage:
    tokens, offset = _read_header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("malformed PPM header") from exc
    if maxval != 255:
        raise ImageFormatError("only 8-bit PPM is supported")
    raster = data[offset : offset + width * height * 3]
    return ChartImage.from_bytes(width, height, raster)


def encode_pbm(bits: np.ndarray) -> bytes:
    """Binary PBM (P4); ``True`` is written as ink (1)."""
    bits = np.asarray(bits, dtype=bool)
    h, w = bits.shape
    packed = np.packbits(bits, axis=1)
    return f"P4\n{w} {h}\n".encode("ascii") + packed.tobytes()


def decode_pbm(data: bytes) -> np.ndarray:
    tokens, offset = _read_header_tokens(data, 3)
    if tokens[0] != b"P4":
        raise ImageFormatError("not a binary PBM")
    w, h = int(tokens[1]), int(tokens[2])
    row_bytes = (w + 7) // 8
    raw = np.frombuffer(data[offset : offset + row_bytes * h], dtype=np.uint8)
    if raw.size != row_bytes * h:
        raise ImageFormatError("truncated PBM raster")
    return np.unpackbits(raw.reshape(h, row_bytes), axis=1)[:, :w].astype(bool)


def read_image(path: str | Path) -> ChartImage:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(io.BytesIO(data)) as im:
            return ChartImage(np.asarray(im.convert("RGB")))
    raise ImageFormatError(f"{path}: unsupported image format")


def write_ppm(image: ChartImage, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(encode_ppm(image))
    return path


def write_png(image: ChartImage, path: str | Path) -> Path:
    from PIL import Image

    path = Path(path)
    Image.fromarray(image.pixels, mode="RGB").save(path, format="PNG")
    return path
