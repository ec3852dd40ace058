"""Image codecs, procedural data generation and the labeled toy matting set.

Everything the pipeline reads or writes goes through here: a self-contained
PNG codec (8-bit gray/RGB, no interlace), binary PPM/PGM, deterministic
procedural textures standing in for a photo corpus, and an analytic
soft-edged shape dataset for fine-tuning. No external downloads.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

SUPPORTED_EXTENSIONS = (".png", ".ppm", ".pgm")

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

# Gray-level encoding of trimap labels {background, unknown, foreground}.
TRIMAP_GRAY_LEVELS = np.array([0, 128, 255], dtype=np.uint8)


class ImageDecodeError(ValueError):
    """Corrupt or unsupported image data; ``offset`` is the failing byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class ImageRecord:
    """Decoded image: H×W×C float32 in [0,1], C in {1,3}."""

    pixels: np.ndarray
    source: str
    bit_depth: int = 8


# ---------------------------------------------------------------------------
# PNG codec

def _png_chunk(kind: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + kind + payload
            + struct.pack(">I", zlib.crc32(kind + payload)))


def encode_png(img: np.ndarray) -> bytes:
    """Encode uint8 gray (H,W) or RGB (H,W,3) as a PNG byte string."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"encode_png expects uint8 data, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        color_type = 0
    elif img.ndim == 3 and img.shape[2] == 3:
        color_type = 2
    else:
        raise ValueError(f"encode_png expects (H,W) or (H,W,3), got {img.shape}")
    h, w = img.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    rows = img.reshape(h, -1)
    raw = b"".join(b"\x00" + rows[r].tobytes() for r in range(h))
    return (PNG_SIGNATURE
            + _png_chunk(b"IHDR", ihdr)
            + _png_chunk(b"IDAT", zlib.compress(raw, 9))
            + _png_chunk(b"IEND", b""))


def _unfilter_row(ftype: int, cur: np.ndarray, prev: np.ndarray, bpp: int) -> np.ndarray:
    """Reverse one PNG scanline filter; cur/prev are int32 rows."""
    if ftype == 0:
        return cur
    if ftype == 2:                       # up
        return (cur + prev) & 0xFF
    if ftype == 1:                       # sub: prefix sum per byte position
        out = cur.copy()
        for o in range(bpp):
            out[o::bpp] = np.cumsum(cur[o::bpp]) & 0xFF
        return out
    out = np.zeros_like(cur)
    n = cur.size
    if ftype == 3:                       # average
        for i in range(0, n, bpp):
            left = out[i - bpp:i] if i else np.zeros(bpp, dtype=cur.dtype)
            out[i:i + bpp] = (cur[i:i + bpp] + (left + prev[i:i + bpp]) // 2) & 0xFF
        return out
    if ftype == 4:                       # paeth
        for i in range(0, n, bpp):
            a = out[i - bpp:i] if i else np.zeros(bpp, dtype=cur.dtype)
            b = prev[i:i + bpp]
            c = prev[i - bpp:i] if i else np.zeros(bpp, dtype=cur.dtype)
            p = a + b - c
            pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
            pred = np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))
            out[i:i + bpp] = (cur[i:i + bpp] + pred) & 0xFF
        return out
    raise ImageDecodeError(f"unknown scanline filter type {ftype}", -1)


def _validate_ihdr(body: bytes, offset: int) -> None:
    if len(body) != 13:
        raise ImageDecodeError(f"IHDR length {len(body)} != 13", offset)
    _, _, depth, color_type, comp, filt, interlace = struct.unpack(">IIBBBBB", body)
    if depth != 8:
        raise ImageDecodeError(f"unsupported bit depth {depth} (only 8)", offset)
    if color_type not in (0, 2):
        raise ImageDecodeError(
            f"unsupported color type {color_type} (only gray=0, RGB=2)", offset)
    if comp != 0 or filt != 0:
        raise ImageDecodeError("unsupported compression/filter method", offset)
    if interlace != 0:
        raise ImageDecodeError("interlaced PNG not supported", offset)


def decode_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes to uint8 (H,W) gray or (H,W,3) RGB."""
    if data[:8] != PNG_SIGNATURE:
        raise ImageDecodeError("not a PNG file (bad signature)", 0)
    pos = 8
    ihdr = None
    idat = bytearray()
    idat_pos = None
    seen_end = False
    while pos < len(data):
        if pos + 8 > len(data):
            raise ImageDecodeError("truncated chunk header", pos)
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        kind = data[pos + 4:pos + 8]
        body_start = pos + 8
        if body_start + length + 4 > len(data):
            raise ImageDecodeError(f"truncated {kind.decode('latin1')} chunk", pos)
        body = data[body_start:body_start + length]
        (crc,) = struct.unpack(">I", data[body_start + length:body_start + length + 4])
        if crc != zlib.crc32(kind + body):
            raise ImageDecodeError(f"CRC mismatch in {kind.decode('latin1')} chunk", pos)
        if kind == b"IHDR":
            ihdr = body
            _validate_ihdr(body, body_start)
        elif kind == b"IDAT":
            if idat_pos is None:
                idat_pos = body_start
            idat.extend(body)
        elif kind == b"IEND":
            seen_end = True
            break
        pos = body_start + length + 4
    if ihdr is None:
        raise ImageDecodeError("missing IHDR chunk", 8)
    if not seen_end:
        raise ImageDecodeError("missing IEND chunk (truncated file)", len(data))
    w, h, depth, color_type = struct.unpack(">IIBB", ihdr[:10])
    if idat_pos is None:
        raise ImageDecodeError("missing IDAT chunk", pos)
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise ImageDecodeError(f"corrupt IDAT stream: {exc}", idat_pos) from None
    channels = 1 if color_type == 0 else 3
    stride = w * channels
    if len(raw) != h * (stride + 1):
        raise ImageDecodeError(
            f"decompressed size {len(raw)} != expected {h * (stride + 1)}", idat_pos)
    out = np.zeros((h, stride), dtype=np.int32)
    prev = np.zeros(stride, dtype=np.int32)
    for r in range(h):
        row = raw[r * (stride + 1):(r + 1) * (stride + 1)]
        ftype = row[0]
        if ftype > 4:
            raise ImageDecodeError(f"invalid filter type {ftype} in row {r}", idat_pos)
        cur = np.frombuffer(row, dtype=np.uint8, offset=1).astype(np.int32)
        out[r] = prev = _unfilter_row(ftype, cur, prev, channels)
    img = out.astype(np.uint8)
    return img.reshape(h, w) if channels == 1 else img.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# PPM / PGM (binary)

def encode_pnm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"encode_pnm expects uint8 data, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"encode_pnm expects (H,W) or (H,W,3), got {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + img.tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    if data[:2] not in (b"P5", b"P6"):
        raise ImageDecodeError("not a binary PGM/PPM file (bad magic)", 0)
    channels = 1 if data[:2] == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise ImageDecodeError("truncated PNM header", pos)
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise ImageDecodeError("non-numeric PNM header field", start) from None
    w, h, maxval = fields
    if maxval != 255:
        raise ImageDecodeError(f"unsupported PNM maxval {maxval} (only 255)", pos)
    pos += 1  # single whitespace byte after maxval
    need = w * h * channels
    if len(data) - pos < need:
        raise ImageDecodeError(
            f"truncated PNM pixel data ({len(data) - pos} of {need} bytes)", len(data))
    img = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return img.reshape(h, w) if channels == 1 else img.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# file-level API

def _codec_for(path: Path, format: str | None):
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "png":
        return encode_png, decode_png
    if fmt in ("ppm", "pgm"):
        return encode_pnm, decode_pnm
    raise ValueError(f"unsupported image format {fmt!r} for {path}")


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Quantize float [0,1] data to uint8; uint8 passes through."""
    pixels = np.asarray(pixels)
    if pixels.dtype == np.uint8:
        return pixels
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_image(record, path, format: str | None = None) -> None:
    path = Path(path)
    pixels = record.pixels if isinstance(record, ImageRecord) else record
    encode, _ = _codec_for(path, format)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(to_uint8(pixels)))


def decode_image(path, format: str | None = None) -> ImageRecord:
    path = Path(path)
    _, decode = _codec_for(path, format)
    img = decode(path.read_bytes())
    pixels = np.clip(img.astype(np.float32) / 255.0, 0.0, 1.0)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return ImageRecord(pixels=pixels, source=str(path), bit_depth=8)


def trimap_to_gray(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1, 2)).all():
        raise ValueError("trimap labels must be in {0, 1, 2}")
    return TRIMAP_GRAY_LEVELS[labels.astype(np.intp)]


def gray_to_trimap(gray: np.ndarray) -> np.ndarray:
    gray = np.asarray(gray)
    if not np.isin(gray, TRIMAP_GRAY_LEVELS).all():
        raise ValueError("trimap gray image must only contain {0, 128, 255}")
    out = np.zeros(gray.shape, dtype=np.uint8)
    out[gray == 128] = 1
    out[gray == 255] = 2
    return out


def scan_image_dir(root) -> Iterator[Path]:
    """Recursive, lexicographically sorted scan of supported image files."""
    root = Path(root)
    if not root.is_dir():
        raise NotADirectoryError(f"{root} is not a readable directory")
    paths = [p for p in root.rglob("*")
             if p.is_file() and p.suffix.lower() in SUPPORTED_EXTENSIONS]
    return iter(sorted(paths, key=lambda p: p.as_posix()))


# ---------------------------------------------------------------------------
# procedural textures

TEXTURE_KINDS = ("gradient", "value_noise", "checker", "blobs")


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _bilinear_lattice(rng: np.random.Generator, nodes: int, size: int) -> np.ndarray:
    """Random (nodes x nodes x 3) lattice bilinearly interpolated to size."""
    lattice = rng.uniform(0.0, 1.0, size=(nodes, nodes, 3))
    t = np.linspace(0.0, nodes - 1.0, size)
    i0 = np.minimum(t.astype(np.intp), nodes - 2)
    f = (t - i0)[:, None]
    rows = lattice[i0] * (1.0 - f[:, :, None]) + lattice[i0 + 1] * f[:, :, None]
    cols = rows[:, i0] * (1.0 - f.T[:, :, None]) + rows[:, i0 + 1] * f.T[:, :, None]
    return cols


def procedural_texture(kind: str, size: int, rng) -> np.ndarray:
    """Deterministic 3-channel texture in [0,1]; H = W = size."""
    if size < 8:
        raise ValueError(f"texture size must be >= 8, got {size}")
    if kind not in TEXTURE_KINDS:
        raise ValueError(f"unknown texture kind {kind!r}, expected one of {TEXTURE_KINDS}")
    rng = _as_rng(rng)
    if kind == "gradient":
        c0 = rng.uniform(0.0, 1.0, size=3)
        c1 = rng.uniform(0.0, 1.0, size=3)
        ramp = np.linspace(0.0, 1.0, size)
        w = (ramp[:, None] + ramp[None, :]) / 2.0
        img = c0[None, None, :] * (1.0 - w[:, :, None]) + c1[None, None, :] * w[:, :, None]
    elif kind == "value_noise":
        img = np.zeros((size, size, 3))
        total = 0.0
        for octave in range(3):
            weight = 0.5 ** octave
            img += weight * _bilinear_lattice(rng, 4 * 2 ** octave + 1, size)
            total += weight
        img /= total
    elif kind == "checker":
        cell = int(rng.integers(4, max(5, size // 4) + 1))
        c0 = rng.uniform(0.0, 1.0, size=3)
        c1 = rng.uniform(0.0, 1.0, size=3)
        idx = np.add.outer(np.arange(size) // cell, np.arange(size) // cell) % 2
        img = np.where(idx[:, :, None] == 0, c0[None, None, :], c1[None, None, :])
    else:  # blobs
        img = np.broadcast_to(rng.uniform(0.0, 1.0, size=3), (size, size, 3)).copy()
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(int(rng.integers(3, 9))):
            cy, cx = rng.uniform(0, size, size=2)
            sigma = rng.uniform(size / 12.0, size / 4.0)
            color = rng.uniform(0.0, 1.0, size=3)
            a = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
            img = img * (1.0 - a[:, :, None]) + color[None, None, :] * a[:, :, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# Foreground sources are shaded into the upper part of [0, 1] and background
# sources into the lower part. The ranges overlap, so brightness alone never
# identifies a pixel's layer, but in expectation a foreground pixel is
# brighter than the background behind it. Without this photometric
# separability the compositing-inversion task gives a small model no
# first-order gradient away from the constant predictor at small step
# budgets; real matting imagery has the same property (subjects are lit and
# framed to stand apart from their backgrounds).
FG_VALUE_RANGE = (0.45, 1.0)
BG_VALUE_RANGE = (0.0, 0.55)


def shade_to_range(texture: np.ndarray, value_range: tuple[float, float]) -> np.ndarray:
    """Affinely map a [0,1] texture into ``value_range`` (a sub-range of it)."""
    lo, hi = value_range
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError(f"value range must satisfy 0 <= lo < hi <= 1, got {value_range}")
    return (lo + (hi - lo) * np.asarray(texture, dtype=np.float32)).astype(np.float32)


# ---------------------------------------------------------------------------
# toy matting dataset

SHAPE_KINDS = ("disk", "ellipse", "strip")


@dataclass
class ShapeSpec:
    """Closed-form descriptor of a soft-edged shape; alpha is a pure
    function of these fields."""

    kind: str
    center: tuple[float, float]          # (cy, cx)
    radii: tuple[float, float]           # (ry, rx); disk uses ry
    softness: float                      # edge band half-width, pixels
    angle: float = 0.0                   # strip orientation, radians
    half_length: float = 0.0             # strip half-length, pixels


@dataclass
class ToyMattingItem:
    fg: np.ndarray                        # H×W×3 float32
    gt_alpha: np.ndarray                  # H×W float32
    shape: ShapeSpec
    index: int = 0


def shape_alpha(spec: ShapeSpec, size: int) -> np.ndarray:
    """Evaluate the analytic anti-aliased alpha of a shape descriptor."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = spec.center
    if spec.kind == "disk":
        r0 = spec.radii[0]
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        signed = r0 - dist
    elif spec.kind == "ellipse":
        ry, rx = spec.radii
        rho = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        signed = (1.0 - rho) * min(ry, rx)
    elif spec.kind == "strip":
        # Capsule: distance to the center segment minus the half-width.
        dy, dx = np.sin(spec.angle), np.cos(spec.angle)
        py, px = yy - cy, xx - cx
        t = np.clip(py * dy + px * dx, -spec.half_length, spec.half_length)
        dist = np.sqrt((py - t * dy) ** 2 + (px - t * dx) ** 2)
        signed = spec.radii[0] - dist
    else:
        raise ValueError(f"unknown shape kind {spec.kind!r}")
    return np.clip(signed / spec.softness + 0.5, 0.0, 1.0).astype(np.float32)


def toy_matting_dataset(n: int, size: int, seed: int) -> list[ToyMattingItem]:
    """Deterministic labeled matting items: textured fill + analytic alpha."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    items = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 0x7071])
        kind = SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))]
        cy, cx = rng.uniform(0.35 * size, 0.65 * size, size=2)
        softness = float(rng.uniform(1.0, 4.0))
        if kind == "disk":
            r = float(rng.uniform(0.15 * size, 0.35 * size))
            spec = ShapeSpec(kind, (cy, cx), (r, r), softness)
        elif kind == "ellipse":
            ry = float(rng.uniform(0.12 * size, 0.3 * size))
            rx = float(rng.uniform(0.12 * size, 0.3 * size))
            spec = ShapeSpec(kind, (cy, cx), (ry, rx), softness)
        else:
            hw = float(rng.uniform(0.06 * size, 0.15 * size))
            spec = ShapeSpec(kind, (cy, cx), (hw, hw), softness,
                             angle=float(rng.uniform(0.0, np.pi)),
                             half_length=float(rng.uniform(0.2 * size, 0.4 * size)))
        fg_kind = TEXTURE_KINDS[int(rng.integers(0, len(TEXTURE_KINDS)))]
        fg = shade_to_range(procedural_texture(fg_kind, size, rng), FG_VALUE_RANGE)
        items.append(ToyMattingItem(fg=fg, gt_alpha=shape_alpha(spec, size),
                                    shape=spec, index=i))
    return items


def train_test_split(items: list[ToyMattingItem]) -> tuple[list, list]:
    """First 80% train, last 20% test, by index."""
    cut = int(len(items) * 0.8)
    return items[:cut], items[cut:]
