"""Pixel I/O and bilinear extraction of fixed-resolution tokens.

Sampling uses the align-centers convention: output pixel (u, v) of a patch
(x, y, s) reads source position (x + (u+0.5)*s - 0.5, y + (v+0.5)*s - 0.5),
so an s = 1 patch at integer coordinates is an exact crop. Source coordinates
outside the image are clamped to the border (replicate padding).

Images are stored channel-major (C, H, W) as float64 in [0, 1]. File I/O
covers binary PPM/PGM and a strict subset of PNG (8-bit RGB or grayscale,
no interlacing); both are implemented here so parse failures can report the
offending byte offset.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .encoding import EncodingConfig, encode_patchset
from .errors import ParseError
from .geometry import ImageSpec, Patch, PatchSet


@dataclass(frozen=True)
class Image:
    """A decoded image: spec plus (C, H, W) float64 pixels in [0, 1]."""

    spec: ImageSpec
    pixels: np.ndarray

    def __post_init__(self):
        expect = (self.spec.channels, self.spec.height, self.spec.width)
        if self.pixels.shape != expect:
            raise ValueError(f"pixel array shape {self.pixels.shape} != {expect}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("pixel values must be finite")


@dataclass(frozen=True)
class Token:
    """One extracted token: (r, r, C) pixels, its patch, and its encoding."""

    pixels: np.ndarray
    patch: Patch
    encoding: np.ndarray


@dataclass
class TokenBatch:
    """Extracted tokens of one patch set: stacked pixels and encodings."""

    pixels: np.ndarray  # (n, r, r, C)
    encodings: np.ndarray  # (n, 4*l)
    patches: PatchSet

    def __len__(self):
        return self.pixels.shape[0]


def image_from_array(arr: np.ndarray) -> Image:
    """Wrap an (H, W) or (H, W, C) float array as an Image."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    elif arr.ndim == 3:
        arr = np.moveaxis(arr, 2, 0)
    else:
        raise ValueError(f"expected 2-d or 3-d array, got shape {arr.shape}")
    c, h, w = arr.shape
    return Image(spec=ImageSpec(width=w, height=h, channels=c), pixels=np.ascontiguousarray(arr))


def sample_patchset(img: Image, P: PatchSet, r: int | None = None) -> np.ndarray:
    """Bilinearly sample every patch of P from img; returns (n, r, r, C)."""
    r = P.r if r is None else r
    c, h, w = img.pixels.shape
    n = len(P)
    if n == 0:
        return np.zeros((0, r, r, c), dtype=np.float64)
    coords = P.coords()
    xs = coords[:, 0:1]
    ys = coords[:, 1:2]
    ss = coords[:, 2:3]
    centers = np.arange(r, dtype=np.float64) + 0.5
    sx = xs + centers[None, :] * ss - 0.5  # (n, r) source columns
    sy = ys + centers[None, :] * ss - 0.5  # (n, r) source rows

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    xa = np.clip(x0, 0, w - 1).astype(np.intp)
    xb = np.clip(x0 + 1, 0, w - 1).astype(np.intp)
    ya = np.clip(y0, 0, h - 1).astype(np.intp)
    yb = np.clip(y0 + 1, 0, h - 1).astype(np.intp)

    Ya, Yb = ya[:, :, None], yb[:, :, None]  # rows vary along axis 1
    Xa, Xb = xa[:, None, :], xb[:, None, :]  # cols vary along axis 2
    v00 = img.pixels[:, Ya, Xa]
    v01 = img.pixels[:, Ya, Xb]
    v10 = img.pixels[:, Yb, Xa]
    v11 = img.pixels[:, Yb, Xb]

    wx = fx[:, None, :]
    wy = fy[:, :, None]
    top = v00 * (1.0 - wx) + v01 * wx
    bot = v10 * (1.0 - wx) + v11 * wx
    vals = top * (1.0 - wy) + bot * wy  # (C, n, r, r)
    return np.moveaxis(vals, 0, -1)


def bilinear_sample(img: Image, p: Patch, r: int) -> np.ndarray:
    """Sample a single patch to an (r, r, C) token."""
    if r < 2:
        raise ValueError(f"token resolution must be >= 2, got {r}")
    one = PatchSet(image=img.spec, r=r, patches=(p,))
    return sample_patchset(img, one, r=r)[0]


def extract_batch(img: Image, P: PatchSet, cfg: EncodingConfig) -> TokenBatch:
    """Sample all patches and attach their positional encodings."""
    return TokenBatch(
        pixels=sample_patchset(img, P),
        encodings=encode_patchset(P, cfg),
        patches=P,
    )


def extract_tokens(img: Image, P: PatchSet, cfg: EncodingConfig) -> list[Token]:
    """One Token per patch, in patch-set order."""
    batch = extract_batch(img, P, cfg)
    return [
        Token(pixels=batch.pixels[i], patch=p, encoding=batch.encodings[i])
        for i, p in enumerate(P.patches)
    ]


# ---------------------------------------------------------------------------
# PPM / PGM


def _quantize(img: Image) -> np.ndarray:
    return np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)


def save_ppm(img: Image, path) -> None:
    """Write binary PPM (P6) for 3-channel or PGM (P5) for 1-channel images."""
    q = _quantize(img)
    magic = b"P6" if img.spec.channels == 3 else b"P5"
    header = b"%s\n%d %d\n255\n" % (magic, img.spec.width, img.spec.height)
    payload = np.moveaxis(q, 0, -1).tobytes() if img.spec.channels == 3 else q[0].tobytes()
    with open(path, "wb") as f:
        f.write(header + payload)


class _ByteScanner:
    """Tracks an offset while scanning header tokens of a netpbm file."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def skip_space(self):
        while self.pos < len(self.data):
            b = self.data[self.pos]
            if b in b" \t\r\n":
                self.pos += 1
            elif b == ord("#"):
                while self.pos < len(self.data) and self.data[self.pos] not in b"\n":
                    self.pos += 1
            else:
                return

    def read_int(self, what: str) -> int:
        self.skip_space()
        start = self.pos
        while self.pos < len(self.data) and self.data[self.pos : self.pos + 1].isdigit():
            self.pos += 1
        if self.pos == start:
            raise ParseError(f"expected integer for {what}", offset=start)
        return int(self.data[start : self.pos])


def load_ppm(path) -> Image:
    """Read a binary PPM (P6) or PGM (P5) file with 8-bit samples."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] not in (b"P6", b"P5"):
        raise ParseError(f"bad magic {data[:2]!r}, expected P6 or P5", offset=0)
    channels = 3 if data[:2] == b"P6" else 1
    sc = _ByteScanner(data)
    sc.pos = 2
    width = sc.read_int("width")
    height = sc.read_int("height")
    maxval = sc.read_int("maxval")
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}, expected 255", offset=sc.pos)
    if sc.pos >= len(data) or data[sc.pos] not in b" \t\r\n":
        raise ParseError("missing whitespace after maxval", offset=sc.pos)
    sc.pos += 1
    need = width * height * channels
    payload = data[sc.pos : sc.pos + need]
    if len(payload) < need:
        raise ParseError(
            f"truncated payload: need {need} bytes, have {len(payload)}",
            offset=sc.pos + len(payload),
        )
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 3:
        arr = np.moveaxis(arr.reshape(height, width, 3), 2, 0)
    else:
        arr = arr.reshape(1, height, width)
    spec = ImageSpec(width=width, height=height, channels=channels)
    return Image(spec=spec, pixels=arr)


# ---------------------------------------------------------------------------
# PNG (8-bit RGB or grayscale, no interlacing)

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def save_png(img: Image, path) -> None:
    """Write an 8-bit PNG: color type 2 (RGB) or 0 (grayscale), filter 0."""
    q = _quantize(img)
    h, w = img.spec.height, img.spec.width
    color_type = 2 if img.spec.channels == 3 else 0
    if img.spec.channels == 3:
        rows = np.moveaxis(q, 0, -1).reshape(h, w * 3)
    else:
        rows = q[0]
    raw = b"".join(b"\x00" + rows[y].tobytes() for y in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)

    def chunk(tag: bytes, body: bytes) -> bytes:
        crc = zlib.crc32(tag + body) & 0xFFFFFFFF
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", crc)

    with open(path, "wb") as f:
        f.write(_PNG_SIG)
        f.write(chunk(b"IHDR", ihdr))
        f.write(chunk(b"IDAT", zlib.compress(raw, level=6)))
        f.write(chunk(b"IEND", b""))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _unfilter(raw: bytes, h: int, w: int, bpp: int) -> np.ndarray:
    stride = w * bpp
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for y in range(h):
        ftype = raw[pos]
        row = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=pos + 1).copy()
        pos += 1 + stride
        prev = out[y - 1] if y > 0 else np.zeros(stride, dtype=np.uint8)
        if ftype == 0:
            pass
        elif ftype == 1:  # Sub
            for i in range(bpp, stride):
                row[i] = (int(row[i]) + int(row[i - bpp])) & 0xFF
        elif ftype == 2:  # Up
            row = (row.astype(np.int32) + prev).astype(np.uint8)
        elif ftype == 3:  # Average
            for i in range(stride):
                left = int(row[i - bpp]) if i >= bpp else 0
                row[i] = (int(row[i]) + (left + int(prev[i])) // 2) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                left = int(row[i - bpp]) if i >= bpp else 0
                ul = int(prev[i - bpp]) if i >= bpp else 0
                row[i] = (int(row[i]) + _paeth(left, int(prev[i]), ul)) & 0xFF
        else:
            raise ParseError(f"unknown scanline filter {ftype}", offset=None)
        out[y] = row
    return out


def load_png(path) -> Image:
    """Read an 8-bit non-interlaced PNG, RGB or grayscale (alpha rejected)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(_PNG_SIG)] != _PNG_SIG:
        raise ParseError("bad PNG signature", offset=0)
    pos = len(_PNG_SIG)
    width = height = None
    channels = None
    idat = b""
    while pos < len(data):
        if pos + 8 > len(data):
            raise ParseError("truncated chunk header", offset=pos)
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        tag = data[pos + 4 : pos + 8]
        body = data[pos + 8 : pos + 8 + length]
        if len(body) < length or pos + 12 + length > len(data):
            raise ParseError(f"truncated {tag!r} chunk", offset=pos + 8)
        (crc,) = struct.unpack(">I", data[pos + 8 + length : pos + 12 + length])
        if zlib.crc32(tag + body) & 0xFFFFFFFF != crc:
            raise ParseError(f"bad CRC in {tag!r} chunk", offset=pos + 8 + length)
        if tag == b"IHDR":
            width, height, depth, color_type, comp, filt, interlace = struct.unpack(
                ">IIBBBBB", body
            )
            if depth != 8:
                raise ParseError(f"unsupported bit depth {depth}", offset=pos + 16)
            if color_type not in (0, 2):
                raise ParseError(f"unsupported color type {color_type}", offset=pos + 17)
            if interlace != 0:
                raise ParseError("interlaced PNG not supported", offset=pos + 20)
            channels = 3 if color_type == 2 else 1
        elif tag == b"IDAT":
            idat += body
        elif tag == b"IEND":
            break
        pos += 12 + length
    if width is None or channels is None:
        raise ParseError("missing IHDR chunk", offset=len(_PNG_SIG))
    try:
        raw = zlib.decompress(idat)
    except zlib.error as e:
        raise ParseError(f"bad IDAT stream: {e}", offset=None) from e
    expect = height * (1 + width * channels)
    if len(raw) != expect:
        raise ParseError(f"decompressed size {len(raw)} != expected {expect}", offset=None)
    rows = _unfilter(raw, height, width, channels)
    arr = rows.reshape(height, width, channels).astype(np.float64) / 255.0
    spec = ImageSpec(width=width, height=height, channels=channels)
    return Image(spec=spec, pixels=np.moveaxis(arr, 2, 0))


def load_image(path) -> Image:
    """Load a PPM/PGM or PNG image, dispatching on the leading magic bytes."""
    with open(path, "rb") as f:
        head = f.read(8)
    if head[: len(_PNG_SIG)] == _PNG_SIG:
        return load_png(path)
    if head[:2] in (b"P6", b"P5"):
        return load_ppm(path)
    raise ParseError(f"unrecognized image magic {head[:2]!r}", offset=0)


def save_image(img: Image, path) -> None:
    """Save as PNG or PPM/PGM depending on the path suffix."""
    suffix = str(path).lower()
    if suffix.endswith(".png"):
        save_png(img, path)
    elif suffix.endswith((".ppm", ".pgm")):
        save_ppm(img, path)
    else:
        raise ValueError(f"unsupported image suffix in {path!r} (use .png/.ppm/.pgm)")
