"""Image decoding, manifests and run configuration files."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MANIFEST_HEADER = ["ref_path", "dist_path", "mos"]
CONFIG_ENV = "IQT_CONFIG"


@dataclass
class ImageBuffer:
    """An RGB image with samples in [0, 1], stored row-major as (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise FormatError(f"image must be H x W x 3 with H, W >= 1, got shape {p.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @classmethod
    def from_uint8(cls, array):
        return cls(np.asarray(array, dtype=np.uint8).astype(np.float64) / 255.0)

    def to_uint8(self):
        return np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)

    def crop(self, top, left, size):
        return ImageBuffer(self.pixels[top : top + size, left : left + size])


# --- netpbm ----------------------------------------------------------------

_WHITESPACE = b" \t\n\r\v\f"


def _read_header_fields(data, count, path):
    """Return ``count`` ASCII integer fields after the magic plus the payload offset."""
    pos = 2
    fields = []
    while len(fields) < count:
        if pos >= len(data):
            raise FormatError("truncated header", offset=pos, path=path)
        c = data[pos : pos + 1]
        if c in _WHITESPACE:
            pos += 1
        elif c == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        elif c.isdigit():
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise FormatError(f"unexpected byte {c!r} in header", offset=pos, path=path)
    if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
        raise FormatError("header must end with a single whitespace byte", offset=pos, path=path)
    return fields, pos + 1


def decode_ppm(data, path=None):
    if data[:2] != b"P6":
        raise FormatError(f"not a binary PPM (magic {data[:2]!r}, expected b'P6')", offset=0, path=path)
    (width, height, maxval), start = _read_header_fields(data, 3, path)
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}", offset=2, path=path)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", offset=2, path=path)
    need = width * height * 3
    if len(data) - start < need:
        raise FormatError(
            f"truncated payload: need {need} bytes, have {len(data) - start}", offset=len(data), path=path
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=start)
    return ImageBuffer.from_uint8(raw.reshape(height, width, 3))


def encode_ppm(image):
    px = image.to_uint8() if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.uint8)
    h, w = px.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def encode_pgm(gray):
    """8-bit binary graymap (P5) from an (H, W) uint8 array."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def decode_pgm(data, path=None):
    if data[:2] != b"P5":
        raise FormatError(f"not a binary PGM (magic {data[:2]!r})", offset=0, path=path)
    (width, height, maxval), start = _read_header_fields(data, 3, path)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", offset=2, path=path)
    need = width * height
    if len(data) - start < need:
        raise FormatError("truncated payload", offset=len(data), path=path)
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=start).reshape(height, width)


def decode_image(path):
    """Load an RGB image. P6 is native; other formats go through Pillow if it is installed."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P6" or path.suffix.lower() in (".ppm", ".pnm"):
        return decode_ppm(data, path=path)
    try:
        from PIL import Image
    except ImportError:
        raise FormatError("unsupported image format (install Pillow for non-PPM inputs)", offset=0, path=path) from None
    try:
        with Image.open(path) as im:
            return ImageBuffer.from_uint8(np.asarray(im.convert("RGB")))
    except OSError as exc:
        raise FormatError(f"cannot decode image: {exc}", offset=0, path=path) from None


def write_image(path, image):
    Path(path).write_bytes(encode_ppm(image))


# --- manifests -------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    ref_path: Path
    dist_path: Path
    mos: float


def parse_manifest(path):
    """Read a ``ref_path,dist_path,mos`` CSV; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise FormatError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {header}",
                              offset=1, path=path, unit="line")
        entries = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise FormatError(f"expected 3 fields, got {len(row)}", offset=line, path=path, unit="line")
            ref, dist, mos = (c.strip() for c in row)
            try:
                value = float(mos)
            except ValueError:
                raise FormatError(f"mos {mos!r} is not a number", offset=line, path=path, unit="line") from None
            entries.append(ManifestEntry(base / ref, base / dist, value))
    return entries


def write_manifest(path, rows):
    """Write (ref, dist, mos) rows; paths are stored as given."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for ref, dist, mos in rows:
            w.writerow([str(ref), str(dist), repr(float(mos))])


# --- run configuration -----------------------------------------------------


def _parse_bool(value):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


# key -> parser
RUN_KEYS = {
    "preset": str,
    "seed": int,
    "patch_size": int,
    "batch_size": int,
    "lr0": float,
    "total_steps": int,
    "trace": _parse_bool,
    "flip": _parse_bool,
    "rotate": _parse_bool,
    "backbone": str,
    "backbone_stages": int,
    "backbone_channels": int,
    "downsample": int,
    "layers": int,
    "heads": int,
    "dim": int,
    "ff_dim": int,
    "head_dim": int,
    "log_every": int,
}


class RunConfig(dict):
    """Flat ``key = value`` settings. Unknown keys are rejected."""

    @classmethod
    def parse(cls, text, source="<string>"):
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg._set(key, value, f"{source}:{lineno}")
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.parse(path.read_text(encoding="utf-8"), source=str(path))

    @classmethod
    def from_env(cls):
        path = os.environ.get(CONFIG_ENV)
        return cls.load(path) if path else cls()

    def _set(self, key, value, where):
        if key not in RUN_KEYS:
            raise ConfigError(f"{where}: unknown key {key!r} (known: {', '.join(sorted(RUN_KEYS))})")
        try:
            self[key] = RUN_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None

    def override(self, **values):
        """Apply command-line overrides; ``None`` values are ignored."""
        out = RunConfig(self)
        for key, value in values.items():
            if value is None:
                continue
            out._set(key, value, f"--{key}")
        return out
