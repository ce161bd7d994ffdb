"""
Image I/O Service
=================

Binary PPM (P6, 8-bit) and PFM (32-bit float) images, chosen by file
extension, plus decoding of external normal maps.

- PPM values are mapped to [0, 1] on load and quantized on save
- PFM is written little-endian (scale -1.0) with rows bottom-to-top;
  both byte orders are accepted on load
- "PF" holds three channels, "Pf" a single channel
"""

import re
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from app.core.exceptions import ImageFormatError
from app.core.logging import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

NORMAL_MASK_EPS = 1e-6
IMAGE_SUFFIXES = (".ppm", ".pfm")
_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def _format_of(path: Path) -> str:
    ext = path.suffix.lower()
    if ext not in IMAGE_SUFFIXES:
        raise ImageFormatError(f"unsupported image extension '{ext}' for {path}")
    return ext[1:]


def _read_line(data: bytes, start: int) -> Tuple[str, int]:
    end = data.find(b"\n", start)
    if end < 0:
        raise ImageFormatError("truncated header")
    return data[start:end].decode("ascii", errors="replace").strip(), end + 1


def _decode_ppm(data: bytes, path: Path) -> np.ndarray:
    match = _PPM_HEADER.match(data)
    if not match:
        raise ImageFormatError(f"{path} is not a binary P6 PPM")
    width, height, maxval = (int(g) for g in match.groups())
    if not 0 < maxval < 256:
        raise ImageFormatError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    count = width * height * 3
    body = data[match.end():]
    if len(body) < count:
        raise ImageFormatError(f"{path}: truncated pixel data ({len(body)} of {count} bytes)")
    pixels = np.frombuffer(body[:count], dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / float(maxval)


def _decode_pfm(data: bytes, path: Path) -> np.ndarray:
    kind, pos = _read_line(data, 0)
    if kind not in ("PF", "Pf"):
        raise ImageFormatError(f"{path} is not a PFM file")
    dims, pos = _read_line(data, pos)
    scale_text, pos = _read_line(data, pos)
    try:
        width, height = (int(x) for x in dims.split())
        scale = float(scale_text)
    except ValueError as e:
        raise ImageFormatError(f"{path}: malformed PFM header") from e
    if scale == 0.0:
        raise ImageFormatError(f"{path}: PFM scale must be non-zero")
    channels = 3 if kind == "PF" else 1
    dtype = np.dtype("<f4") if scale < 0.0 else np.dtype(">f4")
    count = width * height * channels
    body = data[pos:]
    if len(body) < count * 4:
        raise ImageFormatError(f"{path}: truncated pixel data ({len(body)} of {count * 4} bytes)")
    values = np.frombuffer(body[: count * 4], dtype=dtype).astype(np.float64)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return values.reshape(shape)[::-1].copy()


def load_image(path: PathLike, expected_shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Read a PPM or PFM image as float64.

    Args:
        path: image file; the extension selects the format
        expected_shape: (height, width) the image must have

    Returns:
        np.ndarray: (H, W, 3) or, for single-channel PFM, (H, W)

    Raises:
        ImageFormatError: unsupported extension, malformed or truncated data,
            or a size different from `expected_shape`
    """
    path = Path(path)
    fmt = _format_of(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ImageFormatError(f"cannot read {path}: {e}") from e
    image = _decode_ppm(data, path) if fmt == "ppm" else _decode_pfm(data, path)
    if expected_shape is not None and image.shape[:2] != tuple(expected_shape):
        raise ImageFormatError(
            f"{path}: size {image.shape[1]}x{image.shape[0]} does not match "
            f"expected {expected_shape[1]}x{expected_shape[0]}"
        )
    return image


def save_image(buffer: np.ndarray, path: PathLike) -> None:
    """
    Write an (H, W, 3) or (H, W) buffer; single-channel PPMs are written gray.

    Raises:
        ImageFormatError: unsupported extension or buffer layout
    """
    path = Path(path)
    fmt = _format_of(path)
    image = np.asarray(buffer, dtype=np.float64)
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] != 3):
        raise ImageFormatError(f"cannot store buffer of shape {image.shape} as an image")
    height, width = image.shape[:2]
    path.parent.mkdir(parents=True, exist_ok=True)

    if fmt == "ppm":
        rgb = image if image.ndim == 3 else np.repeat(image[:, :, None], 3, axis=2)
        pixels = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
        path.write_bytes(f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())
    else:
        kind = "PF" if image.ndim == 3 else "Pf"
        body = image[::-1].astype("<f4").tobytes()
        path.write_bytes(f"{kind}\n{width} {height}\n-1.0\n".encode("ascii") + body)
    logger.debug(f"Wrote {fmt.upper()} image {path} ({width}x{height})")


def load_normal_map(path: PathLike, expected_shape: Optional[Tuple[int, int]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Decode an external normal map.

    PFM files hold raw vectors; PPM files hold vectors encoded as (n + 1) / 2.
    Every vector is renormalized and those shorter than 1e-6 are masked out.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (H, W, 3) unit normals (zero where
        masked) and the (H, W) validity mask
    """
    path = Path(path)
    raw = load_image(path, expected_shape)
    if raw.ndim != 3:
        raise ImageFormatError(f"{path}: a normal map needs three channels")
    vectors = raw * 2.0 - 1.0 if path.suffix.lower() == ".ppm" else raw
    norms = np.linalg.norm(vectors, axis=-1)
    valid = norms >= NORMAL_MASK_EPS
    normals = np.zeros_like(vectors)
    normals[valid] = vectors[valid] / norms[valid][:, None]
    masked = int((~valid).sum())
    if masked:
        logger.debug(f"{path}: {masked} normal-map pixels masked")
    return normals, valid
