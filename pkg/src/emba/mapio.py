"""PFM / PGM reading and writing for gradient, intensity and mask images."""

from __future__ import annotations

import os

import numpy as np

from .panorama import GradientMap, forward_gradient


class MapFormatError(ValueError):
    pass


def _read_header_tokens(fh, count):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens = []
    while len(tokens) < count:
        line = fh.readline()
        if not line:
            raise MapFormatError("truncated header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    if len(tokens) != count:
        raise MapFormatError("malformed header")
    return [t.decode("ascii") for t in tokens]


def write_pfm(path, image):
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        try:
            magic, w, h, scale = _read_header_tokens(fh, 4)
            w, h, scale = int(w), int(h), float(scale)
        except (MapFormatError, ValueError) as exc:
            raise MapFormatError(f"{path}: malformed PFM header ({exc})") from None
        if magic not in ("Pf", "PF"):
            raise MapFormatError(f"{path}: not a PFM file")
        if w <= 0 or h <= 0:
            raise MapFormatError(f"{path}: invalid PFM size {w}x{h}")
        channels = 3 if magic == "PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise MapFormatError(f"{path}: expected {w * h * channels} samples, found {data.size}")
    img = data.reshape(h, w, channels)[::-1].astype(float)
    return img[..., 0] if channels == 1 else img


def write_pgm(path, image, maxval=255):
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM writer expects a 2-D array")
    if not 0 < maxval < 65536:
        raise ValueError("PGM maxval must be in [1, 65535]")
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.clip(np.round(img), 0, maxval).astype(dtype)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    """Binary PGM as an integer array plus its maxval."""
    with open(path, "rb") as fh:
        try:
            magic, w, h, maxval = _read_header_tokens(fh, 4)
            w, h, maxval = int(w), int(h), int(maxval)
        except (MapFormatError, ValueError) as exc:
            raise MapFormatError(f"{path}: malformed PGM header ({exc})") from None
        if magic != "P5":
            raise MapFormatError(f"{path}: only binary (P5) PGM is supported")
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h:
        raise MapFormatError(f"{path}: expected {w * h} samples, found {data.size}")
    return data.reshape(h, w).astype(np.int64), maxval


def intensity_to_u16(M):
    """Map log intensity to 16 bits, symmetric about the mean; a flat map is mid-gray."""
    M = np.asarray(M, dtype=float)
    centered = M - M.mean()
    peak = np.abs(centered).max()
    if peak == 0 or not np.isfinite(peak):
        return np.full(M.shape, 32768, dtype=np.int64)
    return np.round(32767.5 + 32767.5 * centered / peak).astype(np.int64)


def gradient_paths(prefix):
    return f"{prefix}.gx.pfm", f"{prefix}.gy.pfm"


def write_gradient_map(prefix, G: GradientMap):
    gx_path, gy_path = gradient_paths(prefix)
    write_pfm(gx_path, G.gx)
    write_pfm(gy_path, G.gy)
    return gx_path, gy_path


def _gradient_prefix(path):
    path = str(path)
    for suffix in (".gx.pfm", ".gy.pfm"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    if os.path.exists(f"{path}.gx.pfm"):
        return path
    return None


def read_intensity(path):
    """Log intensity from a PFM (taken as is) or a PGM (brightness, log-transformed)."""
    path = str(path)
    if path.lower().endswith(".pgm"):
        img, maxval = read_pgm(path)
        return np.log(img / maxval + 1.0 / 255.0)
    img = read_pfm(path)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return img


def read_gradient_map(path):
    """Load a gradient map from a ``.gx.pfm``/``.gy.pfm`` pair, or derive it from an intensity image."""
    prefix = _gradient_prefix(path)
    if prefix is not None:
        gx_path, gy_path = gradient_paths(prefix)
        for p in (gx_path, gy_path):
            if not os.path.exists(p):
                raise FileNotFoundError(p)
        gx, gy = read_pfm(gx_path), read_pfm(gy_path)
        if gx.ndim != 2 or gx.shape != gy.shape:
            raise MapFormatError(f"{prefix}: gradient channels differ in shape")
        return GradientMap.from_channels(gx, gy)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    gx, gy = forward_gradient(read_intensity(path))
    return GradientMap.from_channels(gx, gy)
