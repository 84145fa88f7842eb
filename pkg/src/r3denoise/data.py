"""Image I/O (binary PGM), patch sampling, PSNR, synthetic corpus.

Images live in memory as 2-D float64 arrays on the 0-255 scale; the only
storage format is 8-bit binary PGM (P5, maxval 255), chosen because it is
bit-exact and needs no dependencies. Parse failures report the byte offset
where the reader gave up.
"""

from __future__ import annotations

import glob
import os
import warnings

import numpy as np

PEAK = 255.0


class PgmError(ValueError):
    """Malformed or unsupported PGM input."""


class _ByteScanner:
    """Token reader over PGM header bytes, tracking the current offset."""

    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def _skip_separators(self):
        while self.pos < len(self.blob):
            b = self.blob[self.pos]
            if b in b" \t\r\n":
                self.pos += 1
            elif b == ord("#"):  # comment runs to end of line
                while self.pos < len(self.blob) and self.blob[self.pos] not in b"\r\n":
                    self.pos += 1
            else:
                return

    def token(self, what):
        self._skip_separators()
        start = self.pos
        while self.pos < len(self.blob) and self.blob[self.pos] not in b" \t\r\n":
            self.pos += 1
        if start == self.pos:
            raise PgmError(f"expected {what} at byte offset {start}, found end of file")
        return self.blob[start:self.pos], start

    def int_token(self, what):
        tok, start = self.token(what)
        try:
            value = int(tok)
        except ValueError:
            raise PgmError(
                f"expected integer {what} at byte offset {start}, got {tok!r}"
            ) from None
        if value <= 0:
            raise PgmError(f"{what} at byte offset {start} must be positive, got {value}")
        return value, start


def load_pgm(path):
    """Read a binary PGM (P5, maxval 255) into a 2-D float64 array."""
    with open(path, "rb") as f:
        blob = f.read()
    sc = _ByteScanner(blob)
    magic, start = sc.token("magic number")
    if magic != b"P5":
        raise PgmError(
            f"unsupported magic {magic!r} at byte offset {start}: "
            "only binary grayscale PGM (P5) is handled, color/ASCII formats are not"
        )
    width, _ = sc.int_token("width")
    height, _ = sc.int_token("height")
    maxval, maxval_off = sc.int_token("maxval")
    if maxval != 255:
        raise PgmError(
            f"unsupported maxval {maxval} at byte offset {maxval_off}: only 255 (8-bit)"
        )
    if sc.pos >= len(blob) or blob[sc.pos] not in b" \t\r\n":
        raise PgmError(f"expected single whitespace byte after maxval at offset {sc.pos}")
    sc.pos += 1
    need = width * height
    have = len(blob) - sc.pos
    if have < need:
        raise PgmError(
            f"truncated payload at byte offset {sc.pos}: need {need} pixel bytes, have {have}"
        )
    if have > need:
        raise PgmError(
            f"trailing data after payload: expected {need} pixel bytes from offset "
            f"{sc.pos}, file has {have}"
        )
    pixels = np.frombuffer(blob, dtype=np.uint8, count=need, offset=sc.pos)
    return pixels.reshape(height, width).astype(np.float64)


def save_pgm(path, image):
    """Write a 2-D array as binary PGM; values are rounded and clipped to 8 bits."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {img.shape}")
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())
    os.replace(tmp, path)


def load_dataset(directory):
    """All *.pgm files under ``directory``, sorted by name, as float arrays."""
    paths = sorted(glob.glob(os.path.join(directory, "*.pgm")))
    if not paths:
        raise ValueError(f"no .pgm images found in {directory}")
    return [load_pgm(p) for p in paths]


def psnr(reference, estimate):
    """10*log10(255^2 / MSE) in dB; identical inputs give +infinity."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"psnr shape mismatch: {ref.shape} vs {est.shape}")
    mse = np.mean((ref - est) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(PEAK * PEAK / mse))


def sample_patches(images, patch_size, count, rng):
    """Uniformly random (count, 1, P, P) clean patch batch.

    Per patch, three draws in fixed order: source image, top row, left
    column. Images smaller than the patch in either dimension are skipped
    with a warning; if none remain, that is an error.
    """
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    usable = [img for img in images
              if img.shape[0] >= patch_size and img.shape[1] >= patch_size]
    skipped = len(images) - len(usable)
    if skipped:
        warnings.warn(
            f"sample_patches: skipping {skipped} image(s) smaller than "
            f"{patch_size}x{patch_size}"
        )
    if not usable:
        raise ValueError(
            f"no image is at least {patch_size}x{patch_size}; cannot sample patches"
        )
    out = np.empty((count, 1, patch_size, patch_size))
    for k in range(count):
        img = usable[int(rng.integers(len(usable)))]
        r = int(rng.integers(img.shape[0] - patch_size + 1))
        c = int(rng.integers(img.shape[1] - patch_size + 1))
        out[k, 0] = img[r:r + patch_size, c:c + patch_size]
    return out


def make_synthetic_dataset(count=24, size=96, seed=0):
    """Piecewise-smooth grayscale test images (list of 2-D float arrays).

    Each image is a smooth ramp plus a handful of constant-intensity
    rectangles and ellipses, lightly blurred and quantized to 8-bit values.
    Handy as a self-contained training/eval corpus when no external images
    are around.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = []
    for _ in range(count):
        gx, gy = rng.uniform(-0.5, 0.5, size=2)
        base = rng.uniform(60, 200)
        img = base + gx * (xx - size / 2) + gy * (yy - size / 2)
        for _ in range(int(rng.integers(3, 7))):
            level = rng.uniform(20, 235)
            if rng.random() < 0.5:
                r0, c0 = rng.integers(0, size - 8, size=2)
                h = int(rng.integers(8, size // 2))
                w = int(rng.integers(8, size // 2))
                img[r0:r0 + h, c0:c0 + w] = level
            else:
                cy, cx = rng.uniform(8, size - 8, size=2)
                ry, rx = rng.uniform(5, size / 3, size=2)
                mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
                img[mask] = level
        # 3x3 binomial blur (reflect padding) to soften edges a little
        padded = np.pad(img, 1, mode="reflect")
        img = (
            padded[:-2, 1:-1] + padded[2:, 1:-1]
            + padded[1:-1, :-2] + padded[1:-1, 2:]
            + 2.0 * padded[1:-1, 1:-1]
            + 0.5 * (padded[:-2, :-2] + padded[:-2, 2:] + padded[2:, :-2] + padded[2:, 2:])
        ) / 8.0
        images.append(np.clip(np.rint(img), 0, 255).astype(np.float64))
    return images
