"""Image containers, deterministic I/O and preprocessing.

Conventions used across the package:

- RGB image: float64 array of shape (H, W, 3), values in [0, 1]
- binary mask: uint8 array of shape (H, W), values in {0, 1}
- scalar field: float64 array of shape (H, W), all values finite

Pixels are kept in double precision internally; quantization to 8 or 16
bits happens only when reading or writing files. All operations here are
pure functions and safe to call concurrently.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImagingError(Exception):
    """Base class for image I/O and preprocessing failures."""


class UnreadableFileError(ImagingError):
    """File is missing or cannot be read."""


class UnsupportedFormatError(ImagingError):
    """File decodes to no known image format or an unsupported mode."""


class EmptyImageError(ImagingError):
    """Image has a zero dimension."""


# BT.601 luma coefficients. Replacing luma Y with Y' in a YCbCr round trip
# is equivalent to adding (Y' - Y) to every RGB channel, so no explicit
# chroma conversion is needed.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

_READ_FORMATS = ("PNG", "JPEG")


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check the RGB image contract and return the array unchanged."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise EmptyImageError(f"zero-dimension image: shape {img.shape}")
    return img


def validate_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected (H, W) mask, got shape {mask.shape}")
    return mask


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of an RGB image, shape (H, W)."""
    return np.asarray(img, dtype=np.float64) @ _LUMA


def load_image(path) -> np.ndarray:
    """Load an 8- or 16-bit PNG/JPEG as a float64 RGB image in [0, 1].

    Intensities are mapped affinely: 8-bit values divide by 255, 16-bit
    by 65535. Grayscale images are replicated to three channels; alpha is
    dropped. Loading the same file twice yields bit-identical arrays.
    """
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in _READ_FORMATS:
                raise UnsupportedFormatError(f"{path}: unsupported format {fmt!r}")
            im.load()
            arr, scale = _decode(im)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a recognized image file") from exc
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as exc:
        if isinstance(exc, ImagingError):
            raise
        raise UnreadableFileError(f"{path}: {exc}") from exc
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise EmptyImageError(f"{path}: zero-dimension image")
    img = arr.astype(np.float64) / scale
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return np.clip(img, 0.0, 1.0)


def _decode(im: Image.Image):
    """Return (array, intensity scale) for the supported PIL modes."""
    mode = im.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return np.asarray(im, dtype=np.float64), 65535.0
    if mode in ("RGB", "L"):
        return np.asarray(im), 255.0
    if mode in ("RGBA", "LA", "P", "CMYK", "1"):
        return np.asarray(im.convert("RGB")), 255.0
    raise UnsupportedFormatError(f"unsupported image mode {mode!r}")


def save_image(path, img: np.ndarray) -> None:
    """Write an RGB image as 8-bit PNG (round-to-nearest quantization)."""
    img = validate_image(img)
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Load a single-channel mask file; nonzero pixels map to 1."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("L"))
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a recognized image file") from exc
    except OSError as exc:
        raise UnreadableFileError(f"{path}: {exc}") from exc
    return (arr > 0).astype(np.uint8)


def save_mask(path, mask: np.ndarray) -> None:
    """Write a binary mask as 8-bit PNG with values {0, 255}."""
    mask = validate_mask(mask)
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def save_heatmap(path, field: np.ndarray) -> None:
    """Write a probability field in [0, 1] as 16-bit grayscale PNG."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError(f"expected (H, W) field, got shape {field.shape}")
    q = np.floor(np.clip(field, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def load_heatmap(path) -> np.ndarray:
    """Read a 16-bit grayscale heatmap PNG back to float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im, dtype=np.float64)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a recognized image file") from exc
    except OSError as exc:
        raise UnreadableFileError(f"{path}: {exc}") from exc
    if arr.ndim != 2:
        raise UnsupportedFormatError(f"{path}: heatmap must be single-channel")
    return arr / 65535.0


def _resize_plane(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of one 2-D plane with corner alignment."""
    in_h, in_w = a.shape

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out, dtype=np.int64), np.zeros(n_out, dtype=np.int64), np.zeros(n_out)
        x = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
        lo = np.floor(x).astype(np.int64)
        lo = np.minimum(lo, n_in - 2)
        return lo, lo + 1, x - lo

    y0, y1, ty = coords(out_h, in_h)
    x0, x1, tx = coords(out_w, in_w)
    rows = a[y0] * (1.0 - ty)[:, None] + a[y1] * ty[:, None]
    return rows[:, x0] * (1.0 - tx) + rows[:, x1] * tx


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Resizing to the input size is an exact identity; output stays in [0, 1].
    """
    img = validate_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dimensions must be >= 1, got {out_h}x{out_w}")
    if (out_h, out_w) == img.shape[:2]:
        return img.copy()
    out = np.stack(
        [_resize_plane(img[:, :, c], out_h, out_w) for c in range(3)], axis=2
    )
    return np.clip(out, 0.0, 1.0)


def resize_field(field: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a scalar field (same sampling as `resize`)."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValueError(f"expected (H, W) field, got shape {field.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target dimensions must be >= 1, got {out_h}x{out_w}")
    if (out_h, out_w) == field.shape:
        return field.copy()
    return _resize_plane(field, out_h, out_w)


def clahe(img: np.ndarray, clip_limit: float = 2.0, grid: int = 8) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on the luma channel.

    The image is split into a `grid` x `grid` tiling. Each tile gets a
    256-bin luma histogram, clipped at ``clip_limit`` times the mean bin
    height with the excess redistributed uniformly, and a midpoint-CDF
    equalization map. Pixels are remapped by bilinear interpolation
    between the maps of the four surrounding tile centers, and the luma
    delta is added back to all channels. Output is clamped to [0, 1].

    Args:
        img: RGB image in [0, 1].
        clip_limit: histogram clip as a multiple of the uniform bin height.
        grid: tiles per side; image dimensions must be >= grid.
    """
    img = validate_image(img)
    if grid < 1:
        raise ValueError("grid must be >= 1")
    if clip_limit <= 0:
        raise ValueError("clip_limit must be positive")
    h, w = img.shape[:2]
    if h < grid or w < grid:
        raise ValueError(f"image {h}x{w} smaller than the {grid}x{grid} tile grid")

    luma = luminance(img)
    bins = np.floor(np.clip(luma, 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)

    row_edges = np.floor(np.arange(grid + 1) * h / grid + 0.5).astype(np.int64)
    col_edges = np.floor(np.arange(grid + 1) * w / grid + 0.5).astype(np.int64)

    luts = np.empty((grid, grid, 256), dtype=np.float64)
    for ti in range(grid):
        for tj in range(grid):
            tile = bins[row_edges[ti]:row_edges[ti + 1], col_edges[tj]:col_edges[tj + 1]]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            clip = max(clip_limit * n / 256.0, 1.0)
            excess = np.maximum(hist - clip, 0.0).sum()
            hist = np.minimum(hist, clip) + excess / 256.0
            cdf = np.cumsum(hist)
            luts[ti, tj] = (cdf - hist / 2.0) / n

    centers_r = (row_edges[:-1] + row_edges[1:] - 1) / 2.0
    centers_c = (col_edges[:-1] + col_edges[1:] - 1) / 2.0
    r0, r1, tr = _tile_interp(h, centers_r)
    c0, c1, tc = _tile_interp(w, centers_c)

    v00 = luts[r0[:, None], c0[None, :], bins]
    v01 = luts[r0[:, None], c1[None, :], bins]
    v10 = luts[r1[:, None], c0[None, :], bins]
    v11 = luts[r1[:, None], c1[None, :], bins]
    top = v00 * (1.0 - tc) + v01 * tc
    bot = v10 * (1.0 - tc) + v11 * tc
    equalized = top * (1.0 - tr)[:, None] + bot * tr[:, None]

    return np.clip(img + (equalized - luma)[:, :, None], 0.0, 1.0)


def _tile_interp(n: int, centers: np.ndarray):
    """Neighbor tile indices and blend weight for each pixel coordinate."""
    p = np.arange(n, dtype=np.float64)
    k0 = np.clip(np.searchsorted(centers, p, side="right") - 1, 0, len(centers) - 1)
    k1 = np.minimum(k0 + 1, len(centers) - 1)
    span = centers[k1] - centers[k0]
    t = np.where(span > 0, (p - centers[k0]) / np.where(span > 0, span, 1.0), 0.0)
    return k0, k1, np.clip(t, 0.0, 1.0)


def render_overlay(img: np.ndarray, pred: np.ndarray, gt: np.ndarray,
                   tint: float = 0.5) -> np.ndarray:
    """Tint prediction outcomes over the image.

    True positives turn green, false positives yellow, false negatives
    red; everywhere else the base image passes through.
    """
    img = validate_image(img)
    pred = validate_mask(pred)
    gt = validate_mask(gt)
    if pred.shape != img.shape[:2] or gt.shape != img.shape[:2]:
        raise ValueError(
            f"dimension mismatch: img {img.shape[:2]}, pred {pred.shape}, gt {gt.shape}"
        )
    p = pred > 0
    g = gt > 0
    out = img.copy()
    for region, color in (
        (p & g, (0.0, 1.0, 0.0)),
        (p & ~g, (1.0, 1.0, 0.0)),
        (~p & g, (1.0, 0.0, 0.0)),
    ):
        out[region] = (1.0 - tint) * img[region] + tint * np.asarray(color)
    return out
