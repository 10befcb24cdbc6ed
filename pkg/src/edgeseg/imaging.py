"""PNG I/O and a bit-exact Canny edge detector.

Images are plain ``uint8`` arrays, ``H x W`` (grey) or ``H x W x 3`` (RGB).
Edge maps are float arrays in [0, 1] with the image's height and width.

Canny is computed in exact integer arithmetic: the 5x5 Gaussian (sigma 1.4) is
the classic integer kernel summing to 159, so the blurred image, Sobel
responses and squared magnitudes are exact integers. Thresholds on the 0-255
scale are compared against ``gx**2 + gy**2`` after scaling by 159, which keeps
results identical across platforms and BLAS builds.
"""

from __future__ import annotations

import math
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy import ndimage

DEFAULT_LOW = 100.0
DEFAULT_HIGH = 200.0

GAUSS_5x5 = np.array(
    [
        [2, 4, 5, 4, 2],
        [4, 9, 12, 9, 4],
        [5, 12, 15, 12, 5],
        [4, 9, 12, 9, 4],
        [2, 4, 5, 4, 2],
    ],
    dtype=np.int64,
)
GAUSS_SUM = int(GAUSS_5x5.sum())  # 159
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)
SOBEL_Y = SOBEL_X.T.copy()
_TAN_22 = math.sqrt(2.0) - 1.0
_TAN_67 = math.sqrt(2.0) + 1.0


class ImageIOError(IOError):
    pass


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError(f"expected uint8 image, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"expected H x W or H x W x 3 image, got shape {img.shape}")
    return img


def rgb_to_luma(img: np.ndarray) -> np.ndarray:
    """round(0.299 R + 0.587 G + 0.114 B), half rounded up. Grey input passes through."""
    img = validate_image(img)
    if img.ndim == 2:
        return img
    rgb = img.astype(np.float64)
    y = np.floor(0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2] + 0.5)
    return np.clip(y, 0, 255).astype(np.uint8)


def _correlate_reflect(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = kernel.shape[0] // 2
    padded = np.pad(img, r, mode="reflect")
    win = sliding_window_view(padded, kernel.shape)
    return np.einsum("hwij,ij->hw", win, kernel)


def gradient_bins(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Quantise gradient direction to 0/45/90/135 degrees (as 0..3), ties to the lower angle."""
    flip = (gy < 0) | ((gy == 0) & (gx < 0))
    gx = np.where(flip, -gx, gx)
    gy = np.where(flip, -gy, gy)
    ax = np.abs(gx).astype(np.float64)
    gyf = gy.astype(np.float64)
    pos = np.where(gyf <= _TAN_22 * ax, 0, np.where(gyf <= _TAN_67 * ax, 1, 2))
    neg = np.where(gyf >= _TAN_67 * ax, 2, np.where(gyf >= _TAN_22 * ax, 3, 0))
    return np.where(gx >= 0, pos, neg)


# (dy, dx) of the forward neighbour for each bin; image rows point down
_BIN_STEPS = ((0, 1), (1, 1), (1, 0), (1, -1))


def _shifted(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = a[y + dy, x + dx], zero outside the image."""
    h, w = a.shape
    out = np.zeros_like(a)
    ys, yd = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
    xs, xd = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
    out[yd, xd] = a[ys, xs]
    return out


def canny_stages(img: np.ndarray, low: float = DEFAULT_LOW, high: float = DEFAULT_HIGH) -> dict:
    """Run the detector and return every intermediate (integer-scaled) stage."""
    if not 0 <= low <= high:
        raise ValueError(f"Canny thresholds need 0 <= low <= high, got low={low}, high={high}")
    gray = rgb_to_luma(img).astype(np.int64)
    blurred = _correlate_reflect(gray, GAUSS_5x5)
    gx = _correlate_reflect(blurred, SOBEL_X)
    gy = _correlate_reflect(blurred, SOBEL_Y)
    mag2 = gx * gx + gy * gy
    bins = gradient_bins(gx, gy)

    keep = np.zeros(mag2.shape, dtype=bool)
    for b, (dy, dx) in enumerate(_BIN_STEPS):
        before = _shifted(mag2, -dy, -dx)
        after = _shifted(mag2, dy, dx)
        keep |= (bins == b) & (mag2 >= before) & (mag2 > after)
    keep &= mag2 > 0

    m = mag2.astype(np.float64)
    strong = keep & (m >= (GAUSS_SUM * float(high)) ** 2)
    weak = keep & (m >= (GAUSS_SUM * float(low)) ** 2)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    edges = seeded[labels]
    return {"gray": gray, "blurred": blurred, "gx": gx, "gy": gy, "mag2": mag2,
            "bins": bins, "nms": keep, "strong": strong, "weak": weak, "edges": edges}


def canny(img: np.ndarray, low: float = DEFAULT_LOW, high: float = DEFAULT_HIGH) -> np.ndarray:
    """Binary edge map (float 0/1) of an 8-bit image."""
    return canny_stages(img, low, high)["edges"].astype(np.float32)


# -- PNG ----------------------------------------------------------------------


def _png_bit_depth(path) -> int | None:
    with open(path, "rb") as f:
        head = f.read(26)
    if len(head) < 26 or head[:8] != b"\x89PNG\r\n\x1a\n":
        return None
    return head[24]


def load_png(path: str | os.PathLike) -> np.ndarray:
    try:
        depth = _png_bit_depth(path)
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot read image ({exc.strerror})") from exc
    if depth is None:
        raise ImageIOError(f"{path}: not a PNG file")
    if depth > 8:
        raise ImageIOError(f"{path}: unsupported bit depth {depth}; only 8-bit PNG is accepted")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("1", "L"):
                im = im.convert("L")
            elif im.mode == "LA":
                im = im.convert("L")
            elif im.mode in ("P", "RGBA", "RGB"):
                im = im.convert("RGB")
            else:
                raise ImageIOError(f"{path}: unsupported PNG mode {im.mode}")
            return np.array(im, dtype=np.uint8)
    except ImageIOError:
        raise
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"{path}: cannot read image ({exc})") from exc


def save_png(path: str | os.PathLike, img: np.ndarray) -> None:
    img = validate_image(img)
    try:
        Image.fromarray(img).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write image ({exc})") from exc


def mask_to_u8(mask: np.ndarray) -> np.ndarray:
    """Binary or fractional map in [0, 1] -> uint8 via round(v * 255)."""
    m = np.asarray(mask)
    if m.dtype == bool:
        return m.astype(np.uint8) * 255
    m = m.astype(np.float64)
    if m.size and (m.min() < 0 or m.max() > 1):
        raise ValueError("mask values must lie in [0, 1]")
    return np.floor(m * 255.0 + 0.5).astype(np.uint8)


def save_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    save_png(path, mask_to_u8(mask))


def load_mask(path: str | os.PathLike) -> np.ndarray:
    """Grey PNG -> boolean foreground mask (value >= 128)."""
    img = load_png(path)
    if img.ndim == 3:
        img = rgb_to_luma(img)
    return img >= 128
