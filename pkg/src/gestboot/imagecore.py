"""Image containers, color and geometric primitives, and file I/O.

Images are plain numpy arrays in planar layout: ``(C, H, W)`` for
multi-channel buffers and ``(H, W)`` for single-channel maps (masks,
probabilities, flow components). Intensities live in ``[0, 1]``.

All bilinear sampling uses the half-pixel-center convention: output pixel
``i`` of an axis resized from ``n_in`` to ``n_out`` samples the source at
``(i + 0.5) * n_in / n_out - 0.5``.
"""
import struct
from pathlib import Path

import numpy as np
from PIL import Image
from skimage import color as _skcolor

from .errors import FormatError, InvalidInputError

BLOB_MAGIC = b"GBT1"


def _as_planar(img):
    img = np.asarray(img)
    if img.ndim == 2:
        return img[None], True
    if img.ndim == 3:
        return img, False
    raise InvalidInputError(f"expected (H, W) or (C, H, W) array, got shape {img.shape}")


def _check_rgb(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InvalidInputError(f"expected a 3-channel (3, H, W) image, got shape {img.shape}")
    return img


def rgb_to_hsv(img):
    """Convert a ``(3, H, W)`` RGB image to HSV with hue scaled to ``[0, 1)``."""
    return _skcolor.rgb2hsv(_check_rgb(img), channel_axis=0)


def hsv_to_rgb(img):
    """Inverse of :func:`rgb_to_hsv`."""
    return _skcolor.hsv2rgb(_check_rgb(img), channel_axis=0)


def to_gray(img):
    """Luminance ``0.299 R + 0.587 G + 0.114 B``; 2-D input is returned as-is."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    img = _check_rgb(img)
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def interp_matrix(n_in, n_out):
    """Dense ``(n_out, n_in)`` linear-interpolation matrix, edge-clamped.

    Resizing an axis is ``M @ x``; the transpose is the adjoint used by
    backpropagation through upsampling layers.
    """
    if n_in < 1 or n_out < 1:
        raise InvalidInputError("interpolation sizes must be >= 1")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def resize_bilinear(img, new_h, new_w):
    """Bilinear resize of a 2-D or planar image to ``(new_h, new_w)``."""
    if new_h < 1 or new_w < 1:
        raise InvalidInputError(f"target size must be >= 1, got {(new_h, new_w)}")
    planes, squeeze = _as_planar(img)
    _, h, w = planes.shape
    if (h, w) == (new_h, new_w):
        out = planes.copy()
    else:
        ry = interp_matrix(h, new_h)
        rx = interp_matrix(w, new_w)
        out = ry @ planes.astype(np.float64) @ rx.T
        # convex weights can overshoot by an ulp
        lo = planes.min(axis=(1, 2), keepdims=True)
        hi = planes.max(axis=(1, 2), keepdims=True)
        out = np.clip(out, lo, hi)
    return out[0] if squeeze else out


def resize_nearest(img, new_h, new_w):
    """Nearest-neighbor resize (half-pixel centers); keeps labels discrete."""
    if new_h < 1 or new_w < 1:
        raise InvalidInputError(f"target size must be >= 1, got {(new_h, new_w)}")
    planes, squeeze = _as_planar(img)
    _, h, w = planes.shape
    ys = np.minimum(((np.arange(new_h) + 0.5) * h / new_h).astype(np.intp), h - 1)
    xs = np.minimum(((np.arange(new_w) + 0.5) * w / new_w).astype(np.intp), w - 1)
    out = planes[:, ys[:, None], xs[None, :]]
    return out[0] if squeeze else out


def crop(img, top, left, h, w):
    """Copy the window ``[top:top+h, left:left+w]`` out of ``img``."""
    planes, squeeze = _as_planar(img)
    _, H, W = planes.shape
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > H or left + w > W:
        raise InvalidInputError(
            f"crop window {(top, left, h, w)} does not fit inside {(H, W)}")
    out = planes[:, top:top + h, left:left + w].copy()
    return out[0] if squeeze else out


def hflip(img):
    """Mirror columns: column ``j`` moves to ``W - 1 - j``."""
    img = np.asarray(img)
    return img[..., ::-1].copy()


def sample_bilinear(plane, ys, xs):
    """Sample a 2-D array at fractional ``(ys, xs)``; coordinates are clamped
    to the image so out-of-range samples replicate the border."""
    h, w = plane.shape
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    top = plane[y0, x0] * (1.0 - wx) + plane[y0, x1] * wx
    bot = plane[y1, x0] * (1.0 - wx) + plane[y1, x1] * wx
    return top * (1.0 - wy) + bot * wy


def rotate_about_center(img, degrees, fill=0.0, order=1):
    """Rotate counterclockwise (as displayed) about the image center.

    ``order=1`` samples bilinearly, blending toward ``fill`` at the image
    border; ``order=0`` takes the nearest source pixel. Samples outside the
    source take ``fill``; there is no edge replication.
    """
    if not np.isfinite(degrees):
        raise InvalidInputError(f"rotation angle must be finite, got {degrees}")
    if order not in (0, 1):
        raise InvalidInputError("order must be 0 (nearest) or 1 (bilinear)")
    planes, squeeze = _as_planar(img)
    c, h, w = planes.shape
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source location (y axis points down)
    src_x = cos_t * dx - sin_t * dy + cx
    src_y = sin_t * dx + cos_t * dy + cy
    if order == 0:
        iy = np.round(src_y).astype(np.intp)
        ix = np.round(src_x).astype(np.intp)
        inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = np.full(planes.shape, fill, dtype=planes.dtype)
        out[:, inside] = planes[:, iy[inside], ix[inside]]
        return out[0] if squeeze else out
    out = np.empty(planes.shape, dtype=np.float64)
    for k in range(c):
        padded = np.pad(planes[k].astype(np.float64), 1, constant_values=fill)
        out[k] = sample_bilinear(padded, src_y + 1.0, src_x + 1.0)
    return out[0] if squeeze else out


def read_png(path):
    """Read an 8-bit grayscale or RGB PNG; returns ``(H, W)`` or ``(3, H, W)``
    floats scaled by 1/255."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif mode in ("P", "RGBA", "LA", "1"):
                arr = np.asarray(im.convert("RGB" if mode in ("P", "RGBA") else "L"))
            else:
                raise OSError(f"unsupported PNG mode/bit depth {mode!r} in {path}")
    except OSError:
        raise
    except Exception as exc:  # PIL raises assorted types on corrupt input
        raise OSError(f"cannot read PNG {path}: {exc}") from exc
    arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 3:
        arr = np.moveaxis(arr, -1, 0)
    return arr


def to_uint8(img):
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(img, path):
    """Write a ``(H, W)``, ``(1, H, W)`` or ``(3, H, W)`` image as 8-bit PNG."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 3:
        if img.shape[0] != 3:
            raise InvalidInputError(f"PNG needs 1 or 3 channels, got {img.shape[0]}")
        data = np.ascontiguousarray(np.moveaxis(to_uint8(img), 0, -1))
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    elif img.ndim == 2:
        Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG")
    else:
        raise InvalidInputError(f"cannot write array of shape {img.shape} as PNG")


def _blob_bytes(arr):
    arr = np.asarray(arr)
    if arr.ndim == 0:
        raise FormatError("rank-0 blobs are not representable")
    header = BLOB_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _parse_blob(buf, offset):
    if buf[offset:offset + 4] != BLOB_MAGIC:
        raise FormatError("bad blob magic")
    if len(buf) < offset + 8:
        raise FormatError("truncated blob header")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    if rank == 0:
        raise FormatError("rank-0 blobs are not representable")
    dims_end = offset + 8 + 4 * rank
    if len(buf) < dims_end:
        raise FormatError("truncated blob header")
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    nbytes = 4 * int(np.prod(dims, dtype=np.int64))
    end = dims_end + nbytes
    if len(buf) < end:
        raise FormatError(f"truncated blob payload: need {nbytes} bytes")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=dims_end)
    return arr.reshape(dims).astype(np.float32), end


def write_blob(arr, path):
    """Write one array as a GBT1 blob (little-endian float32 payload)."""
    Path(path).write_bytes(_blob_bytes(arr))


def read_blob(path):
    buf = Path(path).read_bytes()
    arr, end = _parse_blob(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after blob in {path}")
    return arr


def write_blobs(arrays, path):
    """Write several blobs back to back into one file."""
    Path(path).write_bytes(b"".join(_blob_bytes(a) for a in arrays))


def read_blobs(path):
    buf = Path(path).read_bytes()
    out, offset = [], 0
    while offset < len(buf):
        arr, offset = _parse_blob(buf, offset)
        out.append(arr)
    return out
