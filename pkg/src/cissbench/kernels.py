"""Hot array kernels with a numba path and a pure-numpy path.

Every public function dispatches on :data:`cissbench._accel.USE_NUMBA`.  The
``*_nb`` and ``*_np`` variants are importable directly so tests can check
that both paths agree bit-for-bit.
"""

import numpy as np

from . import _accel
from ._accel import njit

# Shape codes understood by paint_shape.
CIRCLE, RECT, TRIANGLE, DIAMOND, CROSS, RING = range(6)
SHAPE_CODES = {
    "circle": CIRCLE,
    "rect": RECT,
    "triangle": TRIANGLE,
    "diamond": DIAMOND,
    "cross": CROSS,
    "ring": RING,
}


# ---------------------------------------------------------------------------
# confusion tally


@njit
def confusion_counts_nb(truth, pred, num_classes, ignore_id):
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    t = truth.ravel()
    p = pred.ravel()
    for i in range(t.size):
        ti = t[i]
        if ti == ignore_id:
            continue
        out[ti, p[i]] += 1
    return out


def confusion_counts_np(truth, pred, num_classes, ignore_id):
    t = truth.ravel().astype(np.int64)
    p = pred.ravel().astype(np.int64)
    keep = t != ignore_id
    flat = t[keep] * num_classes + p[keep]
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def confusion_counts(truth, pred, num_classes, ignore_id=255):
    """Count (truth, pred) pairs into a ``num_classes`` square matrix.

    Pixels whose truth equals ``ignore_id`` are skipped.  All other truth and
    prediction values must lie in ``[0, num_classes)``.
    """
    truth = np.ascontiguousarray(truth)
    pred = np.ascontiguousarray(pred)
    if truth.shape != pred.shape:
        raise ValueError(f"truth {truth.shape} and prediction {pred.shape} differ in shape")
    valid = truth != ignore_id
    if valid.any():
        if truth[valid].max() >= num_classes or pred[valid].max() >= num_classes:
            raise ValueError("class id outside confusion matrix range")
        if truth[valid].min() < 0 or pred[valid].min() < 0:
            raise ValueError("negative class id")
    if _accel.USE_NUMBA:
        return confusion_counts_nb(truth.astype(np.int64), pred.astype(np.int64), num_classes, ignore_id)
    return confusion_counts_np(truth, pred, num_classes, ignore_id)


# ---------------------------------------------------------------------------
# label lookup-table remap


@njit
def remap_labels_nb(labels, lut):
    flat = labels.ravel()
    out = np.empty(flat.size, dtype=np.uint8)
    for i in range(flat.size):
        out[i] = lut[flat[i]]
    return out.reshape(labels.shape)


def remap_labels_np(labels, lut):
    return lut[labels]


def remap_labels(labels, lut):
    """Apply a 256-entry uint8 lookup table to a uint8 label array."""
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    lut = np.ascontiguousarray(lut, dtype=np.uint8)
    if lut.shape != (256,):
        raise ValueError("lookup table must have 256 entries")
    if _accel.USE_NUMBA:
        return remap_labels_nb(labels, lut)
    return remap_labels_np(labels, lut)


# ---------------------------------------------------------------------------
# per-image class presence


@njit
def class_pixel_counts_nb(labels):
    n = labels.shape[0]
    out = np.zeros((n, 256), dtype=np.int64)
    for k in range(n):
        img = labels[k].ravel()
        for i in range(img.size):
            out[k, img[i]] += 1
    return out


def class_pixel_counts_np(labels):
    n = labels.shape[0]
    flat = labels.reshape(n, -1).astype(np.int64) + (np.arange(n, dtype=np.int64) * 256)[:, None]
    return np.bincount(flat.ravel(), minlength=n * 256).reshape(n, 256)


def class_pixel_counts(labels):
    """Per-image histogram of label values, shape ``(N, 256)``."""
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 3:
        raise ValueError("expected a stack of label maps (N, H, W)")
    if _accel.USE_NUMBA:
        return class_pixel_counts_nb(labels)
    return class_pixel_counts_np(labels)


# ---------------------------------------------------------------------------
# shape rasterisation


@njit
def _inside(kind, u, v):
    if kind == 0:
        return u * u + v * v <= 1.0
    if kind == 1:
        return abs(u) <= 1.0 and abs(v) <= 1.0
    if kind == 2:
        return v <= 0.5 and v >= 1.1547 * abs(u) - 1.0
    if kind == 3:
        return abs(u) + abs(v) <= 1.0
    if kind == 4:
        return (abs(u) <= 0.35 and abs(v) <= 1.0) or (abs(v) <= 0.35 and abs(u) <= 1.0)
    r2 = u * u + v * v
    return r2 <= 1.0 and r2 >= 0.3025


@njit
def paint_shape_nb(image, label, kind, cy, cx, size, aspect, cos_a, sin_a, class_id, rgb):
    h, w = label.shape
    reach = size * max(1.0, aspect) + 1.0
    y0 = max(0, int(cy - reach))
    y1 = min(h, int(cy + reach) + 1)
    x0 = max(0, int(cx - reach))
    x1 = min(w, int(cx + reach) + 1)
    sy = size * aspect
    for i in range(y0, y1):
        dy = i - cy
        for j in range(x0, x1):
            dx = j - cx
            u = (dx * cos_a + dy * sin_a) / size
            v = (dy * cos_a - dx * sin_a) / sy
            if _inside(kind, u, v):
                label[i, j] = class_id
                image[i, j, 0] = rgb[0]
                image[i, j, 1] = rgb[1]
                image[i, j, 2] = rgb[2]


def shape_mask_np(h, w, kind, cy, cx, size, aspect, cos_a, sin_a):
    reach = size * max(1.0, aspect) + 1.0
    y0 = max(0, int(cy - reach))
    y1 = min(h, int(cy + reach) + 1)
    x0 = max(0, int(cx - reach))
    x1 = min(w, int(cx + reach) + 1)
    dy = (np.arange(y0, y1, dtype=np.float64) - cy)[:, None]
    dx = (np.arange(x0, x1, dtype=np.float64) - cx)[None, :]
    u = (dx * cos_a + dy * sin_a) / size
    v = (dy * cos_a - dx * sin_a) / (size * aspect)
    au, av = np.abs(u), np.abs(v)
    if kind == CIRCLE:
        m = u * u + v * v <= 1.0
    elif kind == RECT:
        m = (au <= 1.0) & (av <= 1.0)
    elif kind == TRIANGLE:
        m = (v <= 0.5) & (v >= 1.1547 * au - 1.0)
    elif kind == DIAMOND:
        m = au + av <= 1.0
    elif kind == CROSS:
        m = ((au <= 0.35) & (av <= 1.0)) | ((av <= 0.35) & (au <= 1.0))
    else:
        r2 = u * u + v * v
        m = (r2 <= 1.0) & (r2 >= 0.3025)
    full = np.zeros((h, w), dtype=bool)
    full[y0:y1, x0:x1] = m
    return full


def paint_shape_np(image, label, kind, cy, cx, size, aspect, cos_a, sin_a, class_id, rgb):
    m = shape_mask_np(label.shape[0], label.shape[1], kind, cy, cx, size, aspect, cos_a, sin_a)
    label[m] = class_id
    image[m] = rgb


def paint_shape(image, label, kind, cy, cx, size, aspect, angle, class_id, rgb):
    """Paint one filled shape into ``image`` (H, W, 3) and ``label`` (H, W) in place.

    ``size`` is the half-extent along the shape's first axis in pixels and
    ``aspect`` scales the second axis.  Later calls overwrite earlier ones, so
    the label map is always the exact visible mask.
    """
    cos_a, sin_a = float(np.cos(angle)), float(np.sin(angle))
    rgb = np.asarray(rgb, dtype=image.dtype)
    args = (int(kind), float(cy), float(cx), float(size), float(aspect), cos_a, sin_a, int(class_id), rgb)
    if _accel.USE_NUMBA:
        paint_shape_nb(image, label, *args)
    else:
        paint_shape_np(image, label, *args)
