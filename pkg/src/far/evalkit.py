"""Landmark and reconstruction metrics, CED curves and the nuclear-norm
pose probe."""
import csv
import io
from dataclasses import dataclass

import numpy as np

from .numlin import nuclear_norm
from .shapewarp import as_shape, bilinear

# 68-point markup: the 49 interior points drop the 17 jaw points and the two
# inner-mouth corners (60, 64); outer eye corners are 36 and 45.
INTERIOR_68 = tuple(i for i in range(17, 68) if i not in (60, 64))
EYE_CORNERS_68 = (36, 45)
BENCHMARK_THRESHOLD = 0.05


@dataclass(frozen=True)
class CedCurve:
    thresholds: np.ndarray
    fractions: np.ndarray

    def at(self, threshold):
        idx = np.flatnonzero(np.isclose(self.thresholds, threshold))
        if idx.size == 0:
            raise KeyError(f"threshold {threshold} not on the curve")
        return float(self.fractions[idx[0]])


def pt2pt_error(pred, gt, interior=None, eye_corners=None):
    """Mean point-to-point distance over ``interior`` landmarks, normalised by
    the ground-truth outer-eye-corner distance.

    Defaults to the standard 68-point markup.
    """
    pred = as_shape(pred, "pred")
    gt = as_shape(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if interior is None or eye_corners is None:
        if len(gt) != 68:
            raise ValueError(f"default indices assume 68 points, got {len(gt)}; pass interior/eye_corners")
        interior = INTERIOR_68 if interior is None else interior
        eye_corners = EYE_CORNERS_68 if eye_corners is None else eye_corners
    idx = np.asarray(interior, dtype=np.int64)
    i, j = eye_corners
    scale = np.linalg.norm(gt[i] - gt[j])
    if scale == 0:
        raise ValueError("eye-corner distance is zero")
    return float(np.mean(np.linalg.norm(pred[idx] - gt[idx], axis=1)) / scale)


def ced(errors, thresholds):
    """Fraction of errors strictly below each threshold."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValueError("ced needs at least one error value")
    thresholds = np.asarray(thresholds, dtype=np.float64).ravel()
    if np.any(np.diff(thresholds) <= 0):
        raise ValueError("thresholds must be strictly increasing")
    fractions = np.array([np.count_nonzero(errors < t) for t in thresholds]) / errors.size
    return CedCurve(thresholds=thresholds, fractions=fractions)


def rmse(a, b, mask=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(a.shape)
    if not mask.any():
        raise ValueError("rmse over an empty mask")
    d = a[mask] - b[mask]
    return float(np.sqrt(np.mean(d * d)))


def horizontal_shear(texture, level):
    """Resample ``texture`` with row ``y`` shifted by ``level * (y - yc)``
    pixels; samples leaving the grid read zero."""
    texture = np.asarray(texture, dtype=np.float64)
    m, n = texture.shape
    if level == 0:
        return texture.copy()
    yy, xx = np.mgrid[0:m, 0:n].astype(np.float64)
    xs = xx + level * (yy - (m - 1) / 2.0)
    ok = (xs >= 0) & (xs <= n - 1)
    out = np.zeros_like(texture)
    out[ok] = bilinear(texture, xs[ok], yy[ok])
    return out


def nuclear_probe(texture, levels):
    """Nuclear norm of the texture under each horizontal shear level."""
    return [(float(s), nuclear_norm(horizontal_shear(texture, s))) for s in levels]


def _csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for a, b in rows:
        writer.writerow([repr(float(a)), repr(float(b))])
    return buf.getvalue()


def ced_csv(curve):
    return _csv(("threshold", "fraction"), zip(curve.thresholds, curve.fractions))


def probe_csv(pairs):
    return _csv(("level", "nuclear_norm"), pairs)
