"""Synthetic straight-line images for checking lens rectification."""
from __future__ import annotations

import numpy as np

from mtlnet import fisheye as F


def render_line(size, slope, offset, sigma=1.2):
    """Gaussian-profile line y = slope * x + offset on an [H, W] canvas."""
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    d = (ys - slope * xs - offset) / np.hypot(1.0, slope)
    return np.exp(-0.5 * (d / sigma) ** 2)


def column_centroids(image, valid, min_mass=1.0):
    """Intensity-weighted row centroid of every column with enough signal."""
    img = np.where(valid, image, 0.0)
    rows = np.arange(img.shape[0], dtype=np.float64)[:, None]
    mass = img.sum(axis=0)
    cols = np.nonzero(mass >= min_mass)[0]
    # windowed around the brightest row so stray tails do not bias the centroid
    out = []
    for c in cols:
        peak = int(np.argmax(img[:, c]))
        lo, hi = max(0, peak - 5), min(img.shape[0], peak + 6)
        wgt = img[lo:hi, c]
        if valid[lo:hi, c].all() and wgt.sum() >= min_mass:
            out.append((c, float((rows[lo:hi, 0] * wgt).sum() / wgt.sum())))
    return np.array(out)


def max_line_deviation(points):
    """Largest perpendicular distance of points from their least-squares line."""
    x, y = points[:, 0], points[:, 1]
    a, b = np.polyfit(x, y, 1)
    return float(np.max(np.abs(y - (a * x + b)) / np.hypot(1.0, a)))


def straightness_after_rectify(model: F.DistortionModel, size, slope, offset):
    """(deviation of the distorted line, deviation after rectification)."""
    straight = render_line(size, slope, offset)
    distorted = F.build_distort_map(model, size).apply(straight)
    dmap = F.build_distort_map(model, size)
    bent = column_centroids(distorted, dmap.valid)
    rect, valid = F.rectify(model, distorted)
    fixed = column_centroids(rect, valid)
    return max_line_deviation(bent), max_line_deviation(fixed), len(fixed)
