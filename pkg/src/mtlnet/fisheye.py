"""Radial polynomial lens model and image rectification.

The model maps an undistorted normalised radius r to a distorted one::

    r_d = r * (1 + k1 r^2 + k2 r^4 + k3 r^6 + k4 r^8)

Normalised coordinates are pixel offsets from ``center`` divided by ``focal``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

NEWTON_TOL = 1e-10
NEWTON_MAX_ITERS = 50


class FisheyeError(ValueError):
    pass


class NonConvergenceError(FisheyeError):
    pass


@dataclass(frozen=True)
class DistortionModel:
    k: tuple = (0.0, 0.0, 0.0, 0.0)
    center: tuple = (0.0, 0.0)
    focal: float = 1.0
    max_valid_radius: float = 1.0

    def __post_init__(self):
        k = tuple(float(v) for v in self.k) + (0.0,) * (4 - len(self.k))
        if len(k) != 4:
            raise FisheyeError("at most four radial coefficients")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if self.focal <= 0 or self.max_valid_radius <= 0:
            raise FisheyeError("focal and max_valid_radius must be positive")
        r = np.linspace(0.0, self.max_valid_radius, 4097)
        if not np.all(self.radius_derivative(r) > 0):
            raise FisheyeError("distortion is not strictly increasing on the valid radius range")

    def distort_radius(self, r):
        r = np.asarray(r, dtype=np.float64)
        r2 = r * r
        k1, k2, k3, k4 = self.k
        return r * (1.0 + r2 * (k1 + r2 * (k2 + r2 * (k3 + r2 * k4))))

    def radial_gain(self, r):
        """r_d / r_u as a polynomial in r (no division, exact 1 when k = 0)."""
        r2 = np.asarray(r, dtype=np.float64) ** 2
        k1, k2, k3, k4 = self.k
        return 1.0 + r2 * (k1 + r2 * (k2 + r2 * (k3 + r2 * k4)))

    def radius_derivative(self, r):
        r = np.asarray(r, dtype=np.float64)
        r2 = r * r
        k1, k2, k3, k4 = self.k
        return 1.0 + r2 * (3 * k1 + r2 * (5 * k2 + r2 * (7 * k3 + r2 * 9 * k4)))

    @property
    def max_distorted_radius(self) -> float:
        return float(self.distort_radius(self.max_valid_radius))

    def to_json(self) -> dict:
        return {"k": list(self.k), "center": list(self.center), "focal": self.focal,
                "max_valid_radius": self.max_valid_radius}

    @classmethod
    def from_json(cls, d: dict) -> "DistortionModel":
        return cls(tuple(d.get("k", ())), tuple(d["center"]), float(d["focal"]),
                   float(d.get("max_valid_radius", 1.0)))

    @classmethod
    def load(cls, path) -> "DistortionModel":
        with open(path) as fh:
            d = json.load(fh)
        return cls.from_json(d.get("fisheye", d))


def _radius(p: np.ndarray) -> np.ndarray:
    return np.hypot(p[..., 0], p[..., 1])


def distort(model: DistortionModel, p_u) -> np.ndarray:
    """Undistorted normalised points (..., 2) -> distorted normalised points."""
    p = np.asarray(p_u, dtype=np.float64)
    r = _radius(p)
    if np.any(r > model.max_valid_radius * (1 + 1e-12)):
        raise FisheyeError("point beyond max_valid_radius")
    scale = np.where(r > 0, model.distort_radius(r) / np.where(r > 0, r, 1.0), 1.0)
    return p * scale[..., None]


def undistort_radius(model: DistortionModel, r_d) -> np.ndarray:
    """Invert the radial polynomial with damped Newton steps, starting at r_d."""
    rd = np.asarray(r_d, dtype=np.float64)
    if np.any(rd < 0) or np.any(rd > model.max_distorted_radius * (1 + 1e-12)):
        raise FisheyeError("distorted radius outside the image of the valid domain")
    r = np.clip(rd.copy(), 0.0, model.max_valid_radius)
    lo, hi = 0.0, model.max_valid_radius
    for _ in range(NEWTON_MAX_ITERS):
        f = model.distort_radius(r) - rd
        if np.all(np.abs(f) <= NEWTON_TOL * np.maximum(1.0, rd)):
            return r
        step = f / model.radius_derivative(r)
        # halve the step until the residual shrinks (or the step is negligible)
        lam = np.ones_like(r)
        for _ in range(30):
            cand = np.clip(r - lam * step, lo, hi)
            bad = np.abs(model.distort_radius(cand) - rd) > np.abs(f)
            if not bad.any():
                break
            lam = np.where(bad, lam * 0.5, lam)
        r = np.clip(r - lam * step, lo, hi)
    f = model.distort_radius(r) - rd
    if np.all(np.abs(f) <= NEWTON_TOL * np.maximum(1.0, rd)):
        return r
    raise NonConvergenceError(f"Newton inversion did not converge (max residual {np.abs(f).max():.3e})")


def undistort(model: DistortionModel, p_d) -> np.ndarray:
    """Distorted normalised points (..., 2) -> undistorted normalised points."""
    p = np.asarray(p_d, dtype=np.float64)
    rd = _radius(p)
    ru = undistort_radius(model, rd)
    scale = np.where(rd > 0, ru / np.where(rd > 0, rd, 1.0), 1.0)
    return p * scale[..., None]


def to_normalized(model: DistortionModel, px) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    return (px - np.asarray(model.center)) / model.focal


def to_pixels(model: DistortionModel, p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64) * model.focal + np.asarray(model.center)


@dataclass
class RemapTable:
    """Source pixel coordinates (x, y) per output pixel plus a validity mask."""

    src_x: np.ndarray
    src_y: np.ndarray
    valid: np.ndarray
    in_size: Optional[tuple] = field(default=None)

    def apply(self, image: np.ndarray) -> np.ndarray:
        """Bilinear resampling of an [H, W] or [H, W, C] image; invalid
        pixels come out as zeros."""
        return bilinear_sample(image, self.src_x, self.src_y, self.valid)


def bilinear_sample(image: np.ndarray, sx: np.ndarray, sy: np.ndarray, valid: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    src = img.astype(np.float64)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(sx - x0, 0.0, 1.0)[..., None]
    fy = np.clip(sy - y0, 0.0, 1.0)[..., None]
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    out[~valid] = 0
    if img.dtype == np.uint8:
        out = np.clip(np.round(out), 0, 255).astype(np.uint8)
    else:
        out = out.astype(img.dtype)
    return out[..., 0] if squeeze else out


def _inside(sx, sy, in_size) -> np.ndarray:
    h, w = in_size
    return (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)


def build_rectify_map(model: DistortionModel, out_size: tuple, in_size: Optional[tuple] = None) -> RemapTable:
    """For every rectified output pixel, where to read in the distorted image.

    The output shares the model's centre and focal length. Pixels whose ray
    leaves the valid radius or lands outside the input are invalid.
    """
    h, w = out_size
    in_size = in_size or out_size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - model.center[0], ys - model.center[1]
    r = np.hypot(dx, dy) / model.focal
    ok = r <= model.max_valid_radius
    # written as an offset from the pixel itself so k = 0 is exactly the identity
    gain = model.radial_gain(r) - 1.0
    sx, sy = xs + gain * dx, ys + gain * dy
    valid = ok & _inside(sx, sy, in_size)
    return RemapTable(sx, sy, valid, tuple(in_size))


def build_distort_map(model: DistortionModel, out_size: tuple, in_size: Optional[tuple] = None,
                      bins: int = 4096) -> RemapTable:
    """Inverse direction: synthesise a distorted image from a rectilinear one.

    The radial inverse is solved by Newton once per radial bin and linearly
    interpolated per pixel.
    """
    h, w = out_size
    in_size = in_size or out_size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    p = to_normalized(model, np.stack([xs, ys], axis=-1))
    rd = _radius(p)
    ok = rd <= model.max_distorted_radius
    grid_d = np.linspace(0.0, model.max_distorted_radius, bins)
    grid_u = undistort_radius(model, grid_d)
    ru = np.interp(np.minimum(rd, model.max_distorted_radius), grid_d, grid_u)
    scale = np.where(rd > 0, ru / np.where(rd > 0, rd, 1.0), 1.0)
    src = to_pixels(model, p * scale[..., None])
    sx, sy = src[..., 0], src[..., 1]
    valid = ok & _inside(sx, sy, in_size)
    return RemapTable(sx, sy, valid, tuple(in_size))


def rectify(model: DistortionModel, image: np.ndarray) -> tuple:
    """Rectify a distorted image; returns (image, validity mask)."""
    h, w = image.shape[:2]
    table = build_rectify_map(model, (h, w))
    return table.apply(image), table.valid
