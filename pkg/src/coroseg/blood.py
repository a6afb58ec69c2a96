"""Contrast-agent intensity model: aorta isolation, histogram Gaussian fit
and the mu +- 3 sigma acceptance range."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .errors import AortaNotFoundError, DataError, FitError
from .volume import BinaryMask, Volume3D


@dataclass
class Histogram:
    edges: np.ndarray   # strictly increasing, len = len(counts) + 1
    counts: np.ndarray
    total: int

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


@dataclass
class BloodIntensityModel:
    """Fitted blood distribution and the derived HU acceptance range."""

    mu: float
    sigma: float
    lo: float
    hi: float
    residual: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise DataError("sigma must be positive")

    @classmethod
    def from_fit(cls, mu: float, sigma: float, residual: float = 0.0):
        lo, hi = blood_range(mu, sigma)
        return cls(mu, sigma, lo, hi, residual)


def blood_range(mu: float, sigma: float) -> tuple[float, float]:
    """HU acceptance interval [mu - 3 sigma, mu + 3 sigma]."""
    if sigma < 0:
        raise DataError("sigma must be >= 0")
    return mu - 3.0 * sigma, mu + 3.0 * sigma


def build_histogram(values, bin_width: float = 8.0) -> Histogram:
    """Left-closed fixed-width histogram covering [min, max]."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DataError("cannot histogram an empty sample")
    if bin_width <= 0:
        raise DataError("bin width must be positive")
    lo = float(values.min())
    span = float(values.max()) - lo
    nbins = int(math.floor(span / bin_width)) + 1
    edges = lo + bin_width * np.arange(nbins + 1)
    # final edge strictly above max, so every bin is left-closed
    counts, _ = np.histogram(values, bins=edges)
    return Histogram(edges=edges, counts=counts, total=int(values.size))


def fit_gaussian_lsq(hist: Histogram, max_iter: int = 100,
                     tol: float = 1e-10) -> tuple[float, float, float]:
    """Least-squares Gaussian fit (A, mu, sigma) to histogram counts.

    Gauss-Newton from moment-based initialisation; returns (mu, sigma,
    normalized SSE). Raises FitError on fewer than 5 occupied bins, on
    non-convergence within max_iter, and on a sigma blow-up (flat data).
    """
    y = hist.counts.astype(np.float64)
    b = hist.centers
    occupied = int((y > 0).sum())
    if occupied < 5:
        raise FitError(f"need >= 5 occupied bins, got {occupied}")
    total = y.sum()
    mu = float((y * b).sum() / total)
    sigma = float(math.sqrt((y * (b - mu) ** 2).sum() / total))
    width = float(hist.edges[1] - hist.edges[0])
    sigma = max(sigma, 0.5 * width)
    amp = float(y.max())
    span = float(b[-1] - b[0]) if b.size > 1 else width

    def model(a, m, s):
        return a * np.exp(-((b - m) ** 2) / (2.0 * s * s))

    def sse(a, m, s):
        r = model(a, m, s) - y
        return float(r @ r)

    norm = float(y @ y)
    err = sse(amp, mu, sigma)
    converged = False
    for _ in range(max_iter):
        mvals = model(amp, mu, sigma)
        r = mvals - y
        j = np.stack([
            mvals / amp,
            mvals * (b - mu) / (sigma * sigma),
            mvals * (b - mu) ** 2 / (sigma ** 3),
        ], axis=1)
        jtj = j.T @ j
        jtr = j.T @ r
        jtj += 1e-12 * np.trace(jtj) * np.eye(3)
        try:
            delta = np.linalg.solve(jtj, -jtr)
        except np.linalg.LinAlgError as exc:
            raise FitError("normal equations are singular",
                           residual=err / norm) from exc
        scale = 1.0
        for _ in range(12):
            cand = (amp + scale * delta[0], mu + scale * delta[1],
                    sigma + scale * delta[2])
            if abs(cand[2]) > 1e-12 and cand[0] > 0:
                new_err = sse(*cand)
                if new_err <= err:
                    break
            scale *= 0.5
        else:
            converged = True  # step halving bottomed out: stationary point
            break
        amp, mu, sigma = cand
        sigma = abs(sigma)
        if abs(err - new_err) <= tol * max(err, 1.0):
            err = new_err
            converged = True
            break
        err = new_err
        if sigma > 10.0 * max(span, width):
            raise FitError("sigma blow-up: data is not Gaussian-peaked",
                           residual=err / norm)
    if not converged:
        raise FitError(f"no convergence in {max_iter} iterations",
                       residual=err / norm)
    if sigma > 10.0 * max(span, width):
        raise FitError("sigma blow-up: data is not Gaussian-peaked",
                       residual=err / norm)
    return float(mu), float(sigma), err / norm


# ---------------------------------------------------------------------------
# Aorta detection via slice-wise circle Hough voting
# ---------------------------------------------------------------------------

def _hough_circle_slice(bright: np.ndarray, spacing, r_min, r_max, min_score):
    """Best (cx, cy, r_mm, score) circle through the bright region's edge.

    Votes locate the candidate centre per radius; the score is the fraction
    of circle samples that land on (1-px dilated) edge pixels.
    """
    su, sv = spacing
    edge = bright & ~ndi.binary_erosion(bright, border_value=0)
    pts = np.argwhere(edge)
    if pts.shape[0] < 8:
        return None
    edge_wide = ndi.binary_dilation(edge, structure=np.ones((3, 3), bool))
    n_angles = 64
    theta = 2.0 * np.pi * np.arange(n_angles) / n_angles
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    radii = np.arange(r_min, r_max + 1e-9, min(su, sv))
    best = None
    nx, ny = bright.shape
    for r in radii:
        cx = np.rint(pts[:, 0][:, None] - (r / su) * cos_t[None, :]).astype(int)
        cy = np.rint(pts[:, 1][:, None] - (r / sv) * sin_t[None, :]).astype(int)
        ok = (cx >= 0) & (cx < nx) & (cy >= 0) & (cy < ny)
        acc = np.zeros((nx, ny))
        np.add.at(acc, (cx[ok], cy[ok]), 1.0)
        acc = ndi.gaussian_filter(acc, 1.0)
        peak = np.unravel_index(int(np.argmax(acc)), acc.shape)
        ring_x = np.rint(peak[0] + (r / su) * cos_t).astype(int)
        ring_y = np.rint(peak[1] + (r / sv) * sin_t).astype(int)
        ok_r = (ring_x >= 0) & (ring_x < nx) & (ring_y >= 0) & (ring_y < ny)
        if not ok_r.any():
            continue
        score = float(edge_wide[ring_x[ok_r], ring_y[ok_r]].mean()) * ok_r.mean()
        if best is None or score > best[3]:
            best = (peak[0], peak[1], float(r), float(score))
    if best is None or best[3] < min_score:
        return None
    return best


def detect_aorta(vol: Volume3D, z_band: float = 0.25, bright_threshold: float = 150.0,
                 r_min: float = 10.0, r_max: float = 20.0,
                 max_drift: float = 5.0, min_score: float = 0.6,
                 min_slices: int = 3) -> BinaryMask:
    """Slice-wise circle search over the early axial slices.

    A consistent stack (centre drift <= max_drift mm per slice) of circles in
    the 10-20 mm radius band becomes the aorta mask; the mask keeps only
    voxels above the bright threshold.
    """
    nx, ny, nz = vol.dims
    n_scan = max(1, int(math.ceil(z_band * nz)))
    circles = []
    for k in range(min(n_scan, nz)):
        sl = vol.data[:, :, k]
        bright = sl > bright_threshold
        if bright.sum() * vol.spacing[0] * vol.spacing[1] < math.pi * r_min**2 * 0.25:
            continue
        hit = _hough_circle_slice(bright, vol.spacing[:2], r_min, r_max, min_score)
        if hit is not None:
            circles.append((k, *hit))
    if not circles:
        raise AortaNotFoundError("aorta not found: no circle in the scanned slices")

    # longest run of slices whose centres drift slowly
    runs, current = [], [circles[0]]
    for prev, cur in zip(circles, circles[1:]):
        dz = cur[0] - prev[0]
        dist = math.hypot((cur[1] - prev[1]) * vol.spacing[0],
                          (cur[2] - prev[2]) * vol.spacing[1])
        if dz >= 1 and dist <= max_drift * dz:
            current.append(cur)
        else:
            runs.append(current)
            current = [cur]
    runs.append(current)
    run = max(runs, key=len)
    if len(run) < min_slices:
        raise AortaNotFoundError(
            f"aorta not found: only {len(run)} consistent slices")

    mask = np.zeros(vol.dims, dtype=bool)
    ix, iy = np.mgrid[0:nx, 0:ny]
    for k, cx, cy, r, _ in run:
        d2 = ((ix - cx) * vol.spacing[0]) ** 2 + ((iy - cy) * vol.spacing[1]) ** 2
        disc = d2 <= r * r
        mask[:, :, k] = disc & (vol.data[:, :, k] > bright_threshold)
    return BinaryMask(mask, vol.spacing, vol.origin)


def model_from_volume(vol: Volume3D, bin_width: float = 8.0,
                      z_band: float = 0.25) -> tuple[BloodIntensityModel, BinaryMask]:
    """Full chain: aorta mask -> histogram -> Gaussian fit -> HU range."""
    aorta = detect_aorta(vol, z_band=z_band)
    values = vol.data[aorta.data]
    hist = build_histogram(values, bin_width)
    mu, sigma, residual = fit_gaussian_lsq(hist)
    return BloodIntensityModel.from_fit(mu, sigma, residual), aorta
