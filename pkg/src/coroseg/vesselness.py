"""Scale-space Hessian analysis and the tubularity (vesselness) filter.

Second derivatives come from smoothing at scale s followed by central
differences in mm, scaled by s**gamma. Eigenvalues are ordered by magnitude,
|lam1| <= |lam2| <= |lam3|; bright tubes have lam1 ~ 0 and lam2, lam3 < 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .volume import Volume3D, gaussian_smooth

EDGE_SENTINEL = 1e12


@dataclass
class FrangiParams:
    """Sensitivity constants and the scale set for the tubularity measure.

    c = None auto-calibrates the structureness constant per scale to half the
    maximum Frobenius norm of the Hessian over the volume.
    """

    alpha: float = 0.5
    beta: float = 0.5
    c: float | None = None
    scales: tuple[float, ...] = (1.0, 1.5, 2.0, 2.5)
    gamma: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise DataError("alpha and beta must be positive")
        if self.c is not None and self.c <= 0:
            raise DataError("c must be positive")
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise DataError("scales must be non-empty and positive")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise DataError("scales must be strictly increasing")


@dataclass
class HessianField:
    """Per-voxel symmetric 3x3 second derivatives at one scale (HU/mm^2)."""

    scale: float
    xx: np.ndarray
    yy: np.ndarray
    zz: np.ndarray
    xy: np.ndarray
    xz: np.ndarray
    yz: np.ndarray

    def matrix_at(self, i: int, j: int, k: int) -> np.ndarray:
        idx = (i, j, k)
        return np.array([
            [self.xx[idx], self.xy[idx], self.xz[idx]],
            [self.xy[idx], self.yy[idx], self.yz[idx]],
            [self.xz[idx], self.yz[idx], self.zz[idx]],
        ])

    def frobenius(self) -> np.ndarray:
        return np.sqrt(self.xx**2 + self.yy**2 + self.zz**2
                       + 2 * (self.xy**2 + self.xz**2 + self.yz**2))


@dataclass
class EigenTriple:
    """Eigenvalues ordered by |.|, plus the unit eigenvector for lam1."""

    lam1: float
    lam2: float
    lam3: float
    e1: np.ndarray


@dataclass
class VesselnessField:
    """Per-voxel tubularity score in [0, 1] and the winning scale (mm)."""

    v: Volume3D
    best_scale: Volume3D


def _shift(a: np.ndarray, axis: int, d: int) -> np.ndarray:
    # index-clamped shift: edges replicate, so flips/permutations commute
    n = a.shape[axis]
    idx = np.clip(np.arange(n) + d, 0, n - 1)
    return np.take(a, idx, axis=axis)


def _second_derivative(a, axis, h):
    return (_shift(a, axis, 1) - 2.0 * a + _shift(a, axis, -1)) / (h * h)


def _first_derivative(a, axis, h):
    return (_shift(a, axis, 1) - _shift(a, axis, -1)) / (2.0 * h)


def hessian_at_scale(vol: Volume3D, scale: float, gamma: float = 1.0) -> HessianField:
    """Hessian of the sigma = scale smoothed volume, times scale**gamma."""
    if scale <= 0:
        raise DataError("scale must be positive")
    sm = gaussian_smooth(vol, scale).data
    sx, sy, sz = vol.spacing
    w = scale ** gamma
    gx = _first_derivative(sm, 0, sx)
    gy = _first_derivative(sm, 1, sy)
    return HessianField(
        scale=scale,
        xx=w * _second_derivative(sm, 0, sx),
        yy=w * _second_derivative(sm, 1, sy),
        zz=w * _second_derivative(sm, 2, sz),
        xy=w * _first_derivative(gx, 1, sy),
        xz=w * _first_derivative(gx, 2, sz),
        yz=w * _first_derivative(gy, 2, sz),
    )


def eigen_symmetric3(h: np.ndarray) -> EigenTriple:
    """Eigen-decomposition of one symmetric 3x3 matrix.

    Eigenvalues sort by |.| with signed-ascending tie-break; the eigenvector
    for lam1 gets a deterministic sign (largest-magnitude component positive).
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise DataError("expected a 3x3 matrix")
    vals, vecs = np.linalg.eigh(h)
    order = np.lexsort((vals, np.abs(vals)))
    vals = vals[order]
    e1 = vecs[:, order[0]]
    pivot = int(np.argmax(np.abs(e1)))
    if e1[pivot] < 0:
        e1 = -e1
    return EigenTriple(float(vals[0]), float(vals[1]), float(vals[2]), e1)


def _eigvals_sym3(xx, yy, zz, xy, xz, yz):
    """Vectorized analytic eigenvalues of symmetric 3x3 fields.

    Returns (lam1, lam2, lam3) sorted by |.| with signed-ascending tie-break.
    """
    q = (xx + yy + zz) / 3.0
    p1 = xy**2 + xz**2 + yz**2
    p2 = (xx - q) ** 2 + (yy - q) ** 2 + (zz - q) ** 2 + 2.0 * p1
    p = np.sqrt(np.maximum(p2, 0.0) / 6.0)
    safe_p = np.where(p > 0, p, 1.0)
    b11 = (xx - q) / safe_p
    b22 = (yy - q) / safe_p
    b33 = (zz - q) / safe_p
    b12 = xy / safe_p
    b13 = xz / safe_p
    b23 = yz / safe_p
    detb = (b11 * (b22 * b33 - b23 * b23)
            - b12 * (b12 * b33 - b23 * b13)
            + b13 * (b12 * b23 - b22 * b13))
    r = np.clip(detb / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    big = q + 2.0 * p * np.cos(phi)
    small = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    mid = 3.0 * q - big - small
    vals = np.stack([small, mid, big], axis=-1)
    vals = np.where(p[..., None] > 0, vals, np.broadcast_to(q[..., None], vals.shape))
    # signed ascending first, then stable sort by |.| keeps the tie-break
    vals = np.sort(vals, axis=-1)
    order = np.argsort(np.abs(vals), axis=-1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=-1)
    return vals[..., 0], vals[..., 1], vals[..., 2]


def _frangi_kernel(lam1, lam2, lam3, alpha, beta, c):
    zero = (lam2 > 0) | (lam3 > 0) | (lam3 == 0)
    a3 = np.abs(lam3)
    safe3 = np.where(a3 > 0, a3, 1.0)
    ra = np.abs(lam2) / safe3
    prod = lam2 * lam3
    safe_prod = np.where(prod > 0, prod, 1.0)
    rb = np.abs(lam1) / np.sqrt(safe_prod)
    rb = np.where(prod > 0, rb, 0.0)
    s2 = lam1**2 + lam2**2 + lam3**2
    v = ((1.0 - np.exp(-(ra * ra) / (2.0 * alpha * alpha)))
         * np.exp(-(rb * rb) / (2.0 * beta * beta))
         * (1.0 - np.exp(-s2 / (2.0 * c * c))))
    return np.where(zero, 0.0, v)


def frangi_measure(t: EigenTriple, params: FrangiParams, scale: float | None = None) -> float:
    """Tubularity score in [0, 1] for one eigenvalue triple.

    Requires a resolved structureness constant; pass params with c set (the
    multiscale driver resolves the auto default per scale).
    """
    if params.c is None:
        raise DataError("frangi_measure needs a resolved c; set FrangiParams.c")
    lam1 = np.asarray(t.lam1, dtype=np.float64)
    v = _frangi_kernel(lam1, np.float64(t.lam2), np.float64(t.lam3),
                       params.alpha, params.beta, params.c)
    return float(v)


def resolve_c(h: HessianField, params: FrangiParams) -> float:
    """Structureness constant for one scale: supplied, or half max ||H||_F."""
    if params.c is not None:
        return params.c
    m = float(h.frobenius().max())
    return 0.5 * m if m > 0 else 1.0


def multiscale_vesselness(vol: Volume3D, params: FrangiParams) -> VesselnessField:
    """Per-voxel maximum of the tubularity score over the scale set.

    best_scale records the winning scale; ties keep the smallest scale.
    """
    best_v = None
    best_s = None
    for s in params.scales:
        h = hessian_at_scale(vol, s, params.gamma)
        lam1, lam2, lam3 = _eigvals_sym3(h.xx, h.yy, h.zz, h.xy, h.xz, h.yz)
        c = resolve_c(h, params)
        v = _frangi_kernel(lam1, lam2, lam3, params.alpha, params.beta, c)
        if best_v is None:
            best_v = v
            best_s = np.full(vol.dims, s)
        else:
            better = v > best_v
            best_v = np.where(better, v, best_v)
            best_s = np.where(better, s, best_s)
    return VesselnessField(v=vol.like(best_v), best_scale=vol.like(best_s))


def edge_measure(vol: Volume3D, scale: float, k: float = 1.0,
                 gamma: float = 1.0) -> Volume3D:
    """Intensity-weighted edge strength used to suppress step-edge responses.

    E = k*|f|*|grad f_s| / (s*|lam_a + lam_b|) with the two largest-magnitude
    Hessian eigenvalues; a vanishing denominator under non-zero gradient marks
    a certain edge and returns the sentinel value.
    """
    if scale <= 0:
        raise DataError("scale must be positive")
    if k <= 0:
        raise DataError("gain k must be positive")
    sm = gaussian_smooth(vol, scale).data
    sx, sy, sz = vol.spacing
    gx = _first_derivative(sm, 0, sx)
    gy = _first_derivative(sm, 1, sy)
    gz = _first_derivative(sm, 2, sz)
    grad = np.sqrt(gx * gx + gy * gy + gz * gz)
    h = hessian_at_scale(vol, scale, gamma)
    _, lam2, lam3 = _eigvals_sym3(h.xx, h.yy, h.zz, h.xy, h.xz, h.yz)
    num = k * np.abs(vol.data) * grad
    den = scale * np.abs(lam2 + lam3)
    eps_den = 1e-6 * float(h.frobenius().max()) + 1e-300
    small = den < eps_den
    out = np.divide(num, den, out=np.zeros_like(num), where=~small)
    out = np.where(small & (num > 0), EDGE_SENTINEL, out)
    return vol.like(out)


def suppress_edges(vf: VesselnessField, e: Volume3D, t_e: float) -> VesselnessField:
    """Zero the tubularity score wherever the edge measure exceeds t_e."""
    if vf.v.dims != e.dims or vf.v.spacing != e.spacing:
        raise DataError("edge volume geometry does not match the vesselness field")
    v = np.where(e.data > t_e, 0.0, vf.v.data)
    return VesselnessField(v=vf.v.like(v), best_scale=vf.best_scale)
