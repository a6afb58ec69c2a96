"""Automatic seed detection on a mid-volume axial slice.

Closed bright outlines on the reference slice become ROI candidates; each
centroid is scored with the tubularity measure F, the cross-plane shape
similarity GF and the HU value, and must pass all three thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .errors import DataError, NoSeedError
from .vesselness import VesselnessField, eigen_symmetric3, hessian_at_scale
from .volume import Image2D, Volume3D, bilinear_sample, trilinear_sample

_NEIGHBORS8 = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


@dataclass
class Roi2D:
    """Closed-boundary region on the reference slice (pixel coordinates)."""

    centroid: tuple[float, float]
    boundary: list[tuple[int, int]]
    bbox: tuple[int, int, int, int]  # (x_min, y_min, x_max, y_max) inclusive
    closed: bool = True
    area_px: float = 0.0


@dataclass
class SeedCandidate:
    point: tuple[int, int, int]
    frangi: float
    gf: float
    intensity: float
    accepted: bool


@dataclass
class RayProfile:
    """16 ray lengths per plane (indices -1, 0, +1) and the 10 kept per plane."""

    lengths: np.ndarray  # shape (3, 16), mm
    kept: np.ndarray     # shape (3, 10), sorted ascending per plane


def select_reference_slice(vol: Volume3D, cr: float) -> int:
    """Reference slice index floor(cr * nz), clamped so planes +-1 exist."""
    if not 0.0 < cr < 1.0:
        raise DataError("cr must lie in (0, 1)")
    nz = vol.dims[2]
    if nz < 3:
        raise DataError("volume too thin for reference-slice selection")
    p = int(math.floor(cr * nz))
    return min(max(p, 1), nz - 2)


def body_region_mask(image: Image2D, threshold: float = -200.0) -> np.ndarray:
    """Largest connected above-threshold region of the slice, hole-filled."""
    above = image.data > threshold
    if not above.any():
        raise DataError("slice contains no tissue above the body threshold")
    labels, n = ndi.label(above)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = int(np.argmax(sizes))
    return ndi.binary_fill_holes(labels == keep)


def _otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    hist, edges = np.histogram(values, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    total = hist.sum()
    if total == 0:
        return 0.0
    w0 = np.cumsum(hist)
    w1 = total - w0
    m = np.cumsum(hist * centers)
    m_total = m[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m / w0
        mu1 = (m_total - m) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = 0.0
    return float(centers[int(np.argmax(between))])


def _moore_trace(region: np.ndarray) -> list[tuple[int, int]]:
    """Ordered boundary chain of a filled region (8-connected tracing)."""
    pts = np.argwhere(region)
    start = tuple(pts[np.lexsort((pts[:, 1], pts[:, 0]))][0])
    chain = [start]
    prev_dir = 6  # pretend we arrived moving +x so the scan starts at -y side
    cur = start
    nx, ny = region.shape
    for _ in range(4 * region.size):
        found = False
        for step in range(8):
            d = (prev_dir + 5 + step) % 8  # backtrack pixel first, clockwise
            dx, dy = _NEIGHBORS8[d]
            q = (cur[0] + dx, cur[1] + dy)
            if 0 <= q[0] < nx and 0 <= q[1] < ny and region[q]:
                if q == start and len(chain) > 2:
                    return chain
                chain.append(q)
                prev_dir = d
                cur = q
                found = True
                break
        if not found:  # isolated pixel
            return chain
    return chain


def detect_closed_rois(image: Image2D, body_mask: np.ndarray | None = None,
                       min_area_mm2: float | None = None,
                       max_area_mm2: float | None = None) -> list[Roi2D]:
    """ROIs from thresholded Sobel edges whose outline encloses a region.

    Edge components that enclose no interior (open chains) are discarded, as
    are enclosed areas outside [min_area, max_area] (defaults: discs of
    radius 0.5 mm and 3 mm).
    """
    su, sv = image.spacing
    px_area = su * sv
    amin = (min_area_mm2 if min_area_mm2 is not None else math.pi * 0.5**2) / px_area
    amax = (max_area_mm2 if max_area_mm2 is not None else math.pi * 3.0**2) / px_area
    if body_mask is None:
        body_mask = np.ones(image.dims, dtype=bool)

    gx = ndi.sobel(image.data, axis=0)
    gy = ndi.sobel(image.data, axis=1)
    mag = np.hypot(gx, gy)
    inside = mag[body_mask]
    if inside.size == 0 or inside.max() == 0:
        return []
    thr = _otsu_threshold(inside)
    edges = (mag > thr) & body_mask

    labels, n = ndi.label(edges, structure=np.ones((3, 3), bool))
    rois: list[Roi2D] = []
    for lab in range(1, n + 1):
        comp = labels == lab
        filled = ndi.binary_fill_holes(comp)
        interior = filled & ~comp
        if not interior.any():
            continue  # open chain: encloses nothing
        area = float(filled.sum())
        if not amin <= area <= amax:
            continue
        cx, cy = ndi.center_of_mass(filled)
        xs, ys = np.nonzero(filled)
        chain = _moore_trace(filled)
        rois.append(Roi2D(
            centroid=(float(cx), float(cy)),
            boundary=chain,
            bbox=(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())),
            closed=True,
            area_px=area,
        ))
    return rois


def vessel_direction(vol: Volume3D, p: tuple[int, int, int], s: float) -> np.ndarray:
    """Unit eigenvector for the smallest-|.| Hessian eigenvalue at voxel p.

    The Hessian is evaluated on a local crop with a 4 sigma margin, which
    matches the full-volume result away from the boundary.
    """
    i, j, k = (int(round(c)) for c in p)
    margin = [int(math.ceil(4.0 * s / sp)) + 2 for sp in vol.spacing]
    lo = [max(0, c - m) for c, m in zip((i, j, k), margin)]
    hi = [min(n, c + m + 1) for c, m, n in zip((i, j, k), margin, vol.dims)]
    crop = Volume3D(vol.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]],
                    vol.spacing, vol.origin)
    h = hessian_at_scale(crop, s)
    local = (i - lo[0], j - lo[1], k - lo[2])
    return eigen_symmetric3(h.matrix_at(*local)).e1


def plane_frame(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal in-plane axes (u, v) for a unit normal."""
    n = np.asarray(normal, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise DataError("normal must be unit length")
    a = np.array([0.0, 0.0, 1.0])
    if abs(n @ a) > 0.9:
        a = np.array([1.0, 0.0, 0.0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v


def extract_orthogonal_plane(vol: Volume3D, center_mm, normal,
                             half_extent: float, spacing: float) -> Image2D:
    """Trilinearly sampled plane orthogonal to `normal` through `center_mm`."""
    u, v = plane_frame(normal)
    n = 2 * int(round(half_extent / spacing)) + 1
    offs = (np.arange(n) - (n - 1) / 2.0) * spacing
    uu, vv = np.meshgrid(offs, offs, indexing="ij")
    pts = (np.asarray(center_mm)[None, None, :]
           + uu[..., None] * u[None, None, :]
           + vv[..., None] * v[None, None, :])
    data = trilinear_sample(vol, pts.reshape(-1, 3)).reshape(n, n)
    return Image2D(data, (spacing, spacing), center=np.asarray(center_mm, float),
                   u_axis=u, v_axis=v)


def cast_rays(plane: Image2D, center=(0.0, 0.0), n: int = 16,
              r_max: float = 5.0, step: float | None = None) -> np.ndarray:
    """Boundary distance (mm) along n uniformly spaced rays from `center`.

    The boundary is the first radial sample whose intensity falls below the
    half-maximum between the centre intensity and the plane median; rays with
    no such sample report r_max.
    """
    cx, cy = float(center[0]), float(center[1])
    nu, nv = plane.dims
    su, sv = plane.spacing
    if not (abs(cx) <= (nu - 1) / 2 * su and abs(cy) <= (nv - 1) / 2 * sv):
        raise DataError("ray-cast centre lies outside the plane")
    if step is None:
        step = 0.5 * min(su, sv)
    i_center = bilinear_sample(plane, (cx, cy))
    i_bg = float(np.median(plane.data))
    thr = 0.5 * (i_center + i_bg)
    radii = np.arange(step, r_max + 0.5 * step, step)
    angles = 2.0 * np.pi * np.arange(n) / n
    px = cx + radii[None, :] * np.cos(angles)[:, None]
    py = cy + radii[None, :] * np.sin(angles)[:, None]
    samples = bilinear_sample(plane, np.stack([px.ravel(), py.ravel()], axis=1))
    samples = samples.reshape(n, radii.size)
    below = samples < thr
    lengths = np.full(n, r_max)
    hit = below.any(axis=1)
    first = np.argmax(below, axis=1)
    for ray in np.nonzero(hit)[0]:
        j = first[ray]
        r_hit = radii[j]
        i_prev = i_center if j == 0 else samples[ray, j - 1]
        i_cur = samples[ray, j]
        # linear sub-step refinement of the threshold crossing
        frac = (i_prev - thr) / (i_prev - i_cur) if i_prev > i_cur else 1.0
        lengths[ray] = min(r_hit - step + step * frac, r_max)
    return lengths


def ray_profile(vol: Volume3D, p: tuple[int, int, int], s: float,
                plane_gap: float, half_extent: float = 6.0,
                plane_spacing: float = 0.5, r_max: float = 5.0,
                n_rays: int = 16, smooth_sigma: float = 0.7) -> RayProfile:
    """Ray lengths on the three planes orthogonal to the local vessel direction.

    Planes sample a lightly smoothed local crop (smooth_sigma mm, 0 disables)
    so the half-maximum boundary rule stays stable under image noise.
    """
    direction = vessel_direction(vol, p, s)
    center = vol.voxel_to_world(p)
    sampled = _smoothed_crop(vol, p, smooth_sigma,
                             plane_gap + half_extent + 4.0 * smooth_sigma)
    lengths = []
    for offset in (-plane_gap, 0.0, plane_gap):
        plane = extract_orthogonal_plane(sampled, center + offset * direction,
                                         direction, half_extent, plane_spacing)
        lengths.append(cast_rays(plane, (0.0, 0.0), n_rays, r_max))
    lengths = np.asarray(lengths)
    kept = np.sort(lengths, axis=1)[:, 3:-3]
    return RayProfile(lengths=lengths, kept=kept)


def _smoothed_crop(vol: Volume3D, p, sigma: float, reach_mm: float) -> Volume3D:
    """Gaussian-smoothed sub-volume around voxel p covering reach_mm."""
    if sigma <= 0:
        return vol
    from .volume import gaussian_smooth

    lo = [max(0, int(c - math.ceil(reach_mm / sp)))
          for c, sp in zip(p, vol.spacing)]
    hi = [min(n, int(c + math.ceil(reach_mm / sp)) + 1)
          for c, sp, n in zip(p, vol.spacing, vol.dims)]
    crop = Volume3D(vol.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]],
                    vol.spacing,
                    tuple(o + l * sp for o, l, sp in zip(vol.origin, lo, vol.spacing)))
    return gaussian_smooth(crop, sigma)


def geometric_feature(vol: Volume3D, p: tuple[int, int, int], s: float = 2.0,
                      plane_gap: float = 2.0, k: float = 1.0,
                      half_extent: float = 6.0, plane_spacing: float = 0.5,
                      r_max: float = 5.0, pairing: str = "rank") -> float:
    """Cross-plane shape-similarity score; 1 means a perfect cylinder (k=1).

    Per plane the 16 ray lengths are sorted and the three shortest/longest
    dropped; the kept lengths pair across planes by sorted rank (default) or
    by ray direction, and each rank contributes k / (spread + 1) with lengths
    in mm.
    """
    i, j, kz = (int(round(c)) for c in p)
    nx, ny, nz = vol.dims
    if not (0 <= i < nx and 0 <= j < ny and 0 <= kz < nz):
        raise DataError("ray-cast centre lies outside the volume")
    profile = ray_profile(vol, (i, j, kz), s, plane_gap, half_extent,
                          plane_spacing, r_max)
    if pairing == "rank":
        paired = profile.kept
    elif pairing == "direction":
        order = np.argsort(profile.lengths[1], kind="stable")
        keep_dirs = np.sort(order[3:-3])
        paired = profile.lengths[:, keep_dirs]
    else:
        raise DataError("pairing must be 'rank' or 'direction'")
    spread = paired.max(axis=0) - paired.min(axis=0)
    return float(np.prod(k / (spread + 1.0)))


def select_seeds(vol: Volume3D, vf: VesselnessField, rois: list[Roi2D],
                 z: int, thresholds: tuple[float, float, float],
                 plane_gap: float = 2.0, gf_k: float = 1.0,
                 pairing: str = "rank") -> list[SeedCandidate]:
    """Score every ROI centroid at slice z and apply the three thresholds.

    Returns all candidates, accepted ones first, ranked by intensity
    descending (strongest contrast first) with (y, x) as the tie-break.
    Raises NoSeedError when nothing passes.
    """
    t_f, t_gf, v_t = thresholds
    candidates = []
    for roi in rois:
        i = int(math.floor(roi.centroid[0] + 0.5))
        j = int(math.floor(roi.centroid[1] + 0.5))
        f = float(vf.v.data[i, j, z])
        s = float(vf.best_scale.data[i, j, z])
        gf = geometric_feature(vol, (i, j, z), s=s, plane_gap=plane_gap,
                               k=gf_k, pairing=pairing)
        intensity = float(vol.data[i, j, z])
        accepted = f >= t_f and gf >= t_gf and intensity >= v_t
        candidates.append(SeedCandidate((i, j, z), f, gf, intensity, accepted))
    candidates.sort(key=lambda c: (not c.accepted, -c.intensity,
                                   c.point[1], c.point[0]))
    if not any(c.accepted for c in candidates):
        raise NoSeedError("no seed: no ROI passed all three thresholds",
                          candidates=candidates)
    return candidates
