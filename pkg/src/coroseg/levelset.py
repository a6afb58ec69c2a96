"""Signed-distance level-set evolution and bidirectional slice propagation.

Evolution runs slice-wise in 2D with voxel-unit phi, negative inside. Three
energies are available: global Chan-Vese means, localized ball-kernel means,
and the geodesic (edge) flow. Image forces are normalised by the slice
dynamic range so the curvature weight is dimensionless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi
from scipy.signal import fftconvolve
from scipy.spatial import cKDTree

from .errors import CflError, DataError
from .vesselness import VesselnessField
from .volume import BinaryMask, Volume3D


@dataclass
class EvolutionParams:
    energy: str = "chan_vese_localized"
    lambda_weight: float = 0.2        # curvature weight on the normalised force
    ball_radius: float = 4.0          # mm, localized statistics kernel
    dt: float = 0.25
    eps: float = 1.5                  # Heaviside width, voxels
    max_iters: int = 300
    conv_tol: float = 0.001           # fraction of band cells flipping sign
    band: int = 6                     # narrow-band half width, voxels
    reinit_every: int = 10
    hu_gate: tuple[float, float] | None = None
    t_v: float = 0.0                  # vesselness gate
    intensity_scale: float | None = None
    seed_radius: float = 1.5          # mm, initial disc at the seed
    capture_radius: float = 4.0       # mm, branch capture reach
    balloon_v: float = 1.0            # geodesic inflation, > 0 grows outward
    g_sigma: float = 1.5              # pixels, smoothing inside the conformal factor

    def __post_init__(self):
        if self.energy not in ("chan_vese_localized", "chan_vese_global", "geodesic"):
            raise DataError(f"unknown energy kind: {self.energy}")
        if self.dt <= 0 or self.eps <= 0:
            raise DataError("dt and eps must be positive")
        if self.energy == "chan_vese_localized" and self.ball_radius <= 0:
            raise DataError("ball radius must be positive")


@dataclass
class SegmentationResult:
    mask: BinaryMask
    per_slice_contours: dict[int, int]
    provenance: dict[int, str]
    iterations: dict[int, int]
    stop_reasons: dict[str, str]


def _shift2(a: np.ndarray, axis: int, d: int) -> np.ndarray:
    n = a.shape[axis]
    idx = np.clip(np.arange(n) + d, 0, n - 1)
    return np.take(a, idx, axis=axis)


def init_sdf_from_mask(mask: np.ndarray, band: float | None = None) -> np.ndarray:
    """Signed Euclidean distance (voxel units), negative inside.

    Zero crossing lands between boundary voxels; optional clamping to +-band.
    """
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise DataError("cannot build an SDF from an empty mask")
    phi = (ndi.distance_transform_edt(~m) - ndi.distance_transform_edt(m)
           + m.astype(np.float64) - 0.5)
    if band is not None:
        phi = np.clip(phi, -band, band)
    return phi


def curvature(phi: np.ndarray, eps_g: float = 1e-6) -> np.ndarray:
    """Mean curvature div(grad phi / |grad phi|) by central differences (2D)."""
    px = (_shift2(phi, 0, 1) - _shift2(phi, 0, -1)) / 2.0
    py = (_shift2(phi, 1, 1) - _shift2(phi, 1, -1)) / 2.0
    pxx = _shift2(phi, 0, 1) - 2.0 * phi + _shift2(phi, 0, -1)
    pyy = _shift2(phi, 1, 1) - 2.0 * phi + _shift2(phi, 1, -1)
    pxy = (_shift2(_shift2(phi, 0, 1), 1, 1) - _shift2(_shift2(phi, 0, 1), 1, -1)
           - _shift2(_shift2(phi, 0, -1), 1, 1)
           + _shift2(_shift2(phi, 0, -1), 1, -1)) / 4.0
    g2 = px * px + py * py
    num = pyy * px * px + pxx * py * py - 2.0 * px * py * pxy
    flat = g2 < eps_g * eps_g
    denom = np.where(flat, 1.0, g2 ** 1.5)
    return np.where(flat, 0.0, num / denom)


def smoothed_heaviside(t, eps: float):
    """H_eps(t) = (1 + (2/pi) atan(t/eps)) / 2."""
    if eps <= 0:
        raise DataError("eps must be positive")
    return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(np.asarray(t, dtype=np.float64) / eps))


def smoothed_delta(t, eps: float):
    """Derivative of the smoothed Heaviside: eps / (pi (eps^2 + t^2))."""
    if eps <= 0:
        raise DataError("eps must be positive")
    t = np.asarray(t, dtype=np.float64)
    return eps / (np.pi * (eps * eps + t * t))


def region_means(image: np.ndarray, phi: np.ndarray, eps: float = 1.5):
    """Smoothed interior and exterior intensity averages (inside = phi < 0)."""
    h = smoothed_heaviside(phi, eps)
    w_in = 1.0 - h
    m_in = float(w_in.sum())
    m_out = float(h.sum())
    if m_in < 1e-6 or m_out < 1e-6:
        raise DataError("a region is empty; cannot compute its mean")
    c1 = float((image * w_in).sum() / m_in)
    c2 = float((image * h).sum() / m_out)
    return c1, c2


def _intensity_scale(image: np.ndarray, params: EvolutionParams) -> float:
    if params.intensity_scale is not None:
        return params.intensity_scale
    span = float(image.max() - image.min())
    return span if span > 0 else 1.0


def _band_mask(phi: np.ndarray, band: int) -> np.ndarray:
    return np.abs(phi) <= band


def _apply_force(phi: np.ndarray, force: np.ndarray,
                 params: EvolutionParams) -> np.ndarray:
    """Scale the raw force by its band maximum and take one descent step.

    The normaliser is a positive per-step scalar, so each update stays a
    descent direction of the underlying raw energy.
    """
    band = _band_mask(phi, params.band)
    norm = float(np.abs(force[band]).max()) if band.any() else 0.0
    if norm == 0.0:
        return phi.copy()
    # delta is scaled to peak 1 so the largest per-step update is exactly dt
    delta_rel = smoothed_delta(phi, params.eps) / smoothed_delta(0.0, params.eps)
    upd = params.dt * delta_rel * (force / norm)
    return phi + np.where(band, upd, 0.0)


def cv_global_step(phi: np.ndarray, image: np.ndarray,
                   params: EvolutionParams) -> np.ndarray:
    """One descent step of the global two-mean energy, band cells only."""
    c1, c2 = region_means(image, phi, params.eps)
    s2 = _intensity_scale(image, params) ** 2
    force = (image - c1) ** 2 - (image - c2) ** 2
    kappa = np.clip(curvature(phi), -1.0, 1.0)
    return _apply_force(phi, params.lambda_weight * s2 * kappa + force, params)


_KERNEL_CACHE: dict[tuple[float, float, float], np.ndarray] = {}


def _ball_kernel(radius_mm: float, spacing: tuple[float, float]) -> np.ndarray:
    key = (round(radius_mm, 9), round(spacing[0], 9), round(spacing[1], 9))
    k = _KERNEL_CACHE.get(key)
    if k is None:
        rx = int(math.ceil(radius_mm / spacing[0]))
        ry = int(math.ceil(radius_mm / spacing[1]))
        ox, oy = np.mgrid[-rx:rx + 1, -ry:ry + 1]
        d2 = (ox * spacing[0]) ** 2 + (oy * spacing[1]) ** 2
        k = (d2 < radius_mm ** 2).astype(np.float64)
        _KERNEL_CACHE[key] = k
    return k


def localized_step(phi: np.ndarray, image: np.ndarray, params: EvolutionParams,
                   spacing: tuple[float, float] = (1.0, 1.0),
                   vesselness: np.ndarray | None = None) -> np.ndarray:
    """One descent step with per-cell means over the radius-r ball kernel.

    Cells whose intensity falls outside the HU gate, or whose vesselness is
    below t_v, receive only the non-growing (shrink) part of the image force.
    A ball with no interior or no exterior mass contributes zero force.
    """
    kernel = _ball_kernel(params.ball_radius, spacing)
    h = smoothed_heaviside(phi, params.eps)
    w_in = 1.0 - h
    sum_in = fftconvolve(w_in, kernel, mode="same")
    sum_i_in = fftconvolve(image * w_in, kernel, mode="same")
    sum_all = fftconvolve(np.ones_like(image), kernel, mode="same")
    sum_i_all = fftconvolve(image, kernel, mode="same")
    sum_out = sum_all - sum_in
    sum_i_out = sum_i_all - sum_i_in

    ok = (sum_in > 1e-6) & (sum_out > 1e-6)
    c1 = np.divide(sum_i_in, sum_in, out=np.zeros_like(phi), where=ok)
    c2 = np.divide(sum_i_out, sum_out, out=np.zeros_like(phi), where=ok)
    force = np.where(ok, (image - c1) ** 2 - (image - c2) ** 2, 0.0)

    gated = np.zeros_like(force, dtype=bool)
    if params.hu_gate is not None:
        lo, hi = params.hu_gate
        gated |= (image < lo) | (image > hi)
    if vesselness is not None:
        gated |= vesselness < params.t_v
    force = np.where(gated, np.maximum(force, 0.0), force)

    s2 = _intensity_scale(image, params) ** 2
    kappa = np.clip(curvature(phi), -1.0, 1.0)
    return _apply_force(phi, params.lambda_weight * s2 * kappa + force, params)


def conformal_factor(image: np.ndarray, sigma: float) -> np.ndarray:
    """Edge-stopping field g = 1 / (1 + |grad(G_sigma * I)|^2), pixel units."""
    if sigma <= 0:
        raise DataError("sigma must be positive")
    sm = ndi.gaussian_filter(np.asarray(image, dtype=np.float64), sigma,
                             mode="nearest", truncate=4.0)
    gx = (_shift2(sm, 0, 1) - _shift2(sm, 0, -1)) / 2.0
    gy = (_shift2(sm, 1, 1) - _shift2(sm, 1, -1)) / 2.0
    return 1.0 / (1.0 + gx * gx + gy * gy)


def geodesic_step(phi: np.ndarray, g: np.ndarray, v: float, dt: float) -> np.ndarray:
    """Upwind geodesic flow step; v > 0 inflates the contour outward.

    Raises CflError when dt * max(|v g| + |grad g|) exceeds 0.45 voxel units.
    """
    gx = (_shift2(g, 0, 1) - _shift2(g, 0, -1)) / 2.0
    gy = (_shift2(g, 1, 1) - _shift2(g, 1, -1)) / 2.0
    speed_bound = float(np.max(np.abs(v * g) + np.hypot(gx, gy)))
    if dt * speed_bound > 0.45 + 1e-12:
        raise CflError(f"dt*max speed = {dt * speed_bound:.3f} exceeds the 0.45 CFL bound")

    dxm = phi - _shift2(phi, 0, -1)
    dxp = _shift2(phi, 0, 1) - phi
    dym = phi - _shift2(phi, 1, -1)
    dyp = _shift2(phi, 1, 1) - phi
    grad_plus = np.sqrt(np.maximum(dxm, 0) ** 2 + np.minimum(dxp, 0) ** 2
                        + np.maximum(dym, 0) ** 2 + np.minimum(dyp, 0) ** 2)
    grad_minus = np.sqrt(np.maximum(dxp, 0) ** 2 + np.minimum(dxm, 0) ** 2
                         + np.maximum(dyp, 0) ** 2 + np.minimum(dym, 0) ** 2)

    px = (dxp + dxm) / 2.0
    py = (dyp + dym) / 2.0
    grad_central = np.sqrt(px * px + py * py)
    kappa = np.clip(curvature(phi), -1.0, 1.0)

    balloon = g * v
    advect = (np.maximum(gx, 0) * dxp + np.minimum(gx, 0) * dxm
              + np.maximum(gy, 0) * dyp + np.minimum(gy, 0) * dym)
    upd = (g * kappa * grad_central
           - (np.maximum(balloon, 0) * grad_plus + np.minimum(balloon, 0) * grad_minus)
           + advect)
    return phi + dt * upd


def interface_points(phi: np.ndarray, step: float = 0.1) -> np.ndarray:
    """Dense sub-voxel sampling of the zero level set, as (n, 2) coords.

    Marching-squares contours (linear interpolation) resampled at `step`
    voxels so point-cloud distances track the continuous interface.
    """
    from skimage import measure

    pts = []
    for contour in measure.find_contours(phi, 0.0):
        seg = np.diff(contour, axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        pts.append(contour[:1])
        for a, vec, ln in zip(contour[:-1], seg, lengths):
            if ln == 0:
                continue
            n = max(1, int(math.ceil(ln / step)))
            t = np.arange(1, n + 1)[:, None] / n
            pts.append(a[None, :] + t * vec[None, :])
    if not pts:
        return np.empty((0, 2))
    return np.vstack(pts)


def reinitialize(phi: np.ndarray, band: float | None = None) -> np.ndarray:
    """Replace phi by the signed distance to its reconstructed zero level set.

    The interface is sampled at linearly interpolated edge crossings, so an
    already-exact SDF is reproduced to second order and the zero crossing
    moves well under half a voxel.
    """
    inside = phi < 0
    if not inside.any() or inside.all():
        raise DataError("cannot reinitialize: the zero level set is empty")
    pts = interface_points(phi)
    if pts.shape[0] == 0:
        raise DataError("cannot reinitialize: the zero level set is empty")
    tree = cKDTree(pts)
    if band is None:
        cells = np.stack(np.mgrid[0:phi.shape[0], 0:phi.shape[1]], axis=-1)
        d, _ = tree.query(cells.reshape(-1, 2).astype(np.float64))
        d = d.reshape(phi.shape)
        return np.where(phi < 0, -d, d)
    # distances only where the band can live; clamp the far field
    clamp = float(band) + 2.0
    idx = np.argwhere(np.abs(phi) <= clamp)
    d_near, _ = tree.query(idx.astype(np.float64))
    out = np.where(phi < 0, -clamp, clamp)
    out[tuple(idx.T)] = np.clip(np.where(phi[tuple(idx.T)] < 0, -d_near, d_near),
                                -clamp, clamp)
    return out


def adjust_mask_for_branches(mask: np.ndarray, image: np.ndarray,
                             hu_gate: tuple[float, float] | None,
                             capture_radius: float,
                             spacing: tuple[float, float] = (1.0, 1.0),
                             vesselness: np.ndarray | None = None,
                             t_v: float = 0.0) -> np.ndarray:
    """Add nearby voxels passing both gates as fresh contour components.

    Candidates must lie within capture_radius (mm) of the current mask and
    satisfy the HU gate and, when a vesselness slice is given, v >= t_v.
    """
    m = np.asarray(mask).astype(bool)
    if not m.any() or capture_radius <= 0:
        return m.copy()
    rx = int(math.floor(capture_radius / spacing[0] + 1e-9))
    ry = int(math.floor(capture_radius / spacing[1] + 1e-9))
    ox, oy = np.mgrid[-rx:rx + 1, -ry:ry + 1]
    se = (ox * spacing[0]) ** 2 + (oy * spacing[1]) ** 2 <= capture_radius ** 2 + 1e-9
    ring = ndi.binary_dilation(m, structure=se) & ~m
    ok = ring
    if hu_gate is not None:
        lo, hi = hu_gate
        ok = ok & (image >= lo) & (image <= hi)
    if vesselness is not None:
        ok = ok & (vesselness >= t_v)
    return m | ok


# ---------------------------------------------------------------------------
# Slice evolution driver
# ---------------------------------------------------------------------------

def _gate_mask(image: np.ndarray, hu_gate) -> np.ndarray:
    if hu_gate is None:
        return np.ones_like(image, dtype=bool)
    lo, hi = hu_gate
    return (image >= lo) & (image <= hi)


def evolve_slice(image: np.ndarray, init_mask: np.ndarray, params: EvolutionParams,
                 spacing: tuple[float, float] = (1.0, 1.0),
                 vesselness: np.ndarray | None = None):
    """Evolve one 2D slice from an initial mask to convergence.

    Work happens on a window around the initial mask (grown on demand); the
    converged mask is intersected with the HU gate. Returns (mask, iterations,
    converged flag).
    """
    init = np.asarray(init_mask).astype(bool)
    if not init.any():
        return np.zeros_like(init), 0, True
    nx, ny = image.shape
    r_px = int(math.ceil(params.ball_radius / min(spacing)))
    margin = r_px + params.band + 4

    for attempt in range(4):
        xs, ys = np.nonzero(init)
        x0 = max(0, xs.min() - margin)
        x1 = min(nx, xs.max() + 1 + margin)
        y0 = max(0, ys.min() - margin)
        y1 = min(ny, ys.max() + 1 + margin)
        win = np.s_[x0:x1, y0:y1]
        img_w = image[win]
        ves_w = vesselness[win] if vesselness is not None else None
        phi = init_sdf_from_mask(init[win])
        g = conformal_factor(img_w, params.g_sigma) if params.energy == "geodesic" else None

        iters = 0
        converged = False
        prev_inside = phi < 0
        # sign flips need several sub-voxel updates, so convergence is judged
        # over a window of iterations rather than a single one
        window = max(4, int(math.ceil(0.5 / params.dt)) + 2)
        recent: list[int] = []
        for it in range(1, params.max_iters + 1):
            if params.energy == "chan_vese_localized":
                phi = localized_step(phi, img_w, params, spacing, ves_w)
            elif params.energy == "chan_vese_global":
                phi = cv_global_step(phi, img_w, params)
            else:
                gx = (_shift2(g, 0, 1) - _shift2(g, 0, -1)) / 2.0
                gy = (_shift2(g, 1, 1) - _shift2(g, 1, -1)) / 2.0
                bound = float(np.max(np.abs(params.balloon_v * g) + np.hypot(gx, gy)))
                dt = min(params.dt, 0.45 / bound) if bound > 0 else params.dt
                phi = geodesic_step(phi, g, params.balloon_v, dt)
            if params.reinit_every and it % params.reinit_every == 0:
                inside_now = phi < 0
                if inside_now.any() and not inside_now.all():
                    phi = reinitialize(phi, band=params.band + 2)
            iters = it
            inside = phi < 0
            nb = int(_band_mask(phi, params.band).sum())
            recent.append(int((inside != prev_inside).sum()))
            prev_inside = inside
            if len(recent) >= window and sum(recent[-window:]) < max(1.0, params.conv_tol * nb):
                converged = True
                break
            if not inside.any():
                break

        inside = phi < 0
        # grow the window if the contour reached its rim (unless already full)
        rim = np.zeros_like(inside)
        rim[0, :] = rim[-1, :] = rim[:, 0] = rim[:, -1] = True
        full = x0 == 0 and y0 == 0 and x1 == nx and y1 == ny
        if inside[rim].any() and not full:
            grown = np.zeros_like(init)
            grown[win] = inside
            init = grown | init
            margin *= 2
            continue
        out = np.zeros((nx, ny), dtype=bool)
        out[win] = inside & _gate_mask(img_w, params.hu_gate)
        return out, iters, converged
    out = np.zeros((nx, ny), dtype=bool)
    out[win] = inside & _gate_mask(img_w, params.hu_gate)
    return out, iters, converged


def _seed_disc(shape, center, radius_mm, spacing) -> np.ndarray:
    ix, iy = np.mgrid[0:shape[0], 0:shape[1]]
    d2 = ((ix - center[0]) * spacing[0]) ** 2 + ((iy - center[1]) * spacing[1]) ** 2
    return d2 <= radius_mm ** 2


def slice_propagate(vol: Volume3D, seed: tuple[int, int, int], direction: str,
                    params: EvolutionParams,
                    vesselness: VesselnessField | None = None,
                    aorta: BinaryMask | None = None):
    """Propagate 2D segmentations axially from the seed slice.

    direction is "forward" (increasing z) or "backward"; propagation halts on
    an empty converged slice, the volume end, or (backward) when the slice
    mask merges into the aorta mask by more than half of its area.
    """
    if direction not in ("forward", "backward"):
        raise DataError("direction must be 'forward' or 'backward'")
    i, j, k = (int(c) for c in seed)
    nx, ny, nz = vol.dims
    if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
        raise DataError("seed lies outside the volume")
    if params.hu_gate is not None:
        lo, hi = params.hu_gate
        if not lo <= vol.data[i, j, k] <= hi:
            raise DataError(
                f"seed HU {vol.data[i, j, k]:.1f} outside the gate [{lo}, {hi}]")

    spacing2 = (vol.spacing[0], vol.spacing[1])
    step = 1 if direction == "forward" else -1
    masks: dict[int, np.ndarray] = {}
    iterations: dict[int, int] = {}
    provenance: dict[int, str] = {}
    stop_reason = "volume_end"

    init = _seed_disc((nx, ny), (i, j), params.seed_radius, spacing2)
    z = k
    while 0 <= z < nz:
        image = vol.data[:, :, z]
        ves = vesselness.v.data[:, :, z] if vesselness is not None else None
        mask, iters, _ = evolve_slice(image, init, params, spacing2, ves)
        if not mask.any():
            stop_reason = "empty_slice"
            break
        if direction == "backward" and aorta is not None:
            overlap = int((mask & aorta.data[:, :, z]).sum())
            if overlap > 0.5 * mask.sum():
                stop_reason = "aorta_merge"
                break
        masks[z] = mask
        iterations[z] = iters
        provenance[z] = "seed" if z == k else direction
        nxt = adjust_mask_for_branches(mask, image, params.hu_gate,
                                       params.capture_radius, spacing2,
                                       ves, params.t_v)
        init = ndi.binary_dilation(nxt)  # 1-voxel dilation tolerates drift
        z += step
    return {"masks": masks, "iterations": iterations,
            "provenance": provenance, "stop_reason": stop_reason}


def segment_tree(vol: Volume3D, seed: tuple[int, int, int], params: EvolutionParams,
                 vesselness: VesselnessField | None = None,
                 aorta: BinaryMask | None = None) -> SegmentationResult:
    """Union of forward and backward propagation, cleaned to the seed component."""
    fwd = slice_propagate(vol, seed, "forward", params, vesselness, aorta)
    bwd = slice_propagate(vol, seed, "backward", params, vesselness, aorta)

    data = np.zeros(vol.dims, dtype=bool)
    provenance: dict[int, str] = {}
    iterations: dict[int, int] = {}
    for run in (bwd, fwd):
        for z, m in run["masks"].items():
            data[:, :, z] |= m
            provenance[z] = run["provenance"][z]
            iterations[z] = run["iterations"][z]
    if not data.any():
        raise DataError("segmentation produced an empty mask")

    labels, _ = ndi.label(data, structure=ndi.generate_binary_structure(3, 3))
    i, j, k = (int(c) for c in seed)
    lab = labels[i, j, k]
    if lab == 0:
        inside = np.argwhere(data)
        d2 = ((inside - np.array([i, j, k])) ** 2).sum(axis=1)
        nearest = inside[int(np.argmin(d2))]
        if d2.min() > 9:
            raise DataError("seed is not inside the segmented mask")
        lab = labels[tuple(nearest)]
    data = labels == lab

    contours = {}
    for z in range(vol.dims[2]):
        sl = data[:, :, z]
        if sl.any():
            _, n = ndi.label(sl, structure=np.ones((3, 3), bool))
            contours[z] = int(n)
    mask = BinaryMask(data, vol.spacing, vol.origin)
    return SegmentationResult(mask=mask, per_slice_contours=contours,
                              provenance=provenance, iterations=iterations,
                              stop_reasons={"forward": fwd["stop_reason"],
                                            "backward": bwd["stop_reason"]})
