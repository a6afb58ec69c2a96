"""Deterministic synthetic volumes with analytic ground truth.

Every phantom is reproducible bit-exactly from (spec, seed): voxel values are
background + (foreground - background) * profile(distance) * ramp(z) + noise,
and the truth mask is the exact distance-threshold set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import erfc

from .errors import DataError
from .volume import BinaryMask, Volume3D

LABEL_BACKGROUND = 0
LABEL_EDGE = 1
LABEL_INTERIOR = 2
LABEL_AXIS = 3

KINDS = ("tube", "helix", "y_bifurcation", "ball", "plate", "aorta_plus_coronary")


@dataclass
class PhantomSpec:
    kind: str = "tube"
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5)
    radius: float = 2.0               # mm; tube/ball/coronary radius
    foreground: float = 495.0         # blood-like HU
    background: float = 40.0          # myocardium-like HU
    profile: str = "hard"             # "hard" | "gaussian"
    edge_sigma: float = 0.5           # mm, gaussian profile only
    noise_sigma: float = 0.0          # HU
    ramp: float = 1.0                 # foreground deviation factor at the last slice
    seed: int = 0
    # tube endpoints in mm; None spans the volume centre along z
    p0: tuple[float, float, float] | None = None
    p1: tuple[float, float, float] | None = None
    # helix
    helix_radius: float = 8.0
    helix_pitch: float = 12.0
    helix_turns: float = 1.5
    # y_bifurcation: trunk splits at z_split into two limbs tilted by angle
    branch_angle: float = 25.0        # degrees from the trunk axis
    # plate
    plate_thickness: float = 2.0
    plate_normal: int = 0             # axis index of the plate normal
    plate_extent: float = 24.0        # half extent (mm) in the in-plane axes
    # aorta_plus_coronary
    aorta_radius: float = 15.0
    aorta_zfrac: float = 0.3          # aorta spans [0, zfrac) of the z extent
    coronary_offset: float = 12.0     # mm lateral offset of the coronary axis

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown phantom kind: {self.kind}")
        if self.foreground == self.background:
            raise DataError("foreground and background must differ")
        if self.radius <= 0:
            raise DataError("radius must be positive")
        if self.profile not in ("hard", "gaussian"):
            raise DataError("profile must be 'hard' or 'gaussian'")


@dataclass
class GroundTruth:
    mask: BinaryMask
    centrelines: list[np.ndarray]     # polylines, mm
    labels: np.ndarray                # uint8 per-voxel tags
    parts: dict[str, np.ndarray] = field(default_factory=dict)

    def label_mask(self, label: int) -> np.ndarray:
        return self.labels == label

    @property
    def axis_mask(self) -> np.ndarray:
        return self.labels == LABEL_AXIS

    @property
    def interior_mask(self) -> np.ndarray:
        return self.labels == LABEL_INTERIOR

    @property
    def background_mask(self) -> np.ndarray:
        return self.labels == LABEL_BACKGROUND

    def endpoints(self) -> list[np.ndarray]:
        out = []
        for line in self.centrelines:
            out.append(line[0])
            out.append(line[-1])
        return out


def _segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0:
        return np.linalg.norm(pts - a, axis=-1)
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    proj = a[None, :] + t[:, None] * ab[None, :]
    return np.linalg.norm(pts - proj, axis=-1)


def _polyline(a, b, step: float) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(2, int(math.ceil(np.linalg.norm(b - a) / step)) + 1)
    return a[None, :] + np.linspace(0.0, 1.0, n)[:, None] * (b - a)[None, :]


def _world_grid(spec: PhantomSpec) -> np.ndarray:
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    ix, iy, iz = np.mgrid[0:nx, 0:ny, 0:nz]
    return np.stack([ix * sx, iy * sy, iz * sz], axis=-1).reshape(-1, 3)


def _check_bounds(points_mm, spec: PhantomSpec, margin: float = 0.0):
    """Reject primitives whose core leaves the volume (clipping is allowed
    only at the volume faces a tube runs through, so the core must fit)."""
    lo = np.min(points_mm, axis=0) - margin
    hi = np.max(points_mm, axis=0) + margin
    world_hi = (np.asarray(spec.dims) - 1) * np.asarray(spec.spacing)
    tol = 0.5 * min(spec.spacing) + 1e-9
    if (lo < -tol).any() or (hi > world_hi + tol).any():
        raise DataError("primitive exceeds the volume bounds")


def _geometry(spec: PhantomSpec, pts: np.ndarray):
    """Distance field to the primitive, its radius set and truth centrelines."""
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    cx, cy = (nx - 1) * sx / 2.0, (ny - 1) * sy / 2.0
    z_hi = (nz - 1) * sz
    fine = 0.25 * min(spec.spacing)

    if spec.kind == "tube":
        a = np.asarray(spec.p0 if spec.p0 is not None else (cx, cy, 0.0))
        b = np.asarray(spec.p1 if spec.p1 is not None else (cx, cy, z_hi))
        _check_bounds(np.vstack([a, b]), spec)
        d = _segment_distance(pts, a, b)
        return d, np.full(pts.shape[0], spec.radius), [_polyline(a, b, fine)], {}

    if spec.kind == "ball":
        c = np.array([cx, cy, z_hi / 2.0])
        _check_bounds(c[None, :], spec, margin=spec.radius)
        d = np.linalg.norm(pts - c, axis=-1)
        return d, np.full(pts.shape[0], spec.radius), [c[None, :]], {}

    if spec.kind == "plate":
        axis = spec.plate_normal
        center = np.array([cx, cy, z_hi / 2.0])
        half = spec.plate_thickness / 2.0
        in_plane = [a for a in range(3) if a != axis]
        # distance to the plate's mid-plane rectangle; mask is d <= half
        lat = np.maximum(np.abs(pts[:, in_plane] - center[in_plane])
                         - spec.plate_extent, 0.0)
        d_axis = pts[:, axis] - center[axis]
        d = np.sqrt(d_axis ** 2 + (lat ** 2).sum(axis=1))
        _check_bounds(center[None, :], spec, margin=half)
        line = np.array([center, center + 1e-6])  # plates carry no usable axis
        return d, np.full(pts.shape[0], half), [line], {}

    if spec.kind == "helix":
        arc = spec.helix_turns * math.hypot(2.0 * np.pi * spec.helix_radius,
                                            spec.helix_pitch)
        n = max(16, int(math.ceil(arc / 0.1)) + 1)
        t = np.linspace(0.0, 2.0 * np.pi * spec.helix_turns, n)
        z0 = (z_hi - spec.helix_pitch * spec.helix_turns) / 2.0
        curve = np.stack([
            cx + spec.helix_radius * np.cos(t),
            cy + spec.helix_radius * np.sin(t),
            z0 + spec.helix_pitch * t / (2.0 * np.pi),
        ], axis=1)
        _check_bounds(curve, spec)
        tree = cKDTree(curve)
        d, _ = tree.query(pts)
        return d, np.full(pts.shape[0], spec.radius), [curve], {}

    if spec.kind == "y_bifurcation":
        z_split = z_hi * 0.45
        trunk_a = np.array([cx, cy, sz])
        trunk_b = np.array([cx, cy, z_split])
        ang = math.radians(spec.branch_angle)
        length = z_hi - z_split - sz
        tip_dx = length * math.tan(ang)
        left_b = np.array([cx - tip_dx, cy, z_hi - sz])
        right_b = np.array([cx + tip_dx, cy, z_hi - sz])
        segs = [(trunk_a, trunk_b), (trunk_b, left_b), (trunk_b, right_b)]
        _check_bounds(np.vstack([p for s in segs for p in s]), spec)
        d = np.min(np.stack([_segment_distance(pts, a, b) for a, b in segs]), axis=0)
        lines = [np.vstack([_polyline(trunk_a, trunk_b, fine),
                            _polyline(trunk_b, left_b, fine)[1:]]),
                 _polyline(trunk_b, right_b, fine)]
        return d, np.full(pts.shape[0], spec.radius), lines, {}

    # aorta_plus_coronary: a flat-capped vertical cylinder joined by a thin
    # tube; the elbow stays close to the aorta so mid-volume slices cut a
    # clean circular coronary cross-section
    z_a = z_hi * spec.aorta_zfrac
    join = np.array([cx, cy, z_a - 2.0])
    elbow = np.array([cx + spec.coronary_offset, cy, z_a + 4.0])
    top = np.array([cx + spec.coronary_offset, cy, z_hi - 2.0 * sz])
    world_hi = (np.asarray(spec.dims) - 1) * np.asarray(spec.spacing)
    tol = 0.5 * min(spec.spacing) + 1e-9
    if (cx - spec.aorta_radius < -tol or cx + spec.aorta_radius > world_hi[0] + tol
            or cy - spec.aorta_radius < -tol or cy + spec.aorta_radius > world_hi[1] + tol):
        raise DataError("primitive exceeds the volume bounds")
    _check_bounds(np.vstack([join, elbow, top]), spec)
    # signed distance to the capped cylinder (inside <= 0)
    dlat = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) - spec.aorta_radius
    dz = np.maximum(pts[:, 2] - z_a, -pts[:, 2])
    s_aorta = (np.minimum(np.maximum(dlat, dz), 0.0)
               + np.hypot(np.maximum(dlat, 0.0), np.maximum(dz, 0.0)))
    d_cor = np.minimum(_segment_distance(pts, join, elbow),
                       _segment_distance(pts, elbow, top))
    r = np.where(s_aorta <= d_cor - spec.radius, spec.aorta_radius, spec.radius)
    d = np.minimum(s_aorta, d_cor - spec.radius) + r
    cor_line = np.vstack([_polyline(join, elbow, fine),
                          _polyline(elbow, top, fine)[1:]])
    parts = {"aorta": s_aorta, "coronary": d_cor - spec.radius}
    return d, r, [cor_line], parts


def generate(spec: PhantomSpec) -> tuple[Volume3D, GroundTruth]:
    """Build the phantom volume and its analytic ground truth."""
    pts = _world_grid(spec)
    d, radius, centrelines, part_d = _geometry(spec, pts)
    nx, ny, nz = spec.dims
    min_sp = min(spec.spacing)

    if spec.profile == "hard":
        profile = (d <= radius).astype(np.float64)
    else:
        profile = 0.5 * erfc((d - radius) / (math.sqrt(2.0) * spec.edge_sigma))

    iz = np.mgrid[0:nx, 0:ny, 0:nz][2].reshape(-1).astype(np.float64)
    ramp = 1.0 + (spec.ramp - 1.0) * (iz / max(nz - 1, 1))
    values = spec.background + (spec.foreground - spec.background) * profile * ramp
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        values = values + rng.normal(0.0, spec.noise_sigma, values.shape)

    vol = Volume3D(values.reshape(spec.dims), spec.spacing, (0.0, 0.0, 0.0))
    inside = (d <= radius).reshape(spec.dims)
    mask = BinaryMask(inside, spec.spacing, (0.0, 0.0, 0.0))

    labels = np.zeros(spec.dims, dtype=np.uint8)
    near_edge = (np.abs(d - radius) <= min_sp).reshape(spec.dims)
    labels[near_edge] = LABEL_EDGE
    labels[inside & ~near_edge] = LABEL_INTERIOR
    on_axis = (d <= 0.75 * min_sp).reshape(spec.dims)
    labels[on_axis & inside & ~near_edge] = LABEL_AXIS

    parts = {}
    if part_d:
        # part fields are signed distances: inside <= 0
        parts = {name: signed.reshape(spec.dims) <= 0
                 for name, signed in part_d.items()}
    return vol, GroundTruth(mask=mask, centrelines=centrelines,
                            labels=labels, parts=parts)


def apply_ramp(vol: Volume3D, factor: float, background: float = 0.0) -> Volume3D:
    """Scale the deviation from background by a linear 1 -> factor ramp in z."""
    if factor <= 0:
        raise DataError("ramp factor must be positive")
    nz = vol.dims[2]
    ramp = 1.0 + (factor - 1.0) * np.arange(nz) / max(nz - 1, 1)
    data = background + (vol.data - background) * ramp[None, None, :]
    return vol.like(data)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def evaluate(result, truth: GroundTruth, metric: str, tolerance_mm: float = 1.0):
    """Score a segmentation or centreline against the ground truth.

    dice: result is a BinaryMask with the truth's geometry.
    centreline_rmse: result is a Centreline or an (n, 3) point array (mm).
    endpoint_hit: every truth endpoint has a result mask voxel within
    tolerance_mm.
    """
    if metric == "dice":
        if not truth.mask.same_geometry(result):
            raise DataError("mask geometry does not match the ground truth")
        return dice(result.data, truth.mask.data)
    if metric == "centreline_rmse":
        pts = result
        if hasattr(result, "branches"):
            pts = np.vstack([br.points for br in result.branches])
        pts = np.asarray(pts, dtype=np.float64)
        truth_pts = np.vstack(truth.centrelines)
        d, _ = cKDTree(truth_pts).query(pts)
        return float(np.sqrt(np.mean(d ** 2)))
    if metric == "endpoint_hit":
        if not truth.mask.same_geometry(result):
            raise DataError("mask geometry does not match the ground truth")
        vox = np.argwhere(result.data)
        if vox.size == 0:
            return False
        vox_mm = vox * np.asarray(result.spacing) + np.asarray(result.origin)
        tree = cKDTree(vox_mm)
        for ep in truth.endpoints():
            d, _ = tree.query(ep)
            if d > tolerance_mm:
                return False
        return True
    raise DataError(f"unknown metric: {metric}")
