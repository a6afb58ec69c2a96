"""Fast-marching arrival times, sub-voxel centrelines and vessel straightening."""

from __future__ import annotations

import csv
import heapq
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import cKDTree

from .errors import BacktrackStagnation, DataError
from .volume import BinaryMask, Image2D, Volume3D, trilinear_sample


@dataclass
class ArrivalField:
    """First-arrival times for |grad T| = 1/speed plus bookkeeping."""

    t: Volume3D
    accepted_order: np.ndarray          # flat indices in acceptance order
    sources: list[tuple[int, int, int]]


@dataclass
class Branch:
    points: np.ndarray                  # (n, 3) mm, ordered root -> tip
    radii: np.ndarray                   # (n,) mm
    parent: int = -1                    # -1 for the main branch
    attachment_index: int = -1          # point index on the parent


@dataclass
class Centreline:
    branches: list[Branch]
    spacing: tuple[float, float, float]


@dataclass
class StraightenedVolume:
    """Cross-sections stacked along arc length with their sampling frames."""

    volume: Volume3D
    frames: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # (center, u, v)


def distance_field(mask: BinaryMask) -> Volume3D:
    """Distance (mm) from inside voxels to the boundary, 0 outside.

    A single-voxel mask maps to half the minimum spacing (boundary runs
    between voxel centres).
    """
    if not mask.data.any():
        raise DataError("distance field of an empty mask")
    half = 0.5 * min(mask.spacing)
    d = ndi.distance_transform_edt(mask.data, sampling=mask.spacing)
    d = np.where(mask.data, np.maximum(d - half, half), 0.0)
    return Volume3D(d, mask.spacing, mask.origin)


def fast_march(speed: Volume3D, sources, seed_radius: float = 2.0) -> ArrivalField:
    """Fast marching for |grad T| = 1/speed with a min-heap accepted order.

    Second-order upwind differences where two accepted neighbours line up, a
    first-order fallback otherwise. Voxels within seed_radius (voxels) of a
    source start from the local straight-ray time, which removes the
    point-source singularity error. Zero-speed voxels stay at T = inf;
    accepted values are checked to be non-decreasing.
    """
    f = speed.data
    if (f < 0).any():
        raise DataError("speed must be non-negative")
    if not (f > 0).any():
        raise DataError("speed is zero everywhere")
    dims = speed.dims
    h = speed.spacing
    t = np.full(dims, np.inf)
    state = np.zeros(dims, dtype=np.uint8)  # 0 far, 1 trial, 2 accepted
    heap = []
    src = []
    for s in sources:
        s = tuple(int(c) for c in s)
        if f[s] <= 0:
            raise DataError(f"source {s} lies outside the speed support")
        src.append(s)
        t[s] = 0.0
    if not src:
        raise DataError("at least one source is required")

    # straight-ray initialisation kills the point-source singularity error;
    # multi-source fronts skip it (per-source rays are inconsistent there)
    r = int(math.ceil(seed_radius)) if len(src) == 1 else 0
    if r > 0:
        for s in src:
            f_src = f[s]
            for dx in range(-r, r + 1):
                for dy in range(-r, r + 1):
                    for dz in range(-r, r + 1):
                        q = (s[0] + dx, s[1] + dy, s[2] + dz)
                        if not all(0 <= q[a] < dims[a] for a in range(3)):
                            continue
                        if f[q] <= 0:
                            continue
                        dist = math.sqrt((dx * h[0]) ** 2 + (dy * h[1]) ** 2
                                         + (dz * h[2]) ** 2)
                        if dist <= seed_radius * min(h):
                            t[q] = min(t[q], dist / f_src)
    for idx in zip(*np.nonzero(np.isfinite(t))):
        heapq.heappush(heap, (float(t[idx]), idx))
        state[idx] = 1

    order = []
    last = -np.inf
    # distance-2 triggers matter: accepting a voxel can upgrade a neighbour's
    # stencil to second order, and that push must happen immediately to keep
    # the accepted order monotone
    offsets = [(d if a == 0 else 0, d if a == 1 else 0, d if a == 2 else 0)
               for a in range(3) for d in (-2, -1, 1, 2)]

    def quad_solve(terms, inv_f2):
        # terms: (weight, upwind value) per axis, ascending in value
        t_new = terms[0][1] + math.sqrt(inv_f2 / terms[0][0])
        for m in range(2, len(terms) + 1):
            use = terms[:m]
            if t_new <= use[-1][1]:
                break
            a = sum(av[0] for av in use)
            b = sum(-2.0 * av[0] * av[1] for av in use)
            c = sum(av[0] * av[1] ** 2 for av in use) - inv_f2
            disc = b * b - 4.0 * a * c
            if disc < 0:
                break
            cand = (-b + math.sqrt(disc)) / (2.0 * a)
            if cand >= use[-1][1]:
                t_new = cand
        return t_new

    def solve(idx):
        # per axis: first- or second-order upwind value from accepted voxels
        first = []
        mixed = []
        t1_max = -np.inf
        for axis in range(3):
            best = None
            for d in (-1, 1):
                q1 = list(idx)
                q1[axis] += d
                if not 0 <= q1[axis] < dims[axis]:
                    continue
                q1 = tuple(q1)
                if state[q1] != 2:
                    continue
                t1 = t[q1]
                q2 = list(idx)
                q2[axis] += 2 * d
                use2 = False
                if 0 <= q2[axis] < dims[axis]:
                    q2 = tuple(q2)
                    if state[q2] == 2 and t[q2] <= t1:
                        use2 = True
                        t2 = t[q2]
                if use2:
                    av = (2.25 / h[axis] ** 2, (4.0 * t1 - t2) / 3.0)  # (3/(2h))^2
                else:
                    av = (1.0 / h[axis] ** 2, t1)
                if best is None or av[1] < best[1]:
                    best = (av, t1)
            if best is not None:
                mixed.append(best[0])
                first.append((1.0 / h[axis] ** 2, best[1]))
                t1_max = max(t1_max, best[1])
        if not mixed:
            return np.inf
        inv_f2 = 1.0 / (f[idx] * f[idx])
        mixed.sort(key=lambda av: av[1])
        t_new = quad_solve(mixed, inv_f2)
        if t_new < t1_max - 1e-12:
            # second-order extrapolation broke causality (colliding fronts);
            # the first-order update is provably monotone
            first.sort(key=lambda av: av[1])
            t_new = quad_solve(first, inv_f2)
        return t_new

    while heap:
        tv, idx = heapq.heappop(heap)
        if state[idx] == 2:
            continue
        if tv < last - 1e-9:
            raise DataError("fast marching accepted a decreasing arrival time")
        last = tv
        state[idx] = 2
        order.append(np.ravel_multi_index(idx, dims))
        for d in offsets:
            q = (idx[0] + d[0], idx[1] + d[1], idx[2] + d[2])
            if not (0 <= q[0] < dims[0] and 0 <= q[1] < dims[1] and 0 <= q[2] < dims[2]):
                continue
            if state[q] == 2 or f[q] <= 0:
                continue
            t_new = solve(q)
            if t_new < t[q]:
                t[q] = t_new
                heapq.heappush(heap, (t_new, q))
                state[q] = 1
    return ArrivalField(t=Volume3D(t, speed.spacing, speed.origin),
                        accepted_order=np.asarray(order, dtype=np.int64),
                        sources=src)


def backtrack(arrival: ArrivalField, start_mm, step: float | None = None,
              max_steps: int | None = None) -> np.ndarray:
    """Sub-voxel path from start down the arrival-time gradient to a source.

    Heun integration with step 0.5 * min spacing; stops within one voxel of a
    source point. Stagnation raises BacktrackStagnation carrying the partial
    path.
    """
    tvol = arrival.t
    spacing = np.asarray(tvol.spacing)
    if step is None:
        step = 0.5 * float(spacing.min())
    finite = np.isfinite(tvol.data)
    if not finite.any():
        raise DataError("arrival field has no finite values")
    big = float(tvol.data[finite].max()) * 2.0 + 1.0
    interp = Volume3D(np.where(finite, tvol.data, big), tvol.spacing, tvol.origin)

    src_mm = np.array([tvol.voxel_to_world(s) for s in arrival.sources])
    src_tree = cKDTree(src_mm)
    stop_dist = float(spacing.min())

    p = np.asarray(start_mm, dtype=np.float64)
    t0 = trilinear_sample(interp, p)
    if t0 >= big:
        raise DataError("backtrack start has no finite arrival time")
    if max_steps is None:
        max_steps = 50 * int(sum(tvol.dims))

    def grad_dir(q):
        eps = 0.25 * spacing
        g = np.zeros(3)
        for a in range(3):
            e = np.zeros(3)
            e[a] = eps[a]
            g[a] = (trilinear_sample(interp, q + e) - trilinear_sample(interp, q - e)) / (2 * eps[a])
        n = np.linalg.norm(g)
        return (g / n, n) if n > 0 else (g, 0.0)

    path = [p.copy()]
    best_t = t0
    stall = 0
    shrinks = 0
    for _ in range(max_steps):
        d, _ = src_tree.query(p)
        if d <= stop_dist:
            path.append(src_mm[src_tree.query(p)[1]].copy())
            return np.asarray(path)
        g1, n1 = grad_dir(p)
        if n1 < 1e-12:
            raise BacktrackStagnation("gradient vanished before reaching a source",
                                      path=np.asarray(path))
        mid = p - step * g1
        g2, n2 = grad_dir(mid)
        d_avg = g1 + (g2 if n2 > 0 else g1)
        norm = np.linalg.norm(d_avg)
        if norm < 1e-12:
            raise BacktrackStagnation("descent direction vanished",
                                      path=np.asarray(path))
        p = p - step * d_avg / norm
        path.append(p.copy())
        t_here = trilinear_sample(interp, p)
        if t_here < best_t - 1e-12:
            best_t = t_here
            stall = 0
        else:
            stall += 1
            if stall > 25:
                # orbiting a kink of the interpolated field: refine the step
                if shrinks < 3:
                    step *= 0.5
                    shrinks += 1
                    stall = 0
                else:
                    raise BacktrackStagnation("arrival time stopped decreasing",
                                              path=np.asarray(path))
    raise BacktrackStagnation("step budget exhausted before reaching a source",
                              path=np.asarray(path))


def _argmax_finite(t: np.ndarray) -> tuple[int, int, int]:
    masked = np.where(np.isfinite(t), t, -np.inf)
    return tuple(int(c) for c in np.unravel_index(int(np.argmax(masked)), t.shape))


def _snap_to_ridge(d: Volume3D, idx, radius_vox: int) -> tuple[int, int, int]:
    """Move a voxel to the highest-distance voxel in its neighbourhood.

    Ties prefer the voxel nearest the original position, so end-of-tube
    snapping does not retreat along the axis.
    """
    lo = [max(0, c - radius_vox) for c in idx]
    hi = [min(n, c + radius_vox + 1) for c, n in zip(idx, d.dims)]
    sub = d.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    gx, gy, gz = np.mgrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    dist = np.sqrt((gx - idx[0]) ** 2 + (gy - idx[1]) ** 2 + (gz - idx[2]) ** 2)
    score = sub - 1e-6 * min(d.spacing) * dist
    rel = np.unravel_index(int(np.argmax(score)), sub.shape)
    return (lo[0] + int(rel[0]), lo[1] + int(rel[1]), lo[2] + int(rel[2]))


def _path_radii(d: Volume3D, pts: np.ndarray) -> np.ndarray:
    r = trilinear_sample(d, pts)
    return np.maximum(np.atleast_1d(r), 0.25 * min(d.spacing))


def extract_centreline(mask: BinaryMask, n_branches: int = 4,
                       speed_exponent: float = 4.0,
                       branch_floor: float = 5.0) -> Centreline:
    """Sub-voxel centreline tree of a connected mask.

    The backtracking field uses the centred speed (D/Dmax)^p; endpoint and
    branch-tip selection use unit speed inside the mask so wall voxels cannot
    win on weighted cost. New branches start at the voxel with the largest
    unit-speed arrival time from the existing skeleton and stop once that
    time drops below branch_floor (mm).
    """
    labels, n = ndi.label(mask.data, structure=ndi.generate_binary_structure(3, 3))
    if n == 0:
        raise DataError("empty mask has no centreline")
    if n > 1:
        raise DataError(f"mask has {n} connected components; expected 1")

    # gate-carved pinholes are not topology; a solid lumen keeps the
    # medialness ridge intact
    solid = BinaryMask(ndi.binary_fill_holes(mask.data), mask.spacing, mask.origin)
    d = distance_field(solid)
    mask = solid
    dmax = float(d.data.max())
    speed_w = Volume3D((d.data / dmax) ** speed_exponent, mask.spacing, mask.origin)
    speed_u = Volume3D(mask.data.astype(np.float64), mask.spacing, mask.origin)
    snap_r = int(math.ceil(dmax / min(mask.spacing))) + 1

    start0 = tuple(int(c) for c in np.unravel_index(int(np.argmax(d.data)), d.dims))
    f1 = fast_march(speed_u, [start0])
    a = _snap_to_ridge(d, _argmax_finite(f1.t.data), snap_r)

    f2u = fast_march(speed_u, [a])
    b = _snap_to_ridge(d, _argmax_finite(f2u.t.data), snap_r)
    f2w = fast_march(speed_w, [a])
    main = backtrack(f2w, d.voxel_to_world(b))[::-1]  # root (source) -> tip
    branches = [Branch(points=main, radii=_path_radii(d, main))]

    while len(branches) < n_branches:
        skel_pts = np.vstack([br.points for br in branches])
        vox = np.unique(np.rint((skel_pts - np.asarray(mask.origin))
                                / np.asarray(mask.spacing)).astype(int), axis=0)
        vox = [tuple(v) for v in vox if mask.data[tuple(np.clip(v, 0, np.array(mask.dims) - 1))]]
        if not vox:
            break
        fu = fast_march(speed_u, vox)
        tip = _argmax_finite(fu.t.data)
        if not np.isfinite(fu.t.data[tip]) or fu.t.data[tip] < branch_floor:
            break
        tip = _snap_to_ridge(d, tip, snap_r)
        if fu.t.data[tip] < branch_floor:
            break
        fw = fast_march(speed_w, vox)
        path = backtrack(fw, fu.t.voxel_to_world(tip))[::-1]
        tree = cKDTree(skel_pts)
        _, att = tree.query(path[0])
        # map the flat skeleton index back to (branch, point)
        counts = np.cumsum([len(br.points) for br in branches])
        parent = int(np.searchsorted(counts, att, side="right"))
        att_idx = int(att - (counts[parent - 1] if parent > 0 else 0))
        branches.append(Branch(points=path, radii=_path_radii(d, path),
                               parent=parent, attachment_index=att_idx))
    return Centreline(branches=branches, spacing=mask.spacing)


# ---------------------------------------------------------------------------
# Rotation-minimizing frames and curved planar reformation
# ---------------------------------------------------------------------------

def rm_frames(points: np.ndarray, initial_u=None):
    """Per-point orthonormal frames (t, u, v) with minimal axial rotation.

    Tangents come from central differences; u propagates by the
    double-reflection method from a deterministic initial vector (or the
    supplied one, projected off the first tangent).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise DataError("need at least two points for frames")
    seg = np.diff(pts, axis=0)
    if (np.linalg.norm(seg, axis=1) < 1e-12).any():
        raise DataError("duplicate consecutive points")
    tangents = np.empty_like(pts)
    tangents[0] = seg[0]
    tangents[-1] = seg[-1]
    if len(pts) > 2:
        tangents[1:-1] = pts[2:] - pts[:-2]
    tangents /= np.linalg.norm(tangents, axis=1)[:, None]

    t0 = tangents[0]
    if initial_u is None:
        a = np.array([0.0, 0.0, 1.0])
        if abs(t0 @ a) > 0.9:
            a = np.array([1.0, 0.0, 0.0])
        u = np.cross(t0, a)
    else:
        u = np.asarray(initial_u, dtype=np.float64)
        u = u - (u @ t0) * t0
        if np.linalg.norm(u) < 1e-9:
            raise DataError("initial u is parallel to the first tangent")
    u = u / np.linalg.norm(u)

    frames = [(tangents[0], u, np.cross(tangents[0], u))]
    for i in range(len(pts) - 1):
        v1 = pts[i + 1] - pts[i]
        c1 = v1 @ v1
        u_l = u - (2.0 / c1) * (v1 @ u) * v1
        t_l = tangents[i] - (2.0 / c1) * (v1 @ tangents[i]) * v1
        v2 = tangents[i + 1] - t_l
        c2 = v2 @ v2
        u = u_l if c2 < 1e-15 else u_l - (2.0 / c2) * (v2 @ u_l) * v2
        u = u - (u @ tangents[i + 1]) * tangents[i + 1]
        u = u / np.linalg.norm(u)
        frames.append((tangents[i + 1], u, np.cross(tangents[i + 1], u)))
    return frames


def cpr_straighten(vol: Volume3D, branch: Branch, half_extent: float = 10.0,
                   spacing: float = 0.25, initial_u=None) -> StraightenedVolume:
    """Stack centreline-orthogonal cross-sections along arc length.

    One trilinearly sampled plane per centreline point; the default grid is
    81 x 81 samples (half extent 10 mm at 0.25 mm spacing).
    """
    frames = rm_frames(branch.points, initial_u)
    n = 2 * int(round(half_extent / spacing)) + 1
    offs = (np.arange(n) - (n - 1) / 2.0) * spacing
    uu, vv = np.meshgrid(offs, offs, indexing="ij")
    slabs = np.empty((n, n, len(frames)))
    out_frames = []
    for idx, (center, frame) in enumerate(zip(branch.points, frames)):
        _, u, v = frame
        pts = (center[None, None, :] + uu[..., None] * u[None, None, :]
               + vv[..., None] * v[None, None, :])
        slabs[:, :, idx] = trilinear_sample(vol, pts.reshape(-1, 3)).reshape(n, n)
        out_frames.append((np.asarray(center), u, v))
    seglen = np.linalg.norm(np.diff(branch.points, axis=0), axis=1)
    z_step = float(seglen.mean()) if seglen.size else spacing
    straight = Volume3D(slabs, (spacing, spacing, z_step), (0.0, 0.0, 0.0))
    return StraightenedVolume(volume=straight, frames=out_frames)


def arc_length(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


# ---------------------------------------------------------------------------
# Centreline CSV interchange
# ---------------------------------------------------------------------------

def save_centreline(c: Centreline, path) -> None:
    """CSV lines branch_id,point_index,x_mm,y_mm,z_mm,radius_mm, root to tip."""
    with open(os.fspath(path), "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["branch_id", "point_index", "x_mm", "y_mm", "z_mm", "radius_mm"])
        for bid, br in enumerate(c.branches):
            for pid, (pt, r) in enumerate(zip(br.points, br.radii)):
                writer.writerow([bid, pid, repr(float(pt[0])), repr(float(pt[1])),
                                 repr(float(pt[2])), repr(float(r))])


def load_centreline(path, spacing=(1.0, 1.0, 1.0)) -> Centreline:
    rows: dict[int, list[tuple[int, np.ndarray, float]]] = {}
    with open(os.fspath(path), newline="", encoding="ascii") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "branch_id" not in reader.fieldnames:
            raise DataError(f"not a centreline CSV: {path}")
        for row in reader:
            bid = int(row["branch_id"])
            rows.setdefault(bid, []).append((
                int(row["point_index"]),
                np.array([float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"])]),
                float(row["radius_mm"])))
    branches = []
    for bid in sorted(rows):
        entries = sorted(rows[bid])
        pts = np.vstack([e[1] for e in entries])
        radii = np.array([e[2] for e in entries])
        branches.append(Branch(points=pts, radii=radii))
    if not branches:
        raise DataError(f"centreline CSV is empty: {path}")
    return Centreline(branches=branches, spacing=tuple(spacing))
