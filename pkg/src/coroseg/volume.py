"""Volume and image containers, MetaImage I/O, interpolation and morphology.

Volumes are stored as float64 arrays of shape (nx, ny, nz) indexed [i, j, k];
voxel (i, j, k) sits at world position origin + (i*sx, j*sy, k*sz) mm.
On disk the raw payload is little-endian, x-fastest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .errors import DataError

ELEMENT_DTYPES = {
    "MET_SHORT": "<i2",
    "MET_UCHAR": "<u1",
    "MET_FLOAT": "<f4",
}


@dataclass
class Volume3D:
    """Regular 3D scalar grid with physical spacing (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    element_type: str = "MET_FLOAT"  # preferred on-disk representation

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DataError("volume data must be 3-dimensional")
        if min(self.data.shape) < 1:
            raise DataError("volume dims must all be >= 1")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if min(self.spacing) <= 0:
            raise DataError("voxel spacing must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_to_world(self, idx) -> np.ndarray:
        """World position (mm) of voxel index (i, j, k); accepts (..., 3) arrays."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_voxel(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def like(self, data: np.ndarray, element_type: str | None = None) -> "Volume3D":
        """New volume sharing this one's geometry."""
        return Volume3D(data, self.spacing, self.origin,
                        element_type or self.element_type)


@dataclass
class BinaryMask:
    """Boolean voxel grid with the same geometry conventions as Volume3D."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(bool)
        if self.data.ndim != 3:
            raise DataError("mask data must be 3-dimensional")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if min(self.spacing) <= 0:
            raise DataError("voxel spacing must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())

    def like(self, data: np.ndarray) -> "BinaryMask":
        return BinaryMask(data, self.spacing, self.origin)

    def same_geometry(self, other) -> bool:
        return (self.dims == other.dims and self.spacing == other.spacing
                and self.origin == other.origin)


@dataclass
class Image2D:
    """2D scalar image, optionally embedded in 3D via an orthonormal frame."""

    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    center: np.ndarray | None = None   # mm, world position of the image centre
    u_axis: np.ndarray | None = None   # unit vector along axis 0
    v_axis: np.ndarray | None = None   # unit vector along axis 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DataError("image data must be 2-dimensional")
        self.spacing = tuple(float(s) for s in self.spacing)
        if min(self.spacing) <= 0:
            raise DataError("pixel spacing must be positive")
        if self.u_axis is not None and self.v_axis is not None:
            u = np.asarray(self.u_axis, dtype=np.float64)
            v = np.asarray(self.v_axis, dtype=np.float64)
            if abs(np.linalg.norm(u) - 1.0) > 1e-9 or abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise DataError("frame axes must be unit length")
            if abs(float(u @ v)) > 1e-9:
                raise DataError("frame axes must be orthogonal")
            self.u_axis, self.v_axis = u, v
            self.center = np.asarray(self.center, dtype=np.float64)

    @property
    def dims(self) -> tuple[int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# MetaImage-style file I/O (text header + raw payload in a sibling file)
# ---------------------------------------------------------------------------

def load_volume(path) -> Volume3D:
    """Read a MetaImage-style header plus its raw file.

    Supported element types: MET_SHORT, MET_UCHAR, MET_FLOAT. The payload is
    widened to float64; the declared element type is kept on the volume so a
    later save round-trips integer data bit-exactly.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise DataError(f"header file not found: {path}")
    header = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()

    try:
        if int(header.get("NDims", "3")) != 3:
            raise DataError("only NDims = 3 volumes are supported")
        dims = tuple(int(v) for v in header["DimSize"].split())
        spacing = tuple(float(v) for v in header.get("ElementSpacing", "1 1 1").split())
        origin = tuple(float(v) for v in header.get("Offset", "0 0 0").split())
        element_type = header["ElementType"]
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed header {path}: {exc}") from exc
    if header.get("ElementByteOrderMSB", "False").lower() not in ("false", "0"):
        raise DataError("big-endian payloads are not supported")
    if element_type not in ELEMENT_DTYPES:
        raise DataError(f"unsupported element type: {element_type}")
    if len(dims) != 3 or min(dims) < 1:
        raise DataError(f"bad DimSize in {path}")

    datafile = header.get("ElementDataFile", "LOCAL")
    if datafile == "LOCAL":
        raise DataError("inline (LOCAL) payloads are not supported; "
                        "ElementDataFile must name a raw file")
    rawpath = os.path.join(os.path.dirname(path), datafile)
    if not os.path.isfile(rawpath):
        raise DataError(f"raw file not found: {rawpath}")

    raw = np.fromfile(rawpath, dtype=ELEMENT_DTYPES[element_type])
    n = dims[0] * dims[1] * dims[2]
    if raw.size != n:
        raise DataError(
            f"raw size mismatch: {rawpath} holds {raw.size} elements, "
            f"header declares {n}")
    # x-fastest on disk -> (nz, ny, nx) C-order -> transpose to (nx, ny, nz)
    data = raw.reshape(dims[2], dims[1], dims[0]).T.astype(np.float64)
    return Volume3D(data, spacing, origin, element_type)


def save_volume(vol, path) -> None:
    """Write a volume or mask as header + raw pair (<path> and <stem>.raw)."""
    path = os.fspath(path)
    if isinstance(vol, BinaryMask):
        element_type = "MET_UCHAR"
    else:
        element_type = vol.element_type
        if element_type not in ELEMENT_DTYPES:
            raise DataError(f"unsupported element type: {element_type}")
    # transpose restores x-fastest ordering for the flat payload
    payload = vol.data.T.astype(ELEMENT_DTYPES[element_type])
    spacing, origin = vol.spacing, vol.origin

    stem = os.path.splitext(os.path.basename(path))[0]
    rawname = stem + ".raw"
    dims = vol.dims
    lines = [
        "NDims = 3",
        "DimSize = {} {} {}".format(*dims),
        "ElementSpacing = {!r} {!r} {!r}".format(*spacing),
        "Offset = {!r} {!r} {!r}".format(*origin),
        f"ElementType = {element_type}",
        "ElementByteOrderMSB = False",
        f"ElementDataFile = {rawname}",
    ]
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
        payload.tofile(os.path.join(os.path.dirname(path), rawname))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Sampling and smoothing
# ---------------------------------------------------------------------------

def trilinear_sample(vol: Volume3D, points) -> np.ndarray:
    """Trilinear interpolation at world points (mm); accepts (..., 3) arrays.

    Points outside the bounding box clamp to the nearest boundary voxel, so
    the field is continuous everywhere and exact at voxel centres.
    """
    pts = np.asarray(points, dtype=np.float64)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    q = (pts - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    nx, ny, nz = vol.dims
    hi = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
    q = np.clip(q, 0.0, hi)
    i0 = np.minimum(np.floor(q).astype(np.intp), np.maximum(hi.astype(np.intp) - 1, 0))
    f = q - i0
    i1 = np.minimum(i0 + 1, hi.astype(np.intp))
    d = vol.data
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c00 = d[x0, y0, z0] * (1 - fx) + d[x1, y0, z0] * fx
    c01 = d[x0, y0, z1] * (1 - fx) + d[x1, y0, z1] * fx
    c10 = d[x0, y1, z0] * (1 - fx) + d[x1, y1, z0] * fx
    c11 = d[x0, y1, z1] * (1 - fx) + d[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    return float(out[0]) if scalar else out.reshape(np.asarray(points).shape[:-1])


def bilinear_sample(img: Image2D, points_mm) -> np.ndarray:
    """Bilinear interpolation on an Image2D at plane-local mm coordinates.

    Coordinates are measured from the image centre along (axis0, axis1);
    outside points clamp to the boundary pixel.
    """
    pts = np.asarray(points_mm, dtype=np.float64)
    scalar = pts.ndim == 1
    pts = np.atleast_2d(pts)
    nu, nv = img.dims
    su, sv = img.spacing
    q = np.empty_like(pts)
    q[:, 0] = pts[:, 0] / su + (nu - 1) / 2.0
    q[:, 1] = pts[:, 1] / sv + (nv - 1) / 2.0
    hi = np.array([nu - 1, nv - 1], dtype=np.float64)
    q = np.clip(q, 0.0, hi)
    i0 = np.minimum(np.floor(q).astype(np.intp), np.maximum(hi.astype(np.intp) - 1, 0))
    f = q - i0
    i1 = np.minimum(i0 + 1, hi.astype(np.intp))
    d = img.data
    u0, v0, u1, v1 = i0[:, 0], i0[:, 1], i1[:, 0], i1[:, 1]
    fu, fv = f[:, 0], f[:, 1]
    top = d[u0, v0] * (1 - fu) + d[u1, v0] * fu
    bot = d[u0, v1] * (1 - fu) + d[u1, v1] * fu
    out = top * (1 - fv) + bot * fv
    return float(out[0]) if scalar else out


def gaussian_smooth(vol: Volume3D, sigma: float) -> Volume3D:
    """Separable Gaussian smoothing with sigma in mm.

    Per-axis sigma is sigma/spacing voxels; the kernel is truncated at 4 sigma
    and renormalised to unit sum, so the DC level is preserved exactly.
    """
    if sigma < 0:
        raise DataError("sigma must be >= 0")
    if sigma == 0:
        return vol.like(vol.data.copy())
    vox_sigma = [sigma / s for s in vol.spacing]
    out = ndi.gaussian_filter(vol.data, sigma=vox_sigma, mode="nearest", truncate=4.0)
    return vol.like(out)


def extract_axial_slice(vol: Volume3D, k: int) -> Image2D:
    """Copy of the z = k plane with an axial embedding frame."""
    nx, ny, nz = vol.dims
    if not 0 <= k < nz:
        raise DataError(f"slice index {k} outside [0, {nz})")
    center = vol.voxel_to_world(((nx - 1) / 2.0, (ny - 1) / 2.0, float(k)))
    return Image2D(vol.data[:, :, k].copy(), (vol.spacing[0], vol.spacing[1]),
                   center=center, u_axis=np.array([1.0, 0.0, 0.0]),
                   v_axis=np.array([0.0, 1.0, 0.0]))


# ---------------------------------------------------------------------------
# Binary morphology
# ---------------------------------------------------------------------------

def connected_components(mask: BinaryMask, connectivity: int = 26):
    """Label a mask; returns (label array, sizes of labels 1..n).

    Labeling follows scipy's deterministic scan order; background is 0.
    """
    if connectivity == 6:
        structure = ndi.generate_binary_structure(3, 1)
    elif connectivity == 26:
        structure = ndi.generate_binary_structure(3, 3)
    else:
        raise DataError("connectivity must be 6 or 26")
    labels, n = ndi.label(mask.data, structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def _ball_structure(radius_mm: float, spacing) -> np.ndarray:
    rx = int(np.floor(radius_mm / spacing[0] + 1e-9))
    ry = int(np.floor(radius_mm / spacing[1] + 1e-9))
    rz = int(np.floor(radius_mm / spacing[2] + 1e-9))
    ox, oy, oz = np.mgrid[-rx:rx + 1, -ry:ry + 1, -rz:rz + 1]
    d2 = (ox * spacing[0]) ** 2 + (oy * spacing[1]) ** 2 + (oz * spacing[2]) ** 2
    return d2 <= radius_mm ** 2 + 1e-9


def dilate(mask: BinaryMask, radius_mm: float) -> BinaryMask:
    """Dilation by a spherical structuring element given in world units."""
    if radius_mm < 0:
        raise DataError("radius must be >= 0")
    if radius_mm == 0:
        return mask.like(mask.data.copy())
    se = _ball_structure(radius_mm, mask.spacing)
    return mask.like(ndi.binary_dilation(mask.data, structure=se))


def erode(mask: BinaryMask, radius_mm: float) -> BinaryMask:
    """Erosion by a spherical structuring element given in world units."""
    if radius_mm < 0:
        raise DataError("radius must be >= 0")
    if radius_mm == 0:
        return mask.like(mask.data.copy())
    se = _ball_structure(radius_mm, mask.spacing)
    return mask.like(ndi.binary_erosion(mask.data, structure=se, border_value=0))
