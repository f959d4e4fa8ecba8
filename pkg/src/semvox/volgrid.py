"""Volumetric grid geometry, Gaussian-sphere target synthesis, and volume file I/O.

Volumes live on a rectilinear grid in MNI-ish world millimeters. The linear
(flat) voxel order is x-fastest throughout: linear index = x + nx*(y + ny*z).
File payloads, top-k tie-breaking, and NIfTI export all use this order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# FWHM = 2*sqrt(2*ln 2) * sigma for a Gaussian kernel.
FWHM_TO_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

DEFAULT_DIMS = (40, 48, 40)
DEFAULT_VOXEL_SIZE_MM = (4.0, 4.0, 4.0)
# World coordinate of the center of voxel (0,0,0); encloses the MNI152 brain
# bounding box at the default 40x48x40 / 4mm geometry.
DEFAULT_ORIGIN_MM = (-78.0, -110.0, -72.0)

NATIVE_MAGIC = b"C2BVOL01"
NATIVE_HEADER = struct.Struct("<3I6d")  # dims u32[3], voxel_size f64[3], origin f64[3]

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"
NIFTI_DTYPE_FLOAT32 = 16
NIFTI_VOX_OFFSET = 352.0  # header + 4-byte extender
NIFTI_XFORM_MNI152 = 4


class VolumeFormatError(ValueError):
    """A volume file or byte stream violates the expected format."""


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a dense voxel grid: shape, spacing, and world placement."""

    dims: tuple[int, int, int] = DEFAULT_DIMS
    voxel_size_mm: tuple[float, float, float] = DEFAULT_VOXEL_SIZE_MM
    origin_mm: tuple[float, float, float] = DEFAULT_ORIGIN_MM

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size_mm", tuple(float(v) for v in self.voxel_size_mm))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))
        if len(self.dims) != 3 or len(self.voxel_size_mm) != 3 or len(self.origin_mm) != 3:
            raise ValueError("GridSpec fields must have exactly three components")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"grid dims must all be >= 1, got {self.dims}")
        if any(not math.isfinite(v) or v <= 0 for v in self.voxel_size_mm):
            raise ValueError(f"voxel sizes must be finite and > 0, got {self.voxel_size_mm}")
        if any(not math.isfinite(o) for o in self.origin_mm):
            raise ValueError(f"origin must be finite, got {self.origin_mm}")

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def world_to_voxel(self, coord_mm) -> tuple[float, float, float]:
        """Map a world-space point to continuous voxel coordinates.

        No rounding and no clipping; out-of-grid points map to out-of-range
        voxel coordinates.
        """
        c = tuple(float(v) for v in coord_mm)
        if len(c) != 3 or any(not math.isfinite(v) for v in c):
            raise ValueError(f"coordinate must be three finite values, got {coord_mm!r}")
        return tuple(
            (c[i] - self.origin_mm[i]) / self.voxel_size_mm[i] for i in range(3)
        )

    def axis_centers(self, axis: int) -> np.ndarray:
        """World coordinates of voxel centers along one axis (float64)."""
        return self.origin_mm[axis] + self.voxel_size_mm[axis] * np.arange(
            self.dims[axis], dtype=np.float64
        )


def world_to_voxel(grid: GridSpec, coord_mm) -> tuple[float, float, float]:
    return grid.world_to_voxel(coord_mm)


@dataclass
class BrainVolume:
    """A dense float32 activation volume with its grid geometry.

    ``data`` is indexed ``data[x, y, z]`` with shape ``grid.dims``.
    """

    grid: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != self.grid.dims:
            raise ValueError(
                f"data shape {self.data.shape} does not match grid dims {self.grid.dims}"
            )

    @classmethod
    def zeros(cls, grid: GridSpec) -> "BrainVolume":
        return cls(grid=grid, data=np.zeros(grid.dims, dtype=np.float32))

    def linear_values(self) -> np.ndarray:
        """Voxel values in canonical x-fastest linear order."""
        return self.data.ravel(order="F")

    def __eq__(self, other) -> bool:
        if not isinstance(other, BrainVolume):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.data, other.data)


def gaussian_kernel_value(distance_mm: float, fwhm_mm: float) -> float:
    """Unnormalized Gaussian kernel (peak 1) at a given Euclidean distance.

    At distance fwhm/2 the value is exactly 0.5 by definition of FWHM.
    """
    if not (math.isfinite(fwhm_mm) and fwhm_mm > 0):
        raise ValueError(f"fwhm_mm must be finite and > 0, got {fwhm_mm}")
    sigma = fwhm_mm / FWHM_TO_SIGMA
    return math.exp(-(distance_mm * distance_mm) / (2.0 * sigma * sigma))


def synthesize_target(grid: GridSpec, coords, fwhm_mm: float = 9.0) -> BrainVolume:
    """Place a Gaussian sphere at each peak coordinate and sum the spheres.

    The summed map is rescaled so its maximum is exactly 1.0 (all zeros for an
    empty coordinate list). Coordinates outside the grid are legal and
    contribute their tails; nothing is clipped. Accumulation is float64, the
    result is cast to float32.
    """
    if not (math.isfinite(fwhm_mm) and fwhm_mm > 0):
        raise ValueError(f"fwhm_mm must be finite and > 0, got {fwhm_mm}")
    sigma = fwhm_mm / FWHM_TO_SIGMA
    inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma)

    raw = np.zeros(grid.dims, dtype=np.float64)
    axes = [grid.axis_centers(a) for a in range(3)]
    for coord in coords:
        c = tuple(float(v) for v in coord)
        if len(c) != 3 or any(not math.isfinite(v) for v in c):
            raise ValueError(f"coordinate must be three finite values, got {coord!r}")
        # The isotropic Gaussian factorizes per axis; accumulate the outer product.
        ex = np.exp(-((axes[0] - c[0]) ** 2) * inv_two_sigma_sq)
        ey = np.exp(-((axes[1] - c[1]) ** 2) * inv_two_sigma_sq)
        ez = np.exp(-((axes[2] - c[2]) ** 2) * inv_two_sigma_sq)
        raw += ex[:, None, None] * ey[None, :, None] * ez[None, None, :]

    peak = raw.max() if raw.size else 0.0
    if peak > 0.0:
        raw /= peak
    return BrainVolume(grid=grid, data=raw.astype(np.float32))


# ---------------------------------------------------------------------------
# Native ".c2bvol" format: 16-byte magic (8 ASCII + 8 zero pad), three u32
# dims, six f64 (voxel size, origin), float32 little-endian payload in
# x-fastest order. Chosen for bit-exact roundtrips.
# ---------------------------------------------------------------------------

def volume_to_bytes(volume: BrainVolume) -> bytes:
    grid = volume.grid
    header = NATIVE_MAGIC + b"\x00" * 8
    header += NATIVE_HEADER.pack(*grid.dims, *grid.voxel_size_mm, *grid.origin_mm)
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes(order="F")
    return header + payload


def volume_from_bytes(blob: bytes) -> BrainVolume:
    if len(blob) < 16:
        raise VolumeFormatError("truncated stream: shorter than the 16-byte magic")
    magic = blob[:8]
    if magic != NATIVE_MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}, expected {NATIVE_MAGIC!r}")
    off = 16
    if len(blob) < off + NATIVE_HEADER.size:
        raise VolumeFormatError("truncated stream: incomplete geometry header")
    fields = NATIVE_HEADER.unpack_from(blob, off)
    dims = fields[0:3]
    voxel_size = fields[3:6]
    origin = fields[6:9]
    try:
        grid = GridSpec(dims=dims, voxel_size_mm=voxel_size, origin_mm=origin)
    except ValueError as exc:
        raise VolumeFormatError(f"invalid geometry header: {exc}") from exc
    off += NATIVE_HEADER.size
    expected = grid.n_voxels * 4
    payload = blob[off:]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    data = flat.reshape(grid.dims, order="F").copy()
    return BrainVolume(grid=grid, data=data)


def save_volume(volume: BrainVolume, path) -> None:
    Path(path).write_bytes(volume_to_bytes(volume))


def load_volume(path) -> BrainVolume:
    return volume_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# NIfTI-1 subset: single-file .nii, float32, 3-D, little-endian. Export writes
# the standard 348-byte header plus the 4-byte extender so data begins at
# offset 352; import accepts exactly this subset.
# ---------------------------------------------------------------------------

def export_nifti(volume: BrainVolume) -> bytes:
    grid = volume.grid
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)          # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, *grid.dims, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", hdr, 70, NIFTI_DTYPE_FLOAT32)       # datatype
    struct.pack_into("<h", hdr, 72, 32)                        # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *grid.voxel_size_mm, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, NIFTI_VOX_OFFSET)         # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)                      # scl_slope
    desc = b"semvox export"
    struct.pack_into("<80s", hdr, 148, desc)                   # descrip
    struct.pack_into("<h", hdr, 252, 0)                        # qform_code
    struct.pack_into("<h", hdr, 254, NIFTI_XFORM_MNI152)       # sform_code
    vx, vy, vz = grid.voxel_size_mm
    ox, oy, oz = grid.origin_mm
    struct.pack_into("<4f", hdr, 280, vx, 0.0, 0.0, ox)        # srow_x
    struct.pack_into("<4f", hdr, 296, 0.0, vy, 0.0, oy)        # srow_y
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, vz, oz)        # srow_z
    struct.pack_into("<4s", hdr, 344, NIFTI_MAGIC)             # magic
    extender = b"\x00\x00\x00\x00"
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes(order="F")
    return bytes(hdr) + extender + payload


def import_nifti(blob: bytes) -> BrainVolume:
    if len(blob) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError("truncated stream: shorter than the 348-byte header")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"bad sizeof_hdr {sizeof_hdr}, expected {NIFTI_HEADER_SIZE}")
    magic = struct.unpack_from("<4s", blob, 344)[0]
    if magic != NIFTI_MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}, expected {NIFTI_MAGIC!r}")
    (datatype,) = struct.unpack_from("<h", blob, 70)
    if datatype != NIFTI_DTYPE_FLOAT32:
        raise VolumeFormatError(f"unsupported datatype {datatype}, expected {NIFTI_DTYPE_FLOAT32}")
    dim = struct.unpack_from("<8h", blob, 40)
    if dim[0] != 3:
        raise VolumeFormatError(f"unsupported dim[0]={dim[0]}, expected 3")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise VolumeFormatError(f"invalid dim {dims}")
    pixdim = struct.unpack_from("<8f", blob, 76)
    voxel_size = tuple(float(p) for p in pixdim[1:4])
    if any(not math.isfinite(v) or v <= 0 for v in voxel_size):
        raise VolumeFormatError(f"invalid pixdim {voxel_size}")
    (vox_offset,) = struct.unpack_from("<f", blob, 108)
    offset = int(vox_offset)
    if not math.isfinite(vox_offset) or offset < NIFTI_HEADER_SIZE or offset > len(blob):
        raise VolumeFormatError(f"invalid vox_offset {vox_offset}")
    (sform_code,) = struct.unpack_from("<h", blob, 254)
    if sform_code > 0:
        srow_x = struct.unpack_from("<4f", blob, 280)
        srow_y = struct.unpack_from("<4f", blob, 296)
        srow_z = struct.unpack_from("<4f", blob, 312)
        origin = (float(srow_x[3]), float(srow_y[3]), float(srow_z[3]))
    else:
        origin = (0.0, 0.0, 0.0)
    grid = GridSpec(dims=dims, voxel_size_mm=voxel_size, origin_mm=origin)
    expected = grid.n_voxels * 4
    payload = blob[offset:]
    if len(payload) < expected:
        raise VolumeFormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(payload)}"
        )
    flat = np.frombuffer(payload[:expected], dtype="<f4")
    data = flat.reshape(grid.dims, order="F").copy()
    return BrainVolume(grid=grid, data=data)


def save_nifti(volume: BrainVolume, path) -> None:
    Path(path).write_bytes(export_nifti(volume))


def load_nifti(path) -> BrainVolume:
    return import_nifti(Path(path).read_bytes())
