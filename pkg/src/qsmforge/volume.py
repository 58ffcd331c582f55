"""Volume containers, spectral transforms and the ``.qvol`` file format.

Layout convention
-----------------
Arrays are indexed ``data[x, y, z]``. Whenever a volume is flattened (the
``.qvol`` payload, :func:`flat_index`) x varies fastest, i.e. the flat index
of voxel ``(x, y, z)`` is ``x + nx * (y + ny * z)``.

FFT convention
--------------
:func:`fft_forward` is unnormalized (``numpy.fft.fftn``), :func:`fft_inverse`
carries the ``1/N`` factor. Hence the DC bin of a constant volume ``c`` is
``c * N`` and Parseval reads ``sum |S|^2 == N * sum v^2``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

__all__ = [
    "Quantity",
    "Volume",
    "Spectrum",
    "Orientation",
    "NonPhysicalSpectrumError",
    "QvolFormatError",
    "fft_forward",
    "fft_inverse",
    "frequency_coords",
    "flat_index",
    "write_qvol",
    "read_qvol",
]

Dims = Tuple[int, int, int]
VoxelSize = Tuple[float, float, float]

IMAG_RESIDUE_LIMIT = 1e-6


class Quantity(str, enum.Enum):
    SUSCEPTIBILITY_PPM = "SusceptibilityPpm"
    PHASE_RADIANS = "PhaseRadians"
    FIELD_SHIFT_PPM = "FieldShiftPpm"
    MASK = "Mask"
    ARBITRARY = "Arbitrary"


class NonPhysicalSpectrumError(ValueError):
    """Inverse transform left an imaginary part that is not round-off."""


class QvolFormatError(ValueError):
    pass


def _as_triplet(values, kind, cast):
    out = tuple(cast(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{kind} must have 3 entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar field with voxel size and unit metadata."""

    data: np.ndarray
    voxel_size_mm: VoxelSize = (1.0, 1.0, 1.0)
    quantity: Quantity = Quantity.ARBITRARY

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        vs = _as_triplet(self.voxel_size_mm, "voxel_size_mm", float)
        if min(vs) <= 0:
            raise ValueError(f"voxel sizes must be positive, got {vs}")
        quantity = Quantity(self.quantity)
        if quantity is Quantity.MASK and not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError("mask volumes may only contain 0.0 and 1.0")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size_mm", vs)
        object.__setattr__(self, "quantity", quantity)

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)

    @property
    def n_voxels(self) -> int:
        return int(self.data.size)

    def like(self, data, quantity=None) -> "Volume":
        """New volume on the same grid."""
        return Volume(data, self.voxel_size_mm, self.quantity if quantity is None else quantity)

    def flat(self) -> np.ndarray:
        """Data flattened with x fastest."""
        return self.data.ravel(order="F")


@dataclass(frozen=True)
class Spectrum:
    """Frequency-domain counterpart of a :class:`Volume`; DC at index (0, 0, 0)."""

    data: np.ndarray
    voxel_size_mm: VoxelSize = (1.0, 1.0, 1.0)
    quantity: Quantity = Quantity.ARBITRARY

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.complex128, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"spectrum data must be 3D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size_mm", _as_triplet(self.voxel_size_mm, "voxel_size_mm", float))
        object.__setattr__(self, "quantity", Quantity(self.quantity))

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)


@dataclass(frozen=True)
class Orientation:
    """Unit B0 direction expressed in the volume's (x, y, z) frame."""

    b0_direction: Tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        b = _as_triplet(self.b0_direction, "b0_direction", float)
        norm = float(np.sqrt(sum(c * c for c in b)))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"B0 direction must be a unit vector, got norm {norm!r}")
        object.__setattr__(self, "b0_direction", b)

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "Orientation":
        """Normalize an arbitrary nonzero vector."""
        v = np.asarray(v, dtype=np.float64)
        n = np.linalg.norm(v)
        if v.shape != (3,) or n == 0:
            raise ValueError("orientation needs a nonzero 3-vector")
        return cls(tuple(v / n))

    @classmethod
    def tilted(cls, degrees: float, toward: str = "x") -> "Orientation":
        """z axis rotated by ``degrees`` toward the +x or +y axis (``-x``/``-y`` allowed)."""
        sign = -1.0 if toward.startswith("-") else 1.0
        axis = toward.lstrip("+-")
        if axis not in ("x", "y"):
            raise ValueError(f"tilt axis must be x or y, got {toward!r}")
        a = np.deg2rad(degrees)
        s, c = sign * np.sin(a), np.cos(a)
        return cls.from_vector((s, 0.0, c) if axis == "x" else (0.0, s, c))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.b0_direction)


def fft_forward(v: Volume) -> Spectrum:
    return Spectrum(np.fft.fftn(v.data), v.voxel_size_mm, v.quantity)


def fft_inverse(s: Spectrum, quantity: Union[Quantity, str, None] = None) -> Volume:
    """Inverse FFT, discarding the imaginary round-off.

    Raises
    ------
    NonPhysicalSpectrumError
        If the discarded imaginary part exceeds ``1e-6`` relative to
        ``max(1, max|real|)``; the spectrum was then not conjugate-symmetric.
    """
    out = np.fft.ifftn(s.data)
    scale = max(1.0, float(np.abs(out.real).max(initial=0.0)))
    residue = float(np.abs(out.imag).max(initial=0.0))
    if residue > IMAG_RESIDUE_LIMIT * scale:
        raise NonPhysicalSpectrumError(
            f"imaginary residue {residue:.3e} after inverse FFT (limit {IMAG_RESIDUE_LIMIT * scale:.3e})"
        )
    return Volume(out.real, s.voxel_size_mm, s.quantity if quantity is None else quantity)


def frequency_coords(dims: Sequence[int], voxel_size_mm: Sequence[float] = (1.0, 1.0, 1.0)):
    """Per-axis spatial frequencies (cycles/mm) in FFT wraparound order."""
    if len(dims) != len(voxel_size_mm):
        raise ValueError("dims and voxel_size_mm must have the same length")
    grids = []
    for n, d in zip(dims, voxel_size_mm):
        if n < 1:
            raise ValueError(f"dims must be >= 1, got {n}")
        grids.append(np.fft.fftfreq(int(n), d=float(d)))
    return tuple(grids)


def flat_index(x: int, y: int, z: int, dims: Sequence[int]) -> int:
    nx, ny, _ = dims
    return int(x + nx * (y + ny * z))


def _header(vol: Volume) -> bytes:
    header = {
        "magic": "qvol1",
        "dims": list(vol.dims),
        "voxel_size_mm": list(vol.voxel_size_mm),
        "quantity": vol.quantity.value,
        "dtype": "f64le",
    }
    return (json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8")


def write_qvol(path, vol: Volume) -> Path:
    path = Path(path)
    payload = vol.data.astype("<f8").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(_header(vol))
        fh.write(payload)
    return path


def read_qvol(path) -> Volume:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise QvolFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise QvolFormatError(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != "qvol1":
        raise QvolFormatError(f"{path}: bad magic")
    if header.get("dtype") != "f64le":
        raise QvolFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    try:
        dims = _as_triplet(header["dims"], "dims", int)
        voxel = _as_triplet(header["voxel_size_mm"], "voxel_size_mm", float)
        quantity = Quantity(header["quantity"])
    except (KeyError, ValueError, TypeError) as exc:
        raise QvolFormatError(f"{path}: invalid header field ({exc})") from None
    count = dims[0] * dims[1] * dims[2]
    body = raw[nl + 1:]
    if len(body) != 8 * count:
        raise QvolFormatError(f"{path}: expected {8 * count} payload bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f8").reshape(dims, order="F")
    return Volume(data, voxel, quantity)
