"""Procedural susceptibility phantoms and the analytic sphere-field oracle.

Element geometry lives in voxel index space. Overlapping elements add their
susceptibility. ``PointSource`` marks a single voxel (a microbleed-like
source); its ``size_voxels`` is only checked for positivity.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .dipole import build_kernel, forward_field
from .volume import Orientation, Quantity, Volume

__all__ = [
    "Shape",
    "PhantomElement",
    "PhantomSpec",
    "PhantomSpecError",
    "Sample",
    "generate",
    "brain_mask",
    "analytic_sphere_field",
    "synth_dataset",
    "random_spec",
    "tissue_spec",
]

# Semi-axis scale giving an ellipsoid that fills half the box: (pi/6) s^3 = 1/2.
_HALF_VOLUME_SCALE = (3.0 / np.pi) ** (1.0 / 3.0)


class Shape(str, enum.Enum):
    SPHERE = "Sphere"
    CYLINDER = "Cylinder"
    GAUSSIAN_BLOB = "GaussianBlob"
    POINT_SOURCE = "PointSource"


class PhantomSpecError(ValueError):
    pass


@dataclass
class PhantomElement:
    shape: Shape
    center_voxel: tuple
    size_voxels: float
    delta_chi_ppm: float
    axis: str = "z"  # cylinders only
    length_voxels: Optional[float] = None  # cylinders only; default 4 * size


@dataclass
class PhantomSpec:
    dims: tuple
    voxel_size_mm: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    elements: List[PhantomElement] = field(default_factory=list)
    background_chi_ppm: float = 0.0

    def validate(self) -> "PhantomSpec":
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise PhantomSpecError(f"dims: expected three positive integers, got {self.dims!r}")
        if len(self.voxel_size_mm) != 3 or any(float(v) <= 0 for v in self.voxel_size_mm):
            raise PhantomSpecError(f"voxel_size_mm: expected three positive reals, got {self.voxel_size_mm!r}")
        if int(self.seed) < 0:
            raise PhantomSpecError("seed: must be unsigned")
        for i, el in enumerate(self.elements):
            where = f"elements[{i}]"
            if len(el.center_voxel) != 3:
                raise PhantomSpecError(f"{where}.center_voxel: expected 3 coordinates")
            if any(not (0 <= c <= n - 1) for c, n in zip(el.center_voxel, self.dims)):
                raise PhantomSpecError(f"{where}.center_voxel: {el.center_voxel!r} lies outside dims {tuple(self.dims)}")
            if not el.size_voxels > 0:
                raise PhantomSpecError(f"{where}.size_voxels: must be positive")
            if el.axis not in ("x", "y", "z"):
                raise PhantomSpecError(f"{where}.axis: must be one of x, y, z")
            if el.length_voxels is not None and not el.length_voxels > 0:
                raise PhantomSpecError(f"{where}.length_voxels: must be positive")
        return self

    # -- JSON ----------------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = [int(n) for n in self.dims]
        d["voxel_size_mm"] = [float(v) for v in self.voxel_size_mm]
        for el in d["elements"]:
            el["shape"] = Shape(el["shape"]).value
            el["center_voxel"] = [float(c) for c in el["center_voxel"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        if not isinstance(d, dict):
            raise PhantomSpecError("spec: expected a JSON object")
        known = {"dims", "voxel_size_mm", "seed", "elements", "background_chi_ppm"}
        for key in d:
            if key not in known:
                raise PhantomSpecError(f"{key}: unknown field")
        if "dims" not in d:
            raise PhantomSpecError("dims: required field missing")
        elements = []
        for i, raw in enumerate(d.get("elements", [])):
            where = f"elements[{i}]"
            if not isinstance(raw, dict):
                raise PhantomSpecError(f"{where}: expected an object")
            for req in ("shape", "center_voxel", "size_voxels", "delta_chi_ppm"):
                if req not in raw:
                    raise PhantomSpecError(f"{where}.{req}: required field missing")
            try:
                shape = Shape(raw["shape"])
            except ValueError:
                raise PhantomSpecError(f"{where}.shape: unknown shape {raw['shape']!r}") from None
            try:
                elements.append(PhantomElement(
                    shape=shape,
                    center_voxel=tuple(float(c) for c in raw["center_voxel"]),
                    size_voxels=float(raw["size_voxels"]),
                    delta_chi_ppm=float(raw["delta_chi_ppm"]),
                    axis=str(raw.get("axis", "z")),
                    length_voxels=None if raw.get("length_voxels") is None else float(raw["length_voxels"]),
                ))
            except (TypeError, ValueError) as exc:
                raise PhantomSpecError(f"{where}: malformed value ({exc})") from None
        try:
            spec = cls(
                dims=tuple(int(n) for n in d["dims"]),
                voxel_size_mm=tuple(float(v) for v in d.get("voxel_size_mm", (1.0, 1.0, 1.0))),
                seed=int(d.get("seed", 0)),
                elements=elements,
                background_chi_ppm=float(d.get("background_chi_ppm", 0.0)),
            )
        except (TypeError, ValueError) as exc:
            raise PhantomSpecError(f"spec: malformed value ({exc})") from None
        return spec.validate()

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise PhantomSpecError(f"spec: invalid JSON ({exc})") from None
        return cls.from_dict(d)


class Sample(NamedTuple):
    chi: Volume
    field: Volume
    mask: Volume


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def brain_mask(dims: Sequence[int]) -> np.ndarray:
    """Centered axis-aligned ellipsoid covering about half the field of view."""
    x, y, z = _grid(dims)
    r2 = 0.0
    for coord, n in zip((x, y, z), dims):
        c = (n - 1) / 2.0
        semi = _HALF_VOLUME_SCALE * n / 2.0
        r2 = r2 + ((coord - c) / semi) ** 2
    return (r2 <= 1.0).astype(np.float64)


def _render(el: PhantomElement, grid, dims) -> np.ndarray:
    x, y, z = grid
    cx, cy, cz = el.center_voxel
    if el.shape is Shape.SPHERE:
        inside = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= el.size_voxels ** 2
        return el.delta_chi_ppm * inside
    if el.shape is Shape.CYLINDER:
        coords = {"x": (x, cx), "y": (y, cy), "z": (z, cz)}
        along, c_along = coords[el.axis]
        radial = sum((g - c) ** 2 for k, (g, c) in coords.items() if k != el.axis)
        half = 0.5 * (el.length_voxels if el.length_voxels is not None else 4.0 * el.size_voxels)
        inside = (radial <= el.size_voxels ** 2) & (np.abs(along - c_along) <= half)
        return el.delta_chi_ppm * inside
    if el.shape is Shape.GAUSSIAN_BLOB:
        r2 = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2
        return el.delta_chi_ppm * np.exp(-r2 / (2.0 * el.size_voxels ** 2))
    if el.shape is Shape.POINT_SOURCE:
        out = np.zeros(dims)
        idx = tuple(int(np.clip(np.rint(c), 0, n - 1)) for c, n in zip(el.center_voxel, dims))
        out[idx] = el.delta_chi_ppm
        return out
    raise PhantomSpecError(f"unsupported shape {el.shape!r}")


def generate(spec: PhantomSpec):
    """Render ``spec`` into ``(chi, mask)`` volumes."""
    spec.validate()
    dims = tuple(int(n) for n in spec.dims)
    grid = _grid(dims)
    chi = np.full(dims, float(spec.background_chi_ppm))
    for el in spec.elements:
        chi = chi + _render(el, grid, dims)
    return (
        Volume(chi, spec.voxel_size_mm, Quantity.SUSCEPTIBILITY_PPM),
        Volume(brain_mask(dims), spec.voxel_size_mm, Quantity.MASK),
    )


def analytic_sphere_field(
    radius_voxels: float,
    delta_chi_ppm: float,
    center,
    dims,
    voxel_size_mm=(1.0, 1.0, 1.0),
    orientation: Orientation = Orientation(),
) -> Volume:
    """Lorentz-corrected field of a uniformly magnetized sphere in infinite space.

    Outside: ``(dchi/3) (a/r)^3 (3 cos^2(theta) - 1)``; inside: 0.
    Distances are physical; the radius is converted with the geometric-mean
    voxel size, which is exact for isotropic voxels.
    """
    if radius_voxels <= 0:
        raise ValueError("radius must be positive")
    vs = np.asarray(voxel_size_mm, dtype=np.float64)
    a = radius_voxels * float(np.prod(vs) ** (1.0 / 3.0))
    x, y, z = _grid(dims)
    rx = (x - center[0]) * vs[0]
    ry = (y - center[1]) * vs[1]
    rz = (z - center[2]) * vs[2]
    r = np.sqrt(rx * rx + ry * ry + rz * rz)
    b = orientation.vector
    outside = r > a
    safe_r = np.where(outside, r, 1.0)
    cos = (rx * b[0] + ry * b[1] + rz * b[2]) / safe_r
    field = (delta_chi_ppm / 3.0) * (a / safe_r) ** 3 * (3.0 * cos * cos - 1.0)
    return Volume(np.where(outside, field, 0.0), tuple(vs), Quantity.FIELD_SHIFT_PPM)


def _place(el: PhantomElement, dims, rng) -> PhantomElement:
    """Copy of ``el`` moved to a uniformly random point inside the brain ellipsoid."""
    centers = np.array([(n - 1) / 2.0 for n in dims])
    semis = np.array([_HALF_VOLUME_SCALE * n / 2.0 for n in dims])
    while True:
        u = rng.uniform(-1.0, 1.0, size=3)
        if u @ u <= 1.0:
            break
    pos = np.clip(centers + u * semis, 0, np.array(dims) - 1)
    return PhantomElement(el.shape, tuple(float(p) for p in pos), el.size_voxels,
                          el.delta_chi_ppm, el.axis, el.length_voxels)


def synth_dataset(
    n_subjects: int,
    spec_template: PhantomSpec,
    noise_std_ppm: float = 0.0,
    orientation: Orientation = Orientation(),
    seed: Optional[int] = None,
) -> List[Sample]:
    """Randomly re-place the template's elements for ``n_subjects`` phantoms.

    Each subject uses its own child seed of ``seed`` (default: the template
    seed). White Gaussian noise is added to the forward-modeled field.
    """
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    spec_template.validate()
    root = np.random.SeedSequence(spec_template.seed if seed is None else seed)
    kernel = build_kernel(spec_template.dims, spec_template.voxel_size_mm, orientation)
    out = []
    for child in root.spawn(n_subjects):
        rng = np.random.default_rng(child)
        spec = PhantomSpec(
            dims=spec_template.dims,
            voxel_size_mm=spec_template.voxel_size_mm,
            seed=spec_template.seed,
            elements=[_place(el, spec_template.dims, rng) for el in spec_template.elements],
            background_chi_ppm=spec_template.background_chi_ppm,
        )
        chi, mask = generate(spec)
        field = forward_field(chi, kernel)
        if noise_std_ppm > 0:
            field = field.like(field.data + rng.normal(0.0, noise_std_ppm, size=field.dims))
        out.append(Sample(chi, field, mask))
    return out


def random_spec(dims, rng: np.random.Generator, n_elements=(8, 16), voxel_size_mm=(1.0, 1.0, 1.0),
                seed: int = 0) -> PhantomSpec:
    """Template with a random mix of tissue-like elements of both signs.

    Sizes are kept small relative to ``dims`` so periodic images stay weak.
    """
    dims = tuple(int(n) for n in dims)
    lo, hi = n_elements
    count = int(rng.integers(lo, hi + 1))
    shapes = [Shape.SPHERE, Shape.SPHERE, Shape.CYLINDER, Shape.GAUSSIAN_BLOB, Shape.POINT_SOURCE]
    scale = min(dims) / 64.0
    elements = []
    for _ in range(count):
        shape = shapes[int(rng.integers(len(shapes)))]
        sign = 1.0 if rng.random() < 0.6 else -1.0
        if shape is Shape.SPHERE:
            size, dchi = rng.uniform(2.0, 7.0) * max(scale, 0.5), sign * rng.uniform(0.03, 0.15)
        elif shape is Shape.CYLINDER:
            size, dchi = rng.uniform(1.0, 2.5), rng.uniform(0.08, 0.25)
        elif shape is Shape.GAUSSIAN_BLOB:
            size, dchi = rng.uniform(2.0, 5.0) * max(scale, 0.5), sign * rng.uniform(0.05, 0.15)
        else:
            size, dchi = 1.0, rng.uniform(0.2, 0.4)
        center = tuple(float(n - 1) / 2.0 for n in dims)
        elements.append(PhantomElement(shape, center, float(size), float(dchi),
                                       axis="xyz"[int(rng.integers(3))],
                                       length_voxels=float(rng.uniform(6.0, 20.0) * max(scale, 0.5))
                                       if shape is Shape.CYLINDER else None))
    return PhantomSpec(dims, tuple(voxel_size_mm), seed, elements, 0.0)


def tissue_spec(dims, rng: np.random.Generator, fill: float = 1.0, radius_voxels=(1.5, 4.0),
                dchi_ppm=(0.01, 0.04), voxel_size_mm=(1.0, 1.0, 1.0), seed: int = 0) -> PhantomSpec:
    """Dense template: overlapping regions of both signs that tile most of the brain.

    ``fill`` is the summed element volume over the brain volume, so values
    above 1 make most mask voxels nonzero. A few vessels and point sources
    are added on top.
    """
    dims = tuple(int(n) for n in dims)
    brain = float(np.prod(dims)) / 2.0
    d = float(min(dims))
    center = tuple(float(n - 1) / 2.0 for n in dims)
    elements, total = [], 0.0
    while total < fill * brain:
        r = rng.uniform(*radius_voxels)
        dchi = rng.choice([-1.0, 1.0]) * rng.uniform(*dchi_ppm)
        shape = Shape.SPHERE if rng.random() < 0.7 else Shape.GAUSSIAN_BLOB
        elements.append(PhantomElement(shape, center, float(r), float(dchi)))
        total += 4.0 / 3.0 * np.pi * r ** 3
    for _ in range(max(1, int(d // 16))):
        elements.append(PhantomElement(Shape.CYLINDER, center, float(rng.uniform(1.0, 2.0)),
                                       float(rng.uniform(0.1, 0.2)), axis="xyz"[int(rng.integers(3))],
                                       length_voxels=float(rng.uniform(0.3, 0.6) * d)))
        elements.append(PhantomElement(Shape.POINT_SOURCE, center, 1.0, float(rng.uniform(0.2, 0.4))))
    return PhantomSpec(dims, tuple(voxel_size_mm), seed, elements, 0.0)
