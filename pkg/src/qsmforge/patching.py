"""Patch geometry, the training-patch sampler, and the inference tiler.

Conventions
-----------
* A patch of size ``n`` around center ``c`` covers ``[c - n // 2, c - n // 2 + n)``
  on every axis. With ``input_size - output_size`` even, input and output
  patches around the same center are concentric and the output patch is the
  input patch shrunk by ``margin`` on each face.
* Candidate centers sit on the grid ``0, gap, 2 * gap, ...`` of every axis.
  A center is *interior* when its whole input patch lies inside the volume;
  the sampler also uses non-interior centers and zero-pads the overrun.
* Tiles: output windows start at ``0, out, 2 * out, ...``. When the last
  window would overrun the volume, the network window is clamped to end at
  the volume edge and only the not-yet-covered voxels of its output are kept,
  so output windows always partition the volume.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .volume import Quantity, Volume

__all__ = [
    "PatchGeometry",
    "SamplerConfig",
    "Tile",
    "StitchError",
    "candidate_centers",
    "split_centers",
    "draw_center",
    "extract_window",
    "extract_patch",
    "sample_training_patches",
    "tile_plan",
    "plan_to_json",
    "cut_tiles",
    "stitch",
    "tile_boundary_mask",
]


@dataclass(frozen=True)
class PatchGeometry:
    input_size: int
    output_size: int
    depth: int = 2

    def __post_init__(self):
        if self.output_size < 1 or self.input_size < self.output_size:
            raise ValueError(f"need input_size >= output_size >= 1, got {self.input_size}->{self.output_size}")
        if (self.input_size - self.output_size) % 2:
            raise ValueError("input_size - output_size must be even")
        step = 2 ** self.depth
        if self.input_size % step or self.output_size % step:
            raise ValueError(f"patch sizes must be divisible by 2**depth = {step}")

    @property
    def margin(self) -> int:
        return (self.input_size - self.output_size) // 2

    def label(self) -> str:
        return f"{self.input_size}->{self.output_size}"


@dataclass(frozen=True)
class SamplerConfig:
    grid_gap: int = 8
    brain_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.grid_gap < 1:
            raise ValueError("grid_gap must be >= 1")
        if not 0.0 <= self.brain_fraction <= 1.0:
            raise ValueError("brain_fraction must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


def candidate_centers(dims: Sequence[int], grid_gap: int, input_size: Optional[int] = None,
                      interior_only: bool = False) -> np.ndarray:
    """Centers on the gap grid, shape ``(n, 3)``, in lexicographic order."""
    axes = []
    for n in dims:
        c = np.arange(0, n, grid_gap)
        if interior_only:
            if input_size is None:
                raise ValueError("interior_only needs input_size")
            lo = c - input_size // 2
            c = c[(lo >= 0) & (lo + input_size <= n)]
        axes.append(c)
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def split_centers(centers: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(brain, background) centers, decided by the mask at the center voxel."""
    inside = mask[centers[:, 0], centers[:, 1], centers[:, 2]] == 1.0
    return centers[inside], centers[~inside]


def draw_center(brain: np.ndarray, background: np.ndarray, brain_fraction: float,
                rng: np.random.Generator) -> np.ndarray:
    """One Bernoulli(brain_fraction) pick of pool, then a uniform center from it.

    Falls back to the other pool when the chosen one is empty.
    """
    use_brain = rng.random() < brain_fraction
    pool = brain if use_brain else background
    if len(pool) == 0:
        pool = background if use_brain else brain
    if len(pool) == 0:
        raise ValueError("no candidate centers")
    return pool[int(rng.integers(len(pool)))]


def extract_window(array: np.ndarray, start: Sequence[int], size: Sequence[int]) -> np.ndarray:
    """``array[start:start+size]`` per axis, zero-filled where it leaves the array."""
    out = np.zeros(tuple(size), dtype=array.dtype)
    src, dst = [], []
    for s, n, length in zip(start, size, array.shape):
        lo, hi = max(s, 0), min(s + n, length)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[tuple(dst)] = array[tuple(src)]
    return out


def extract_patch(array: np.ndarray, center: Sequence[int], size: int) -> np.ndarray:
    return extract_window(array, [int(c) - size // 2 for c in center], (size, size, size))


def sample_training_patches(field: Volume, chi: Volume, mask: Volume, geom: PatchGeometry,
                            cfg: SamplerConfig, n: Optional[int] = None) -> Iterator[tuple]:
    """Seeded stream of ``(input_patch, target_patch, center)``.

    Input patches come from ``field``, targets are the concentric
    ``output_size`` cubes of ``chi``. ``n=None`` streams forever.
    """
    dims = field.dims
    if chi.dims != dims or mask.dims != dims:
        raise ValueError("field, chi and mask must share dims")
    if min(dims) < geom.input_size:
        raise ValueError(f"volume {dims} is smaller than the {geom.input_size}^3 input patch")
    brain, background = split_centers(candidate_centers(dims, cfg.grid_gap), mask.data)
    rng = np.random.default_rng(cfg.seed)
    emitted = 0
    while n is None or emitted < n:
        c = draw_center(brain, background, cfg.brain_fraction, rng)
        yield (extract_patch(field.data, c, geom.input_size),
               extract_patch(chi.data, c, geom.output_size),
               tuple(int(v) for v in c))
        emitted += 1


@dataclass(frozen=True)
class Tile:
    """One inference tile.

    ``net_start`` is where the network output cube (``output_size`` wide)
    lands in volume coordinates; ``input_start = net_start - margin``.
    ``output_window`` is the part of that cube the tile owns and
    ``crop_offset`` its offset inside the network output.
    """

    net_start: Tuple[int, int, int]
    input_start: Tuple[int, int, int]
    input_window: Tuple[Tuple[int, int], ...]
    pad: Tuple[Tuple[int, int], ...]
    output_window: Tuple[Tuple[int, int], ...]
    crop_offset: Tuple[int, int, int]

    @property
    def output_slices(self):
        return tuple(slice(a, b) for a, b in self.output_window)

    def to_dict(self):
        return asdict(self)


def _axis_plan(n: int, geom: PatchGeometry):
    out, m = geom.output_size, geom.margin
    entries = []
    for s in range(0, n, out):
        end = min(s + out, n)
        net = min(s, max(0, n - out))
        lo, hi = net - m, net + out + m
        entries.append(dict(net=net, inp=lo, window=(max(lo, 0), min(hi, n)),
                            pad=(max(0, -lo), max(0, hi - n)), out=(s, end), crop=s - net))
    return entries


def tile_plan(dims: Sequence[int], geom: PatchGeometry) -> List[Tile]:
    per_axis = [_axis_plan(int(n), geom) for n in dims]
    tiles = []
    for ex in per_axis[0]:
        for ey in per_axis[1]:
            for ez in per_axis[2]:
                es = (ex, ey, ez)
                tiles.append(Tile(
                    net_start=tuple(e["net"] for e in es),
                    input_start=tuple(e["inp"] for e in es),
                    input_window=tuple(e["window"] for e in es),
                    pad=tuple(e["pad"] for e in es),
                    output_window=tuple(e["out"] for e in es),
                    crop_offset=tuple(e["crop"] for e in es),
                ))
    return tiles


def plan_to_json(tiles: Sequence[Tile], geom: PatchGeometry, dims) -> str:
    doc = {"dims": list(dims), "geometry": asdict(geom), "margin": geom.margin,
           "tiles": [t.to_dict() for t in tiles]}
    return json.dumps(doc, indent=1)


def cut_tiles(array: np.ndarray, tiles: Sequence[Tile]):
    """``(output_window, values)`` pairs cut from ``array``; inverse of :func:`stitch`."""
    return [(t.output_window, np.array(array[t.output_slices])) for t in tiles]


class StitchError(ValueError):
    pass


def stitch(tiles, dims, voxel_size_mm=(1.0, 1.0, 1.0), quantity=Quantity.ARBITRARY) -> Volume:
    """Assemble ``(output_window, values)`` pairs; windows must partition the volume."""
    dims = tuple(int(n) for n in dims)
    out = np.zeros(dims)
    hits = np.zeros(dims, dtype=np.int32)
    for window, values in tiles:
        sl = tuple(slice(a, b) for a, b in window)
        values = np.asarray(values)
        expected = tuple(b - a for a, b in window)
        if values.shape != expected:
            raise StitchError(f"patch of shape {values.shape} does not fit window {window}")
        if any(a < 0 or b > n for (a, b), n in zip(window, dims)):
            raise StitchError(f"window {window} leaves the volume {dims}")
        out[sl] = values
        hits[sl] += 1
    if np.any(hits > 1):
        raise StitchError(f"{int(np.count_nonzero(hits > 1))} voxel(s) covered by overlapping tiles")
    if np.any(hits == 0):
        raise StitchError(f"{int(np.count_nonzero(hits == 0))} voxel(s) not covered by any tile")
    return Volume(out, voxel_size_mm, quantity)


def tile_boundary_mask(dims: Sequence[int], geom: PatchGeometry) -> np.ndarray:
    """Voxels on a face of their output tile (first or last index along any axis)."""
    marks = []
    for n in dims:
        edge = np.zeros(int(n), dtype=bool)
        for e in _axis_plan(int(n), geom):
            a, b = e["out"]
            edge[a] = edge[b - 1] = True
        marks.append(edge)
    return marks[0][:, None, None] | marks[1][None, :, None] | marks[2][None, None, :]
