"""Value transforms between physical units and network units.

Network inputs are the field shift (ppm) times ``phase_scale``; network
targets are ``tanh(tanh_gain * chi)`` with chi in ppm. Every function accepts
either a :class:`~qsmforge.volume.Volume` or a bare array and returns the
same kind.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .volume import Quantity, Volume

__all__ = ["TransformConfig", "to_surrogate", "from_surrogate", "scale_phase", "unscale_phase"]

log = logging.getLogger(__name__)

CLAMP = 1.0 - 1e-7


@dataclass(frozen=True)
class TransformConfig:
    phase_scale: float = 100.0
    tanh_gain: float = 10.0

    def __post_init__(self):
        if not (self.phase_scale > 0 and self.tanh_gain > 0):
            raise ValueError("phase_scale and tanh_gain must be positive")

    def to_dict(self):
        return asdict(self)


def _apply(x, fn, quantity):
    if isinstance(x, Volume):
        return x.like(fn(x.data), quantity)
    return fn(np.asarray(x, dtype=np.float64))


def to_surrogate(x, cfg: TransformConfig = TransformConfig()):
    return _apply(x, lambda a: np.tanh(cfg.tanh_gain * a), Quantity.ARBITRARY)


def from_surrogate(s, cfg: TransformConfig = TransformConfig(), return_clamped: bool = False):
    """Inverse of :func:`to_surrogate`.

    Values are clamped to ``+-(1 - 1e-7)`` before ``atanh``; the number of
    clamped voxels is logged and, with ``return_clamped``, returned as well.
    """
    raw = s.data if isinstance(s, Volume) else np.asarray(s, dtype=np.float64)
    n_clamped = int(np.count_nonzero(np.abs(raw) > CLAMP))
    if n_clamped:
        log.warning("from_surrogate clamped %d voxel(s) to |s| <= 1 - 1e-7", n_clamped)
    out = _apply(s, lambda a: np.arctanh(np.clip(a, -CLAMP, CLAMP)) / cfg.tanh_gain,
                 Quantity.SUSCEPTIBILITY_PPM)
    return (out, n_clamped) if return_clamped else out


def scale_phase(y, cfg: TransformConfig = TransformConfig()):
    return _apply(y, lambda a: a * cfg.phase_scale, Quantity.ARBITRARY)


def unscale_phase(y, cfg: TransformConfig = TransformConfig()):
    return _apply(y, lambda a: a / cfg.phase_scale, Quantity.FIELD_SHIFT_PPM)
