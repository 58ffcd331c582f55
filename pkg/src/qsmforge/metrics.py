"""Image-quality metrics for susceptibility maps.

``evaluate`` returns L1, PSNR, NMSE, HFEN and SSIM. With a mask, L1/MSE/NMSE
sums run over mask voxels only; HFEN and SSIM filter the full volumes (zero
padding outside the grid) and aggregate over mask voxels.

Constants
---------
* PSNR: ``10 log10(R^2 / MSE)`` with ``R = max - min`` of the reference over
  the mask. The unsquared ``10 log10(R / MSE)`` is reported alongside.
* HFEN: ``100 * ||LoG(recon) - LoG(ref)|| / ||LoG(ref)||`` with a 15^3
  Laplacian-of-Gaussian kernel, sigma 1.5 voxels, made zero-sum.
* SSIM: Gaussian window sigma 1.5 truncated to 11^3, K1 = 0.01, K2 = 0.03,
  dynamic range R as for PSNR.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy import ndimage, signal

from .volume import Volume

__all__ = [
    "Space",
    "MetricReport",
    "MetricError",
    "evaluate",
    "log_kernel",
    "gaussian_window",
    "hfen",
    "ssim_map",
    "pearson",
    "nmse",
]

LOG_SIZE, LOG_SIGMA = 15, 1.5
SSIM_SIZE, SSIM_SIGMA = 11, 1.5
K1, K2 = 0.01, 0.03


class Space(str, enum.Enum):
    PPM = "Ppm"
    SURROGATE = "Surrogate"


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    l1: float
    psnr_db: float
    nmse: float
    hfen: float
    ssim: float
    n_voxels: int
    space: Space = Space.PPM
    psnr_unsquared_db: float = math.nan
    psnr_infinite: bool = False

    def to_dict(self) -> dict:
        """JSON-safe dict; an infinite PSNR becomes ``null`` with ``psnr_infinite`` set."""
        d = asdict(self)
        d["space"] = Space(self.space).value
        for key in ("psnr_db", "psnr_unsquared_db"):
            if not math.isfinite(d[key]):
                d[key] = None
        return d


def log_kernel(size: int = LOG_SIZE, sigma: float = LOG_SIGMA) -> np.ndarray:
    """Zero-sum 3D Laplacian-of-Gaussian kernel."""
    half = (size - 1) / 2.0
    ax = np.arange(-half, half + 1)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    r2 = x * x + y * y + z * z
    h = np.exp(-r2 / (2.0 * sigma ** 2))
    h /= h.sum()
    k = (r2 / sigma ** 4 - 3.0 / sigma ** 2) * h
    return k - k.sum() / k.size


def gaussian_window(size: int = SSIM_SIZE, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps; the 3D window is their outer product."""
    half = (size - 1) / 2.0
    ax = np.arange(-half, half + 1)
    w = np.exp(-ax * ax / (2.0 * sigma ** 2))
    return w / w.sum()


def _arr(v):
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


def _log_filter(a: np.ndarray) -> np.ndarray:
    # LoG kernel is symmetric, so convolution equals zero-padded correlation.
    return signal.fftconvolve(a, log_kernel(), mode="same")


def _gauss_filter(a: np.ndarray) -> np.ndarray:
    w = gaussian_window()
    for axis in range(3):
        a = ndimage.correlate1d(a, w, axis=axis, mode="constant", cval=0.0)
    return a


def hfen(recon, reference, mask=None) -> float:
    x, ref = _arr(recon), _arr(reference)
    sel = np.ones(ref.shape, bool) if mask is None else _arr(mask) == 1.0
    lx, lr = _log_filter(x)[sel], _log_filter(ref)[sel]
    denom = np.linalg.norm(lr)
    if denom == 0:
        raise MetricError("HFEN undefined: reference has no high-frequency content")
    return 100.0 * float(np.linalg.norm(lx - lr) / denom)


def ssim_map(recon, reference, data_range: float) -> np.ndarray:
    x, y = _arr(recon), _arr(reference)
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mx, my = _gauss_filter(x), _gauss_filter(y)
    sxx = _gauss_filter(x * x) - mx * mx
    syy = _gauss_filter(y * y) - my * my
    sxy = _gauss_filter(x * y) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def nmse(recon, reference, mask=None) -> float:
    x, ref = _arr(recon), _arr(reference)
    sel = np.ones(ref.shape, bool) if mask is None else _arr(mask) == 1.0
    denom = float(np.sum(ref[sel] ** 2))
    if denom == 0:
        raise MetricError("NMSE undefined for an all-zero reference")
    return float(np.sum((x[sel] - ref[sel]) ** 2)) / denom


def pearson(a, b, mask=None) -> float:
    a, b = _arr(a), _arr(b)
    sel = np.ones(a.shape, bool) if mask is None else _arr(mask) == 1.0
    return float(np.corrcoef(a[sel], b[sel])[0, 1])


def evaluate(recon, reference, mask: Optional[Volume] = None, space: Space = Space.PPM) -> MetricReport:
    x, ref = _arr(recon), _arr(reference)
    if x.shape != ref.shape:
        raise MetricError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if mask is not None and _arr(mask).shape != ref.shape:
        raise MetricError("mask shape does not match the volumes")
    sel = np.ones(ref.shape, bool) if mask is None else _arr(mask) == 1.0
    n = int(np.count_nonzero(sel))
    if n == 0:
        raise MetricError("mask selects no voxels")
    diff = x[sel] - ref[sel]
    l1 = float(np.mean(np.abs(diff)))
    mse = float(np.mean(diff * diff))
    rng = float(ref[sel].max() - ref[sel].min())
    infinite = mse == 0.0 or rng == 0.0
    if infinite:
        psnr, psnr_raw = math.inf, math.inf
    else:
        psnr = 10.0 * math.log10(rng * rng / mse)
        psnr_raw = 10.0 * math.log10(rng / mse)
    ssim_vals = ssim_map(x, ref, rng if rng > 0 else 1.0)[sel]
    return MetricReport(
        l1=l1,
        psnr_db=psnr,
        nmse=nmse(x, ref, sel.astype(np.float64)),
        hfen=hfen(x, ref, sel.astype(np.float64)),
        ssim=float(np.mean(ssim_vals)),
        n_voxels=n,
        space=Space(space),
        psnr_unsquared_db=psnr_raw,
        psnr_infinite=infinite,
    )
