"""Desk-scale experiments: patch-geometry ranking and GAN refinement.

A synthetic set of 20 phantoms (32^3, 48^3 or 64^3) is split 12/3/5 into
train/validation/test. Models are scored on stitched test volumes in ppm
space (after ``from_surrogate``) inside the brain mask, plus the mean
absolute error on voxels that sit on a face of their output tile.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .metrics import evaluate
from .nn import CriticSpec, Generator, GeneratorSpec
from .patching import PatchGeometry, tile_boundary_mask
from .phantom import Sample, synth_dataset, tissue_spec
from .training import GanConfig, TrainResult, infer_volume, train_baseline, train_gan
from .transform import TransformConfig, from_surrogate, to_surrogate

__all__ = [
    "DeskConfig",
    "desk_dataset",
    "score_model",
    "boundary_error",
    "run_baseline",
    "run_gan",
    "DESK_GEOMETRIES",
]

log = logging.getLogger(__name__)

DESK_GEOMETRIES = (PatchGeometry(16, 16), PatchGeometry(24, 16))


@dataclass(frozen=True)
class DeskConfig:
    n_train: int = 12
    n_val: int = 3
    n_test: int = 5
    dims_choices: Tuple[int, ...] = (32, 48, 64)
    noise_std_ppm: float = 0.0
    data_seed: int = 2024
    depth: int = 2
    base_channels: int = 4
    iters_baseline: int = 2000
    batch_size: int = 2
    lr_baseline: float = 1e-3
    val_every: int = 200
    iters_critic_pretrain: int = 1000
    iters_joint: int = 2000
    gan_batch_size: int = 2
    lr_joint: float = 1e-4
    critic_channels: int = 8

    def to_dict(self):
        return asdict(self)

    def gan_config(self, seed: int) -> GanConfig:
        return GanConfig(lambda_gp=100.0, lambda_c=1.0, lambda_adv=0.01, n_critic=5,
                         lr_baseline=self.lr_baseline, lr_joint=self.lr_joint,
                         iters_baseline=self.iters_baseline, iters_critic_pretrain=self.iters_critic_pretrain,
                         iters_joint=self.iters_joint, batch_size=self.batch_size, seed=seed,
                         val_every=self.val_every)


def desk_dataset(cfg: DeskConfig = DeskConfig()) -> Tuple[List[Sample], List[Sample], List[Sample]]:
    """Deterministic ``(train, val, test)`` phantom split."""
    n = cfg.n_train + cfg.n_val + cfg.n_test
    root = np.random.SeedSequence(cfg.data_seed)
    subjects = []
    for i, child in enumerate(root.spawn(n)):
        rng = np.random.default_rng(child)
        d = int(cfg.dims_choices[int(rng.integers(len(cfg.dims_choices)))])
        spec = tissue_spec((d, d, d), rng, seed=int(rng.integers(2 ** 31)))
        subjects.extend(synth_dataset(1, spec, cfg.noise_std_ppm))
    return (subjects[:cfg.n_train], subjects[cfg.n_train:cfg.n_train + cfg.n_val],
            subjects[cfg.n_train + cfg.n_val:])


def boundary_error(pred_ppm: np.ndarray, chi: np.ndarray, mask: np.ndarray, geom: PatchGeometry) -> float:
    """Mean |error| (ppm) on in-mask voxels lying on a face of their output tile."""
    sel = tile_boundary_mask(chi.shape, geom) & (mask == 1.0)
    return float(np.mean(np.abs(pred_ppm[sel] - chi[sel])))


def score_model(gen: Generator, subjects: Sequence[Sample], geom: PatchGeometry,
                tcfg: TransformConfig = TransformConfig()) -> Dict[str, float]:
    """Subject-averaged metrics of stitched predictions.

    All keys are ppm-space except ``l1_surrogate``, the masked L1 in the
    tanh surrogate space the networks are trained in.
    """
    rows = []
    for s in subjects:
        sur = infer_volume(gen, s.field, geom, tcfg)
        pred = from_surrogate(sur, tcfg)
        rep = evaluate(pred, s.chi, s.mask)
        sel = s.mask.data == 1.0
        rows.append(dict(l1=rep.l1, nmse=rep.nmse, psnr=rep.psnr_db, hfen=rep.hfen, ssim=rep.ssim,
                         boundary=boundary_error(pred.data, s.chi.data, s.mask.data, geom),
                         l1_surrogate=float(np.mean(np.abs(sur.data[sel] - to_surrogate(s.chi.data, tcfg)[sel])))))
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def _gen_spec(geom: PatchGeometry, cfg: DeskConfig) -> GeneratorSpec:
    return GeneratorSpec(geom.input_size, geom.output_size, cfg.depth, cfg.base_channels)


def run_baseline(geom: PatchGeometry, seed: int, data, cfg: DeskConfig = DeskConfig()) -> TrainResult:
    train, val, _ = data
    t0 = time.perf_counter()
    res = train_baseline(train, val, geom, _gen_spec(geom, cfg), cfg.gan_config(seed))
    log.info("baseline %s seed %d: best val %.5f at %d (%.0f s)", geom.label(), seed, res.best_val_l1,
             res.best_iteration, time.perf_counter() - t0)
    return res


def run_gan(geom: PatchGeometry, seed: int, data, init: Generator, cfg: DeskConfig = DeskConfig()) -> TrainResult:
    train, val, _ = data
    gcfg = cfg.gan_config(seed).replace(batch_size=cfg.gan_batch_size)
    t0 = time.perf_counter()
    res = train_gan(train, val, geom, _gen_spec(geom, cfg),
                    CriticSpec(geom.output_size, base_channels=cfg.critic_channels), gcfg, init=init)
    log.info("gan %s seed %d: done in %.0f s", geom.label(), seed, time.perf_counter() - t0)
    return res
