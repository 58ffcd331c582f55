"""Losses, the baseline L1 trainer and the three-phase WGAN-GP schedule.

Training pairs are ``(scale_phase(field), to_surrogate(chi))`` patches, so
every loss here lives in surrogate space. Validation L1 is also surrogate
space: full validation volumes are tiled, inferred, stitched and compared
with ``to_surrogate(chi)`` inside the brain mask.

Random streams
--------------
All randomness derives from ``cfg.seed`` through named streams
(``SeedSequence([seed, crc32(name)])``):

* ``init-generator`` / ``init-critic``: weight init,
* ``generator``: batches for generator updates (baseline and joint phase
  share it, so a joint phase with ``lambda_adv = 0`` replays the baseline),
* ``critic``: batches for critic updates,
* ``gp``: interpolation weights when ``gp_mode`` is ``AtInterpolates``.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .nn import (Adam, Critic, CriticSpec, Generator, GeneratorSpec, Tape, Tensor, build_critic, build_generator,
                 frozen_stats, no_grad)
from .nn.tensor import active_tape, l2_norm
from .patching import (PatchGeometry, candidate_centers, draw_center, extract_patch, extract_window,
                       split_centers, stitch, tile_plan)
from .phantom import Sample
from .transform import TransformConfig, scale_phase, to_surrogate
from .volume import Quantity, Volume

__all__ = [
    "GpMode",
    "GanConfig",
    "TrainResult",
    "TrainingDivergedError",
    "named_rng",
    "l1_content_loss",
    "critic_loss",
    "gradient_penalty",
    "generator_loss",
    "PatchLoader",
    "infer_volume",
    "validation_l1",
    "clone_generator",
    "train_baseline",
    "train_gan",
    "history_csv",
]

log = logging.getLogger(__name__)


class GpMode(str, enum.Enum):
    AT_GENERATED = "AtGenerated"
    AT_INTERPOLATES = "AtInterpolates"


@dataclass(frozen=True)
class GanConfig:
    """Every training hyperparameter; defaults are the published full-scale values.

    ``lr_baseline`` drives :func:`train_baseline`, ``lr_joint`` both GAN
    phases. The content loss is a mean (not a sum) over voxels.
    """

    lambda_gp: float = 100.0
    lambda_c: float = 1.0
    lambda_adv: float = 0.01
    n_critic: int = 5
    lr_baseline: float = 1e-4
    lr_joint: float = 1e-5
    betas: tuple = (0.5, 0.999)
    iters_baseline: int = 40000
    iters_critic_pretrain: int = 20000
    iters_joint: int = 40000
    batch_size: int = 16
    seed: int = 0
    gp_mode: GpMode = GpMode.AT_GENERATED
    val_every: int = 200
    grid_gap: int = 8
    brain_fraction: float = 0.9
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "gp_mode", GpMode(self.gp_mode))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        for name in ("lambda_gp", "lambda_c", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lr_baseline", "lr_joint", "batch_size", "val_every", "grid_gap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("iters_baseline", "iters_critic_pretrain", "iters_joint"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.brain_fraction <= 1.0:
            raise ValueError("brain_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gp_mode"] = self.gp_mode.value
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GanConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "GanConfig":
        d = asdict(self)
        d.update(kw)
        return GanConfig(**d)


class TrainingDivergedError(RuntimeError):
    pass


def named_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


# -- losses ----------------------------------------------------------------------------
def l1_content_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute difference over all elements."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"l1_content_loss: shape {pred.shape} vs {target.shape}")
    return (pred - target).abs().mean()


def critic_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """``mean(d_fake) - mean(d_real)``; the critic minimizes it."""
    if d_real.shape[0] != d_fake.shape[0]:
        raise ValueError("critic_loss: real and fake batches differ in size")
    return d_fake.mean() - d_real.mean()


def _penalty(critic, samples: Tensor, lambda_gp: float):
    tape = active_tape()
    if tape is None:
        raise RuntimeError("gradient_penalty must run inside an active Tape")
    scores = critic(samples)
    (g,) = tape.gradient(scores.sum(), [samples], create_graph=True)
    if g is None:
        raise ValueError("critic output has no gradient path to its input")
    norms = l2_norm(g, (1, 2, 3, 4))
    return ((norms - 1.0) ** 2).mean() * lambda_gp, scores


def gradient_penalty(critic, fake, cfg: GanConfig, real=None, rng: Optional[np.random.Generator] = None) -> Tensor:
    """``lambda_gp * mean_b (||grad_x critic(x_b)||_2 - 1)^2``.

    ``AtGenerated`` evaluates at ``fake``; ``AtInterpolates`` at
    ``eps * real + (1 - eps) * fake`` with one ``eps ~ U(0, 1)`` per sample.
    The penalty stays differentiable w.r.t. the critic's parameters.
    """
    f = fake.data if isinstance(fake, Tensor) else np.asarray(fake)
    if cfg.gp_mode is GpMode.AT_INTERPOLATES:
        if real is None or rng is None:
            raise ValueError("AtInterpolates needs real samples and an rng")
        r = real.data if isinstance(real, Tensor) else np.asarray(real)
        eps = rng.random((f.shape[0],) + (1,) * (f.ndim - 1)).astype(f.dtype)
        f = eps * r + (1.0 - eps) * f
    return _penalty(critic, Tensor(f, requires_grad=True), cfg.lambda_gp)[0]


def generator_loss(pred: Tensor, target, d_fake: Tensor, cfg: GanConfig):
    """``lambda_c * L1 + lambda_adv * (-mean(d_fake))``; returns ``(total, content, adv)``."""
    content = l1_content_loss(pred, target)
    adv = -d_fake.mean()
    return content * cfg.lambda_c + adv * cfg.lambda_adv, content, adv


# -- data -------------------------------------------------------------------------------
class PatchLoader:
    """Seeded batches of ``(scaled field patch, surrogate chi patch)``.

    Each draw picks a subject uniformly, then a center from that subject's
    brain or background pool (see :func:`~qsmforge.patching.draw_center`).
    """

    def __init__(self, subjects: Sequence[Sample], geom: PatchGeometry, rng: np.random.Generator,
                 grid_gap: int = 8, brain_fraction: float = 0.9, tcfg: TransformConfig = TransformConfig(),
                 dtype=np.float32):
        if not subjects:
            raise ValueError("training set is empty")
        self.geom, self.rng, self.brain_fraction, self.dtype = geom, rng, brain_fraction, np.dtype(dtype)
        self.inputs, self.targets, self.pools = [], [], []
        for s in subjects:
            if min(s.field.dims) < geom.input_size:
                raise ValueError(f"volume {s.field.dims} is smaller than the {geom.input_size}^3 input patch")
            self.inputs.append(scale_phase(s.field.data, tcfg))
            self.targets.append(to_surrogate(s.chi.data, tcfg))
            self.pools.append(split_centers(candidate_centers(s.field.dims, grid_gap), s.mask.data))

    def batch(self, n: int):
        xs, ys = [], []
        for _ in range(n):
            i = int(self.rng.integers(len(self.inputs)))
            c = draw_center(*self.pools[i], self.brain_fraction, self.rng)
            xs.append(extract_patch(self.inputs[i], c, self.geom.input_size))
            ys.append(extract_patch(self.targets[i], c, self.geom.output_size))
        return (np.stack(xs)[:, None].astype(self.dtype), np.stack(ys)[:, None].astype(self.dtype))


# -- inference ---------------------------------------------------------------------------
def infer_volume(generator: Generator, field: Volume, geom: PatchGeometry,
                 tcfg: TransformConfig = TransformConfig(), batch_size: int = 4) -> Volume:
    """Tile, run the generator (eval mode), and stitch; result is in surrogate space."""
    spec = generator.spec
    if (spec.input_size, spec.output_size) != (geom.input_size, geom.output_size):
        raise ValueError(f"generator expects {spec.input_size}->{spec.output_size}, geometry is {geom.label()}")
    x = scale_phase(field.data, tcfg)
    tiles = tile_plan(field.dims, geom)
    was_training = generator.training
    generator.eval()
    pieces = []
    try:
        with no_grad():
            for i in range(0, len(tiles), batch_size):
                chunk = tiles[i:i + batch_size]
                inp = np.stack([extract_window(x, t.input_start, (geom.input_size,) * 3) for t in chunk])
                out = generator(inp[:, None].astype(generator.dtype)).data[:, 0].astype(np.float64)
                for t, o in zip(chunk, out):
                    sl = tuple(slice(c, c + b - a) for c, (a, b) in zip(t.crop_offset, t.output_window))
                    pieces.append((t.output_window, o[sl]))
    finally:
        generator.train(was_training)
    return stitch(pieces, field.dims, field.voxel_size_mm, Quantity.ARBITRARY)


def validation_l1(generator: Generator, subjects: Sequence[Sample], geom: PatchGeometry,
                  tcfg: TransformConfig = TransformConfig()) -> float:
    """Mean over subjects of the masked surrogate-space L1 of stitched volumes."""
    if not subjects:
        return math.nan
    vals = []
    for s in subjects:
        pred = infer_volume(generator, s.field, geom, tcfg).data
        ref = to_surrogate(s.chi.data, tcfg)
        sel = s.mask.data == 1.0
        vals.append(float(np.mean(np.abs(pred[sel] - ref[sel]))))
    return float(np.mean(vals))


def clone_generator(model: Generator) -> Generator:
    out = build_generator(model.spec, dtype=model.dtype)
    out.load_state_dict(model.state_dict())
    out.train(model.training)
    return out


# -- results -------------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: Generator
    best_state: Dict[str, np.ndarray]
    best_val_l1: float
    best_iteration: int
    history: List[dict] = field(default_factory=list)
    critic: Optional[Critic] = None

    def best_model(self) -> Generator:
        m = clone_generator(self.model)
        m.load_state_dict(self.best_state)
        return m


HISTORY_FIELDS = ["phase", "iteration", "l1_train", "val_l1", "critic_loss", "gp", "g_content", "g_adv"]


def history_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in HISTORY_FIELDS})
    return buf.getvalue()


def _finite(value: float, phase: str, it: int, what: str) -> float:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{phase}: {what} became {value} at iteration {it}")
    return value


class _Tracker:
    """Validation cadence plus best-state bookkeeping."""

    def __init__(self, model, val, geom, tcfg, every):
        self.model, self.val, self.geom, self.tcfg, self.every = model, val, geom, tcfg, every
        self.best_val, self.best_it, self.best_state = math.inf, 0, model.state_dict()

    def check(self, it: int, force: bool = False) -> Optional[float]:
        if not self.val or not (force or it % self.every == 0):
            return None
        v = validation_l1(self.model, self.val, self.geom, self.tcfg)
        if v < self.best_val:
            self.best_val, self.best_it, self.best_state = v, it, self.model.state_dict()
        return v

    def finish(self, it: int):
        """Without validation data the final state is the kept one."""
        if not self.val:
            self.best_val, self.best_it, self.best_state = math.nan, it, self.model.state_dict()


def _generator_for(init: Optional[Generator], gen_spec: GeneratorSpec, cfg: GanConfig) -> Generator:
    if init is not None:
        if (init.spec.input_size, init.spec.output_size) != (gen_spec.input_size, gen_spec.output_size):
            raise ValueError(f"init generator is {init.spec.input_size}->{init.spec.output_size}, "
                             f"spec wants {gen_spec.input_size}->{gen_spec.output_size}")
        return clone_generator(init).train()
    return build_generator(gen_spec, named_rng(cfg.seed, "init-generator"), np.dtype(cfg.dtype))


def _l1_step(gen, opt, loader, batch_size):
    x, y = loader.batch(batch_size)
    with Tape() as tape:
        loss = l1_content_loss(gen(x), y)
    grads = tape.gradient(loss, gen.parameters())
    opt.step([g.data for g in grads])
    return loss.item()


def train_baseline(train: Sequence[Sample], val: Sequence[Sample], geom: PatchGeometry, gen_spec: GeneratorSpec,
                   cfg: GanConfig, init: Optional[Generator] = None, lr: Optional[float] = None,
                   iters: Optional[int] = None, tcfg: TransformConfig = TransformConfig(),
                   callback: Optional[Callable[[int, Generator], None]] = None) -> TrainResult:
    """L1-only generator training with Adam.

    ``init`` (copied, never modified) continues from an existing model;
    ``lr`` and ``iters`` override ``cfg.lr_baseline`` / ``cfg.iters_baseline``.
    ``callback(iteration, model)`` runs after every update.
    """
    lr = cfg.lr_baseline if lr is None else lr
    iters = cfg.iters_baseline if iters is None else iters
    gen = _generator_for(init, gen_spec, cfg)
    loader = PatchLoader(train, geom, named_rng(cfg.seed, "generator"), cfg.grid_gap, cfg.brain_fraction, tcfg,
                         gen.dtype)
    opt = Adam(gen.parameters(), lr, cfg.betas)
    tracker = _Tracker(gen, val, geom, tcfg, cfg.val_every)
    history = [dict(phase="baseline", iteration=0, val_l1=tracker.check(0))]
    for it in range(1, iters + 1):
        loss = _finite(_l1_step(gen, opt, loader, cfg.batch_size), "baseline", it, "L1 loss")
        if callback is not None:
            callback(it, gen)
        v = tracker.check(it, force=it == iters)
        if v is not None or it % 10 == 0:
            history.append(dict(phase="baseline", iteration=it, l1_train=loss, val_l1=v))
    tracker.finish(iters)
    return TrainResult(gen, tracker.best_state, tracker.best_val, tracker.best_it, history)


def _critic_step(critic, gen, copt, loader, cfg, gp_rng):
    x, real = loader.batch(cfg.batch_size)
    with no_grad(), frozen_stats(gen):
        fake = gen(x).data
    with Tape() as tape:
        d_real = critic(real)
        if cfg.gp_mode is GpMode.AT_GENERATED:
            gp, d_fake = _penalty(critic, Tensor(fake, requires_grad=True), cfg.lambda_gp)
        else:
            d_fake = critic(fake)
            gp = gradient_penalty(critic, fake, cfg, real, gp_rng)
        w = critic_loss(d_real, d_fake)
        loss = w + gp
    grads = tape.gradient(loss, critic.parameters())
    copt.step([g.data for g in grads])
    return w.item(), gp.item()


def train_gan(train: Sequence[Sample], val: Sequence[Sample], geom: PatchGeometry, gen_spec: GeneratorSpec,
              critic_spec: CriticSpec, cfg: GanConfig, init: Optional[Generator] = None,
              tcfg: TransformConfig = TransformConfig(),
              callback: Optional[Callable[[int, Generator], None]] = None) -> TrainResult:
    """Critic pre-training with a frozen generator, then alternating updates.

    Phase A runs ``iters_critic_pretrain`` critic steps. Phase B runs
    ``iters_joint`` iterations of ``n_critic`` critic steps followed by one
    generator step on :func:`generator_loss`. Both use ``lr_joint`` and fresh
    Adam states. Generator forwards made for the critic use batch statistics
    without touching BatchNorm running averages. ``callback`` runs after each
    generator step. ``model`` in the result is the final generator.
    """
    if critic_spec.input_size != geom.output_size:
        raise ValueError(f"critic input {critic_spec.input_size} != generator output {geom.output_size}")
    gen = _generator_for(init, gen_spec, cfg)
    critic = build_critic(critic_spec, named_rng(cfg.seed, "init-critic"), gen.dtype)
    gen_loader = PatchLoader(train, geom, named_rng(cfg.seed, "generator"), cfg.grid_gap, cfg.brain_fraction, tcfg,
                             gen.dtype)
    critic_loader = PatchLoader(train, geom, named_rng(cfg.seed, "critic"), cfg.grid_gap, cfg.brain_fraction, tcfg,
                                gen.dtype)
    gp_rng = named_rng(cfg.seed, "gp")
    copt = Adam(critic.parameters(), cfg.lr_joint, cfg.betas)
    history = []

    for it in range(1, cfg.iters_critic_pretrain + 1):
        w, gp = _critic_step(critic, gen, copt, critic_loader, cfg, gp_rng)
        _finite(w + gp, "critic-pretrain", it, "critic loss")
        if it % 10 == 0 or it == cfg.iters_critic_pretrain:
            history.append(dict(phase="critic-pretrain", iteration=it, critic_loss=w, gp=gp))

    copt = Adam(critic.parameters(), cfg.lr_joint, cfg.betas)
    gopt = Adam(gen.parameters(), cfg.lr_joint, cfg.betas)
    tracker = _Tracker(gen, val, geom, tcfg, cfg.val_every)
    history.append(dict(phase="joint", iteration=0, val_l1=tracker.check(0)))
    for it in range(1, cfg.iters_joint + 1):
        for _ in range(cfg.n_critic):
            w, gp = _critic_step(critic, gen, copt, critic_loader, cfg, gp_rng)
            _finite(w + gp, "joint", it, "critic loss")
        x, y = gen_loader.batch(cfg.batch_size)
        with Tape() as tape:
            pred = gen(x)
            total, content, adv = generator_loss(pred, y, critic(pred), cfg)
        grads = tape.gradient(total, gen.parameters())
        gopt.step([g.data for g in grads])
        _finite(total.item(), "joint", it, "generator loss")
        if callback is not None:
            callback(it, gen)
        v = tracker.check(it, force=it == cfg.iters_joint)
        if v is not None or it % 10 == 0:
            history.append(dict(phase="joint", iteration=it, critic_loss=w, gp=gp, g_content=content.item(),
                                g_adv=adv.item(), l1_train=content.item(), val_l1=v))
    tracker.finish(cfg.iters_joint)
    return TrainResult(gen, tracker.best_state, tracker.best_val, tracker.best_it, history, critic)
