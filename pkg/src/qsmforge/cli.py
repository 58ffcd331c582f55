"""Command-line interface.

Commands: ``phantom``, ``forward``, ``invert``, ``train``, ``infer``,
``eval``, ``compare``, ``validate``. Volumes are ``.qvol`` files; configs and
reports are JSON; tables are CSV. Every command that writes outputs also
writes a run manifest next to them (``<output>.run_manifest.json``, or
``run_manifest.json`` inside an output directory).

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
import time
import warnings
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .dipole import build_kernel, forward_field
from .experiments import DeskConfig, desk_dataset, run_baseline, run_gan, score_model
from .inversion import OrientedField, TkdConfig, UnderdeterminedWarning, cosmos_invert, tikhonov_invert, tkd_invert
from .metrics import MetricError, Space, evaluate
from .nn import CheckpointError, CriticSpec, GeneratorSpec, ModelSizeError, load_checkpoint, save_checkpoint
from .patching import PatchGeometry, StitchError, plan_to_json, tile_plan
from .phantom import PhantomSpec, PhantomSpecError, Sample, Shape, analytic_sphere_field, generate
from .training import (GanConfig, TrainingDivergedError, history_csv, infer_volume, named_rng, train_baseline,
                       train_gan, validation_l1)
from .transform import TransformConfig, from_surrogate
from .volume import NonPhysicalSpectrumError, Orientation, QvolFormatError, read_qvol, write_qvol

log = logging.getLogger("qsmforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RUN_MANIFEST = "run_manifest.json"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


# -- manifest ------------------------------------------------------------------------
def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digests(paths) -> Dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            if not f.name.endswith(RUN_MANIFEST):
                out[str(f)] = sha256_file(f)
    return out


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


class Run:
    """Collects what a command read, wrote and how long each stage took."""

    def __init__(self, argv: List[str], seed: Optional[int] = None):
        self.argv, self.seed = list(argv), seed
        self.config: dict = {}
        self.inputs: List[Path] = []
        self.outputs: List[Path] = []
        self.timings: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def read(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"{p}: no such file or directory")
        self.inputs.append(p)
        return p

    def wrote(self, path) -> Path:
        p = Path(path)
        self.outputs.append(p)
        return p

    def manifest(self) -> dict:
        return {
            "command": self.argv,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "seed": self.seed,
            "versions": {"qsmforge": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "inputs": _digests(self.inputs),
            "outputs": _digests(self.outputs),
            "timings_s": {k: round(v, 6) for k, v in self.timings.items()},
            "created_unix": time.time(),
        }

    def write_manifest(self, where: Path) -> Path:
        where = Path(where)
        target = where / RUN_MANIFEST if where.is_dir() else where.with_name(f"{where.name}.{RUN_MANIFEST}")
        target.write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))
        return target


# -- argument helpers ----------------------------------------------------------------------
def _vector(text: str):
    try:
        parts = [float(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z numbers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    try:
        return Orientation.from_vector(parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _geometry(text: str) -> PatchGeometry:
    try:
        a, b = (int(p) for p in text.replace("->", ":").split(":"))
        return PatchGeometry(a, b)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad geometry {text!r} (expected IN:OUT): {exc}") from None


def _int_list(text: str) -> List[int]:
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _read_volume(run: Run, path):
    return read_qvol(run.read(path))


def _write_volume(run: Run, path, vol) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_qvol(path, vol)
    return run.wrote(path)


def load_subjects(run: Run, root) -> List[Sample]:
    """Subjects from ``root`` (one subject) or its subdirectories, each holding chi/field/mask ``.qvol``."""
    root = run.read(root)
    dirs = [root] if (root / "chi.qvol").exists() else sorted(d for d in root.iterdir() if (d / "chi.qvol").exists())
    if not dirs:
        raise CliError(f"{root}: no subject directories with chi.qvol, field.qvol, mask.qvol")
    subjects = []
    for d in dirs:
        vols = []
        for name in ("chi", "field", "mask"):
            f = d / f"{name}.qvol"
            if not f.exists():
                raise CliError(f"{d}: missing {name}.qvol")
            vols.append(_read_volume(run, f))
        if not vols[0].dims == vols[1].dims == vols[2].dims:
            raise CliError(f"{d}: chi, field and mask dims disagree")
        subjects.append(Sample(*vols))
    return subjects


# -- commands ---------------------------------------------------------------------------------
def cmd_phantom(args, run: Run):
    with run.stage("load"):
        spec = PhantomSpec.from_json(run.read(args.spec))
    run.seed = spec.seed
    run.config = {"spec": spec.to_dict(), "b0": list(args.b0.b0_direction), "noise_std_ppm": args.noise}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with run.stage("render"):
        chi, mask = generate(spec)
    with run.stage("forward"):
        field = forward_field(chi, build_kernel(spec.dims, spec.voxel_size_mm, args.b0))
        if args.noise > 0:
            noise = named_rng(spec.seed, "phantom-noise").normal(0.0, args.noise, field.dims)
            field = field.like(field.data + noise)
    for name, vol in (("chi", chi), ("mask", mask), ("field", field)):
        _write_volume(run, out / f"{name}.qvol", vol)
    return out


def cmd_forward(args, run: Run):
    chi = _read_volume(run, args.chi)
    run.config = {"b0": list(args.b0.b0_direction)}
    with run.stage("forward"):
        field = forward_field(chi, build_kernel(chi.dims, chi.voxel_size_mm, args.b0))
    return _write_volume(run, args.out, field)


def cmd_invert(args, run: Run):
    fields_ = [_read_volume(run, f) for f in args.field]
    b0s = args.b0 or []
    run.config = {"method": args.method, "threshold": args.threshold, "lambda": args.lam,
                  "b0": [list(b.b0_direction) for b in b0s]}
    with run.stage("invert"):
        if args.method == "cosmos":
            if len(b0s) != len(fields_):
                raise CliError(f"cosmos needs one --b0 per --field ({len(fields_)} field(s), {len(b0s)} --b0)",
                               EXIT_USAGE)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", UnderdeterminedWarning)
                chi = cosmos_invert([OrientedField(f, o) for f, o in zip(fields_, b0s)])
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
        else:
            if len(fields_) != 1 or len(b0s) > 1:
                raise CliError(f"{args.method} takes exactly one --field and at most one --b0", EXIT_USAGE)
            f = fields_[0]
            kernel = build_kernel(f.dims, f.voxel_size_mm, b0s[0] if b0s else Orientation())
            if args.method == "tkd":
                chi = tkd_invert(f, kernel, TkdConfig(args.threshold))
            else:
                chi = tikhonov_invert(f, kernel, args.lam)
    return _write_volume(run, args.out, chi)


def _train_config(args) -> dict:
    """Config JSON merged with flag overrides: ``{"gan": ..., "generator": ..., "critic": ...}``."""
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"{args.config}: unreadable config ({exc})", EXIT_USAGE) from None
    unknown = set(doc) - {"gan", "generator", "critic"}
    if unknown:
        raise CliError(f"config: unknown section(s) {sorted(unknown)}", EXIT_USAGE)
    gan = dict(doc.get("gan", {}))
    gen = dict(doc.get("generator", {}))
    critic = dict(doc.get("critic", {}))
    for flag, key in (("seed", "seed"), ("batch_size", "batch_size"), ("lr", "lr_baseline"),
                      ("lr_joint", "lr_joint"), ("val_every", "val_every"), ("lambda_adv", "lambda_adv"),
                      ("iters_critic", "iters_critic_pretrain"), ("iters_joint", "iters_joint")):
        if getattr(args, flag) is not None:
            gan[key] = getattr(args, flag)
    if args.iters is not None:
        gan["iters_baseline"] = args.iters
    if args.geometry is not None:
        gen["input_size"], gen["output_size"] = args.geometry.input_size, args.geometry.output_size
    if args.depth is not None:
        gen["depth"] = args.depth
    if args.base_channels is not None:
        gen["base_channels"] = args.base_channels
    return {"gan": gan, "generator": gen, "critic": critic}


def _build_specs(conf: dict):
    try:
        cfg = GanConfig.from_dict(conf["gan"])
        known = {f.name for f in fields(GeneratorSpec)}
        bad = set(conf["generator"]) - known
        if bad:
            raise ValueError(f"unknown generator field(s) {sorted(bad)}")
        gen_spec = GeneratorSpec(**conf["generator"])
        critic_conf = {"input_size": gen_spec.output_size, **conf["critic"]}
        bad = set(critic_conf) - {f.name for f in fields(CriticSpec)}
        if bad:
            raise ValueError(f"unknown critic field(s) {sorted(bad)}")
        critic_spec = CriticSpec(**critic_conf)
        geom = PatchGeometry(gen_spec.input_size, gen_spec.output_size, gen_spec.depth)
    except (TypeError, ValueError) as exc:
        raise CliError(f"config: {exc}", EXIT_USAGE) from None
    return cfg, gen_spec, critic_spec, geom


def cmd_train(args, run: Run):
    conf = _train_config(args)
    cfg, gen_spec, critic_spec, geom = _build_specs(conf)
    run.seed, run.config = cfg.seed, {"mode": args.mode, **conf}
    with run.stage("load"):
        train = load_subjects(run, args.data)
        val = load_subjects(run, args.val) if args.val else []
        init = None
        if args.init:
            init, _ = load_checkpoint(run.read(args.init))
    out = Path(args.out)
    history = []
    if args.mode == "baseline" or init is None:
        with run.stage("baseline"):
            res = train_baseline(train, val, geom, gen_spec, cfg, init=init)
        history += res.history
        init, step = res.best_model(), res.best_iteration
    if args.mode == "gan":
        with run.stage("gan"):
            res = train_gan(train, val, geom, gen_spec, critic_spec, cfg, init=init)
        history += res.history
        init, step = res.model, cfg.iters_joint
    best = None if math.isnan(res.best_val_l1) or math.isinf(res.best_val_l1) else res.best_val_l1
    save_checkpoint(out, init, step=step, extra={"mode": args.mode, "config": run.config, "best_val_l1": best})
    (out / "history.csv").write_text(history_csv(history))
    if args.mode == "gan" and res.critic is not None:
        save_checkpoint(out / "critic", res.critic, step=cfg.iters_joint)
    run.wrote(out)
    return out


def _check_geometry(model_spec: GeneratorSpec, wanted: Optional[PatchGeometry]):
    if wanted is not None and (wanted.input_size, wanted.output_size) != (model_spec.input_size,
                                                                          model_spec.output_size):
        raise CliError(f"checkpoint geometry {model_spec.input_size}->{model_spec.output_size} does not match "
                       f"requested geometry {wanted.input_size}->{wanted.output_size}")


def cmd_infer(args, run: Run):
    with run.stage("load"):
        try:
            gen, manifest = load_checkpoint(run.read(args.ckpt))
        except KeyError as exc:
            raise CliError(f"{args.ckpt}: malformed checkpoint manifest ({exc})") from None
        if manifest.get("kind") != "generator":
            raise CliError(f"{args.ckpt}: expected a generator checkpoint, found {manifest.get('kind')!r}")
        field = _read_volume(run, args.field)
    _check_geometry(gen.spec, args.geometry)
    geom = PatchGeometry(gen.spec.input_size, gen.spec.output_size, gen.spec.depth)
    run.config = {"generator": gen.spec.to_dict()}
    if min(field.dims) < 1:
        raise CliError("empty field volume")
    if args.dump_plan:
        Path(args.dump_plan).write_text(plan_to_json(tile_plan(field.dims, geom), geom, field.dims))
        run.wrote(args.dump_plan)
    with run.stage("infer"):
        surrogate = infer_volume(gen, field, geom, TransformConfig())
        chi = from_surrogate(surrogate)
    return _write_volume(run, args.out, chi)


def cmd_eval(args, run: Run):
    recon = _read_volume(run, args.recon)
    ref = _read_volume(run, args.ref)
    mask = _read_volume(run, args.mask) if args.mask else None
    with run.stage("metrics"):
        rep = evaluate(recon, ref, mask, Space(args.space))
    text = json.dumps(rep.to_dict(), indent=1, sort_keys=True)
    if args.json:
        Path(args.json).write_text(text + "\n")
        run.wrote(args.json)
    else:
        print(text)
    return Path(args.json) if args.json else None


CSV_COLUMNS = ["method", "geometry", "seed", "l1", "psnr", "nmse", "hfen", "ssim", "boundary_l1", "l1_surrogate",
               "val_l1"]


def _classical_rows(test, seeds, threshold, lam):
    rows = []
    for method in ("tkd", "tikhonov"):
        scores = []
        for s in test:
            k = build_kernel(s.field.dims, s.field.voxel_size_mm)
            chi = tkd_invert(s.field, k, TkdConfig(threshold)) if method == "tkd" else tikhonov_invert(s.field, k, lam)
            rep = evaluate(chi, s.chi, s.mask)
            scores.append(dict(l1=rep.l1, psnr=rep.psnr_db, nmse=rep.nmse, hfen=rep.hfen, ssim=rep.ssim))
        mean = {k: float(np.mean([r[k] for r in scores])) for k in scores[0]}
        rows += [dict(method=method, geometry="full", seed=seed, **mean) for seed in seeds]
    return rows


def cmd_compare(args, run: Run):
    desk = DeskConfig()
    if args.desk_config:
        try:
            desk = DeskConfig(**json.loads(Path(run.read(args.desk_config)).read_text()))
        except (TypeError, ValueError) as exc:
            raise CliError(f"{args.desk_config}: {exc}", EXIT_USAGE) from None
    if args.iters is not None:
        desk = DeskConfig(**{**desk.to_dict(), "iters_baseline": args.iters})
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = set(methods) - {"baseline", "gan", "tkd", "tikhonov"}
    if bad:
        raise CliError(f"unknown method(s) {sorted(bad)}", EXIT_USAGE)
    run.seed = args.seeds[0] if args.seeds else None
    run.config = {"desk": desk.to_dict(), "geometries": [g.label() for g in args.geometries], "seeds": args.seeds,
                  "methods": methods}
    with run.stage("data"):
        data = desk_dataset(desk)
    rows = []
    if {"tkd", "tikhonov"} & set(methods):
        with run.stage("classical"):
            rows += [r for r in _classical_rows(data[2], args.seeds, args.threshold, args.lam)
                     if r["method"] in methods]
    for geom in args.geometries:
        for seed in args.seeds:
            with run.stage(f"baseline {geom.label()}"):
                base = run_baseline(geom, seed, data, desk)
            best = base.best_model()
            if "baseline" in methods:
                rows.append(dict(method="baseline", geometry=geom.label(), seed=seed,
                                 val_l1=base.best_val_l1, **_rename(score_model(best, data[2], geom))))
            if "gan" in methods:
                with run.stage(f"gan {geom.label()}"):
                    gan = run_gan(geom, seed, data, best, desk)
                rows.append(dict(method="gan", geometry=geom.label(), seed=seed,
                                 val_l1=validation_l1(gan.model, data[1], geom),
                                 **_rename(score_model(gan.model, data[2], geom))))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in CSV_COLUMNS})
    return run.wrote(out)


def _rename(scores: dict) -> dict:
    d = dict(scores)
    d["boundary_l1"] = d.pop("boundary")
    return d


def sphere_oracle_error(field, spec: PhantomSpec, orientation: Orientation) -> float:
    """Relative L2 error of ``field`` against summed analytic sphere fields on the ``1.5a < r < 3a`` shells."""
    ref = np.zeros(field.dims)
    shell = np.zeros(field.dims, dtype=bool)
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in field.dims), indexing="ij")
    for i, el in enumerate(spec.elements):
        if el.shape is not Shape.SPHERE:
            raise CliError(f"elements[{i}].shape: only Sphere elements have an analytic field, got {el.shape.value}")
        ref += analytic_sphere_field(el.size_voxels, el.delta_chi_ppm, el.center_voxel, field.dims,
                                     spec.voxel_size_mm, orientation).data
        r = np.sqrt(sum((g - c) ** 2 for g, c in zip(grid, el.center_voxel)))
        shell |= (r > 1.5 * el.size_voxels) & (r < 3.0 * el.size_voxels)
    if not spec.elements:
        raise CliError("spec has no elements to validate against")
    if not shell.any():
        raise CliError("validation shell contains no voxels")
    diff = field.data[shell] - ref[shell]
    return float(np.linalg.norm(diff) / np.linalg.norm(ref[shell]))


def cmd_validate(args, run: Run):
    field = _read_volume(run, args.field)
    spec = PhantomSpec.from_json(run.read(args.spec))
    if tuple(spec.dims) != field.dims:
        raise CliError(f"spec dims {tuple(spec.dims)} do not match field dims {field.dims}")
    run.config = {"spec": spec.to_dict(), "b0": list(args.b0.b0_direction), "tolerance": args.tolerance}
    with run.stage("oracle"):
        err = sphere_oracle_error(field, spec, args.b0)
    passed = err < args.tolerance
    report = {"relative_l2_error": err, "tolerance": args.tolerance, "pass": passed}
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.json:
        Path(args.json).write_text(text + "\n")
        run.wrote(args.json)
    print(text)
    if not passed:
        raise CliError(f"field deviates from the analytic oracle by {err:.4f} (tolerance {args.tolerance})",
                       EXIT_NUMERIC)
    return Path(args.json) if args.json else None


# -- parser --------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsmforge", description="Synthetic QSM reconstruction toolkit.")
    p.add_argument("--threads", type=int, default=None, help="BLAS/FFT thread cap (1 is bitwise reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"qsmforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="render a phantom spec into chi, mask and field volumes")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--b0", type=_vector, default=Orientation())
    s.add_argument("--noise", type=float, default=0.0, help="field noise std in ppm")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("forward", help="dipole forward model of a susceptibility volume")
    s.add_argument("--chi", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--b0", type=_vector, default=Orientation())
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("invert", help="closed-form dipole inversion")
    s.add_argument("--method", required=True, choices=["tkd", "tikhonov", "cosmos"])
    s.add_argument("--field", action="append", required=True)
    s.add_argument("--b0", action="append", type=_vector)
    s.add_argument("--threshold", type=float, default=0.15)
    s.add_argument("--lambda", dest="lam", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("train", help="train a generator (baseline L1 or full GAN schedule)")
    s.add_argument("--mode", choices=["baseline", "gan"], default="baseline")
    s.add_argument("--config", help="JSON with optional sections gan, generator, critic")
    s.add_argument("--data", required=True, help="subject directory or directory of subjects")
    s.add_argument("--val", help="validation subjects")
    s.add_argument("--init", help="generator checkpoint to start from (gan mode skips the baseline)")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--geometry", type=_geometry)
    s.add_argument("--depth", type=int)
    s.add_argument("--base-channels", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--iters", type=int, help="baseline iterations")
    s.add_argument("--iters-critic", type=int)
    s.add_argument("--iters-joint", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float, help="baseline learning rate")
    s.add_argument("--lr-joint", type=float)
    s.add_argument("--lambda-adv", type=float)
    s.add_argument("--val-every", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="tile, run a generator checkpoint and stitch")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--field", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--geometry", type=_geometry, help="expected IN:OUT; must match the checkpoint")
    s.add_argument("--dump-plan", help="write the tile plan as JSON")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="metric report of a reconstruction against a reference")
    s.add_argument("--recon", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--mask")
    s.add_argument("--space", choices=[sp.value for sp in Space], default=Space.PPM.value)
    s.add_argument("--json", help="write the report here instead of stdout")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="desk-scale method x geometry x seed table")
    s.add_argument("--out", required=True, help="CSV path")
    s.add_argument("--geometries", type=lambda t: [_geometry(g) for g in t.split(",")],
                   default=[PatchGeometry(16, 16), PatchGeometry(24, 16)])
    s.add_argument("--seeds", type=_int_list, default=[0])
    s.add_argument("--methods", default="baseline")
    s.add_argument("--iters", type=int)
    s.add_argument("--desk-config", help="JSON overriding desk experiment settings")
    s.add_argument("--threshold", type=float, default=0.15)
    s.add_argument("--lambda", dest="lam", type=float, default=0.01)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("validate", help="check a field against analytic sphere fields")
    s.add_argument("--field", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--b0", type=_vector, default=Orientation())
    s.add_argument("--tolerance", type=float, default=0.05)
    s.add_argument("--json")
    s.set_defaults(func=cmd_validate)
    return p


_DATA_ERRORS = (QvolFormatError, PhantomSpecError, CheckpointError, StitchError, MetricError, ModelSizeError,
                FileNotFoundError, NotADirectoryError)
_NUMERIC_ERRORS = (TrainingDivergedError, NonPhysicalSpectrumError, FloatingPointError)


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.print_usage(sys.stderr)
        print("qsmforge: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    run = Run(["qsmforge"] + argv)
    try:
        with threadpool_limits(limits=args.threads):
            out = args.func(args, run)
    except CliError as exc:
        if exc.code == EXIT_USAGE:
            parser.print_usage(sys.stderr)
        print(f"qsmforge {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except _NUMERIC_ERRORS as exc:
        print(f"qsmforge {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"qsmforge {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining ValueErrors come from inconsistent inputs (dims, sizes)
        print(f"qsmforge {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if out is not None:
        run.write_manifest(Path(out))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
