"""Operator entry point.

Subcommands: train, eval, sweep, ablate, gradcheck, render. All commands
are non-interactive and exit-code honest; every artifact embeds the config
hash. Output paths resolve under $PARKOUR_OUT_ROOT when set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evaluation, sensors, terrain
from .config import RunConfig, config_hash
from .estimator import Estimator
from .nn import Dense, Conv2d, GRUCell, CrossAttention, grad_check
from .nn import tensor as T
from .nn.tensor import Tensor
from .ppo import Trainer, run_training

GRADCHECK_TOLERANCE = 1e-5


def _out_path(path: str) -> Path:
    root = os.environ.get("PARKOUR_OUT_ROOT")
    p = Path(path)
    return (Path(root) / p) if root and not p.is_absolute() else p


def _load_cfg(args) -> RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        cfg = cfgmod.apply_overrides(cfg, args.set)
    cfgmod.validate(cfg)
    return cfg


# ----------------------------------------------------------------- gradcheck

def gradcheck_suite(seed: int = 0, n_coords: int = 200) -> list[tuple[str, float]]:
    """Finite-difference verification of every layer type plus the full
    estimator training loss. Returns (name, max relative error) rows."""
    rng = np.random.default_rng(seed)
    rows: list[tuple[str, float]] = []

    dense = Dense(6, 5, rng, "gc.dense")
    x = Tensor(rng.standard_normal((4, 6)))
    rows.append(("dense", grad_check(
        lambda: T.tmean(T.square(T.tanh(dense(x)))), dense.parameters(),
        n_coords=n_coords, rng=np.random.default_rng(seed + 1))))

    conv = Conv2d(2, 4, 3, rng, stride=2, padding=1, name="gc.conv")
    xc = Tensor(rng.standard_normal((2, 2, 8, 10)))
    rows.append(("conv2d", grad_check(
        lambda: T.tmean(T.square(T.relu(conv(xc)))), conv.parameters(),
        n_coords=n_coords, rng=np.random.default_rng(seed + 2))))

    gru = GRUCell(5, 7, rng, "gc.gru")
    xg = Tensor(rng.standard_normal((3, 5)))
    hg = Tensor(rng.standard_normal((3, 7)))
    rows.append(("gru_cell", grad_check(
        lambda: T.tmean(T.square(gru(xg, hg))), gru.parameters(),
        n_coords=n_coords, rng=np.random.default_rng(seed + 3))))

    attn = CrossAttention(8, rng, "gc.attn")
    tok = Tensor(rng.standard_normal((2, 5, 8)))
    rows.append(("cross_attention", grad_check(
        lambda: T.tmean(T.square(attn(tok))), attn.parameters(),
        n_coords=n_coords, rng=np.random.default_rng(seed + 4))))

    rows.append(("estimator_loss", estimator_loss_gradcheck(
        seed=seed + 5, n_coords=n_coords)))
    return rows


def estimator_loss_gradcheck(seed: int = 0, n_coords: int = 200,
                             batch: int = 3) -> float:
    """End-to-end check of the full training loss: encoder, latent sample
    (pathwise), all decoder heads."""
    from .config import EstimatorConfig
    cfg = EstimatorConfig()
    rng = np.random.default_rng(seed)
    obs_dim, scan_dim, n_feet = 17, 33, 2
    est = Estimator(cfg, obs_dim, scan_dim, n_feet, (48, 64), rng)

    obs_hist = rng.standard_normal((batch, cfg.history_len * obs_dim))
    depth = rng.uniform(0.1, 3.0, (batch, cfg.depth_frames, 48, 64))
    memory = 0.1 * rng.standard_normal((batch, cfg.gru_hidden))
    eps = rng.standard_normal((batch, cfg.latent_dim))
    t_obs = rng.standard_normal((batch, obs_dim))
    t_scan = rng.standard_normal((batch, scan_dim))
    t_vel = rng.standard_normal((batch, 3))
    t_clr = rng.standard_normal((batch, n_feet))

    def loss_fn():
        out = est.encode(obs_hist, depth, memory, eps)
        return est.loss(out, t_obs, t_scan, t_vel, t_clr).total

    return grad_check(loss_fn, est.parameters(), n_coords=n_coords,
                      rng=np.random.default_rng(seed + 99))


def cmd_gradcheck(args) -> int:
    rows = gradcheck_suite(seed=args.seed, n_coords=args.coords)
    failed = False
    print(f"{'layer':<18} {'max rel err':>12}  status")
    for name, err in rows:
        ok = err < GRADCHECK_TOLERANCE
        failed |= not ok
        print(f"{name:<18} {err:>12.3e}  {'pass' if ok else 'FAIL'}")
    return 1 if failed else 0


# --------------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_path(args.out)
    resume = args.resume
    if resume is None and args.auto_resume and (out / "checkpoint.bin").exists():
        resume = out / "checkpoint.bin"
    run_training(cfg, out, variant=args.variant, resume_from=resume,
                 quiet=args.quiet)
    print(f"done: {out}/checkpoint.bin metrics={out}/metrics.csv "
          f"config_hash={config_hash(cfg)}")
    return 0


# ---------------------------------------------------------------------- eval

def _trainer_from_checkpoint(path: Path, cfg: RunConfig | None,
                             allow_mismatch: bool) -> tuple[Trainer, RunConfig]:
    from .nn.serialize import load_arrays
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta, _ = load_arrays(path)
    ckpt_cfg = cfgmod.from_dict(RunConfig, meta["config"])
    if cfg is not None and config_hash(cfg) != meta["config_hash"]:
        if not allow_mismatch:
            raise ValueError(
                f"config hash {config_hash(cfg)} does not match checkpoint "
                f"{meta['config_hash']}; pass --allow-config-mismatch to use "
                "the supplied config anyway")
    else:
        cfg = ckpt_cfg
    trainer = Trainer(cfg, variant=meta.get("variant", "full"))
    trainer.load_checkpoint(path, strict_hash=(cfg is ckpt_cfg))
    return trainer, cfg


def cmd_eval(args) -> int:
    cfg = cfgmod.load_config(args.config) if args.config else None
    trainer, cfg = _trainer_from_checkpoint(Path(args.checkpoint), cfg,
                                            args.allow_config_mismatch)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    proto = args.protocol
    if proto == "difficulty":
        report = evaluation.evaluate_difficulty(
            cfg, trainer.actor, trainer.estimator, trainer.est_cfg,
            kinds=args.kinds.split(",") if args.kinds else None,
            variant=trainer.variant, checkpoint=str(args.checkpoint))
        report.save(out / "eval_report.json")
        report.save_csv(out / "eval_report.csv")
        for kind, level in report.difficulty.items():
            print(f"{kind}: mean terminated difficulty {level:.2f}")
    elif proto.startswith("noise:"):
        _, axis, values = proto.split(":", 2)
        magnitudes = [float(v) for v in values.split(",")]
        curve = evaluation.noise_sweep(cfg, trainer.actor, trainer.estimator,
                                       trainer.est_cfg, axis, magnitudes,
                                       kinds=args.kinds.split(",") if args.kinds else None)
        report = evaluation.EvalReport(config_hash=config_hash(cfg),
                                       checkpoint=str(args.checkpoint),
                                       variant=trainer.variant,
                                       noise_curves={axis: curve})
        report.save(out / "eval_report.json")
        report.save_csv(out / "eval_report.csv")
        for row in curve:
            print(f"{axis}={row['magnitude']:g}: success {row['success_rate']:.3f}")
    elif proto.startswith("trace"):
        parts = proto.split(":")
        kind = parts[1] if len(parts) > 1 else "flat"
        level = int(parts[2]) if len(parts) > 2 else 1
        evaluation.trace_episode(cfg, trainer.actor, trainer.estimator,
                                 trainer.est_cfg, out / "trace.csv",
                                 kind=kind, level=level, seed=cfg.seed)
        print(f"trace written to {out}/trace.csv")
    else:
        print(f"unknown protocol {proto!r}", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args) -> int:
    cfg = cfgmod.load_config(args.config) if args.config else None
    trainer, cfg = _trainer_from_checkpoint(Path(args.checkpoint), cfg,
                                            args.allow_config_mismatch)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    magnitudes = [float(v) for v in args.values.split(",")]
    curves = {}
    for axis in args.axes.split(","):
        curves[axis] = evaluation.noise_sweep(
            cfg, trainer.actor, trainer.estimator, trainer.est_cfg,
            axis, magnitudes,
            kinds=args.kinds.split(",") if args.kinds else None)
    report = evaluation.EvalReport(config_hash=config_hash(cfg),
                                   checkpoint=str(args.checkpoint),
                                   variant=trainer.variant, noise_curves=curves)
    report.save(out / "sweep_report.json")
    report.save_csv(out / "sweep_report.csv")
    print(f"sweep written to {out}/sweep_report.json")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_path(args.out)
    variants = args.variants.split(",")
    reports = evaluation.ablation_matrix(cfg, variants, out,
                                         kinds=args.kinds.split(",") if args.kinds else None,
                                         train=not args.eval_only,
                                         quiet=args.quiet)
    for variant, report in reports.items():
        print(variant, {k: round(v, 2) for k, v in report.difficulty.items()})
    return 0


# -------------------------------------------------------------------- render

def cmd_render(args) -> int:
    cfg = _load_cfg(args)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    field = terrain.generate_track(args.kind, args.level, args.seed,
                                   randomize=not args.no_randomize,
                                   cfg=cfg.terrain)
    terrain.save_csv(field, out / "heightfield.csv", meta=f"config_hash={chash}")
    terrain.save_binary(field, out / "heightfield.bin")

    intr = sensors.CameraIntrinsics(
        hfov=np.radians(87.0), width=cfg.sensor.image_width,
        height=cfg.sensor.image_height, depth_min=cfg.sensor.depth_min,
        depth_max=cfg.sensor.depth_max)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([args.seed, 55])))
    for k, x in enumerate(np.linspace(0.5, field.extent_x - 1.5, args.frames)):
        ground = float(terrain.height_at(field, x, field.extent_y / 2))
        pose = sensors.CameraPose(x, field.extent_y / 2,
                                  ground + cfg.robot.hip_height + cfg.sensor.cam_offset_z,
                                  cfg.sensor.cam_pitch)
        img = sensors.render_depth(field, pose, intr)
        img = sensors.apply_camera_noise(img, cfg.sensor.noise, rng,
                                         field=field, pose=pose, intr=intr)
        sensors.save_pgm(img, out / f"depth_{k:02d}.pgm",
                         comment=f"config_hash={chash} x={x:.2f}")
    print(f"wrote heightfield.csv/.bin and {args.frames} depth frames to {out}")
    return 0


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parkour",
                                description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train policy + estimator")
    t.add_argument("--config", help="JSON run config (defaults shipped)")
    t.add_argument("--out", default="runs/train", help="output directory")
    t.add_argument("--variant", default="full",
                   help="estimator ablation variant")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--auto-resume", action="store_true",
                   help="resume from <out>/checkpoint.bin when present")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override config values (dotted keys)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("protocol",
                   help="difficulty | noise:AXIS:v1,v2,... | trace[:kind[:level]]")
    e.add_argument("--config", help="config to verify against the checkpoint")
    e.add_argument("--kinds", help="comma-separated terrain kinds")
    e.add_argument("--out", default="runs/eval")
    e.add_argument("--allow-config-mismatch", action="store_true")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="camera-noise success sweeps")
    s.add_argument("checkpoint")
    s.add_argument("--axes", default="lag,position,pitch,gaussian,salt_pepper")
    s.add_argument("--values", default="0,0.02,0.05,0.1")
    s.add_argument("--kinds")
    s.add_argument("--config")
    s.add_argument("--out", default="runs/sweep")
    s.add_argument("--allow-config-mismatch", action="store_true")
    s.set_defaults(fn=cmd_sweep)

    a = sub.add_parser("ablate", help="train + compare estimator variants")
    a.add_argument("--config")
    a.add_argument("--variants", default="full,no_heightmap")
    a.add_argument("--kinds")
    a.add_argument("--out", default="runs/ablate")
    a.add_argument("--eval-only", action="store_true",
                   help="reuse existing checkpoints instead of retraining")
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(fn=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient table")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--coords", type=int, default=200)
    g.set_defaults(fn=cmd_gradcheck)

    r = sub.add_parser("render", help="dump a terrain CSV and depth frames")
    r.add_argument("--config")
    r.add_argument("--kind", default="gap")
    r.add_argument("--level", type=int, default=5)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--frames", type=int, default=4)
    r.add_argument("--no-randomize", action="store_true")
    r.add_argument("--out", default="runs/render")
    r.add_argument("--set", action="append", metavar="KEY=VALUE")
    r.set_defaults(fn=cmd_render)

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
