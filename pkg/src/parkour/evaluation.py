"""Evaluation protocols: terminated-difficulty columns, camera-noise
success sweeps, and the ablation comparison harness.

Success everywhere means the same thing: the robot traverses at least
``eval.success_frac`` of the track without a fall/collision termination.
Every number in a report is traceable to the seeds recorded next to it.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import PolicyNet
from .config import RunConfig, config_hash
from .estimator import Estimator, EstimatorConfig
from .nn import tensor as T
from .world import REWARD_NAMES, ParkourWorld

NOISE_AXES = {
    "lag": "lag_offset",
    "position": "position_noise_max",
    "pitch": "pitch_noise_max",
    "gaussian": "gaussian_std",
    "salt_pepper": "salt_pepper_prob",
}


@dataclass
class EvalReport:
    config_hash: str
    checkpoint: str = ""
    variant: str = "full"
    difficulty: dict[str, float] = field(default_factory=dict)     # kind -> mean level
    difficulty_seeds: dict[str, list[int]] = field(default_factory=dict)
    noise_curves: dict[str, list[dict]] = field(default_factory=dict)  # axis -> rows
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def save_csv(self, path: str | Path) -> None:
        """Plot-ready long format: one row per (protocol, axis, magnitude, seed)."""
        lines = [f"# config_hash={self.config_hash} variant={self.variant}",
                 "protocol,axis,magnitude,seed,value"]
        for kind, level in self.difficulty.items():
            seeds = ";".join(str(s) for s in self.difficulty_seeds.get(kind, []))
            lines.append(f"difficulty,{kind},,{seeds},{level:.6g}")
        for axis, rows in self.noise_curves.items():
            for row in rows:
                lines.append(f"noise,{axis},{row['magnitude']:.6g},"
                             f"{row['seed']},{row['success_rate']:.6g}")
        Path(path).write_text("\n".join(lines) + "\n")


class Pilot:
    """Drives trained actor+estimator against a world, managing histories."""

    def __init__(self, world: ParkourWorld, actor: PolicyNet, estimator: Estimator,
                 est_cfg: EstimatorConfig, deterministic: bool = True, seed: int = 0):
        self.world = world
        self.actor = actor
        self.estimator = estimator
        self.est_cfg = est_cfg
        self.deterministic = deterministic
        ss = np.random.SeedSequence([seed & 0xFFFFFFFF, 301])
        self.rng = np.random.Generator(np.random.PCG64(ss))
        n = world.n
        self.hist = np.zeros((n, est_cfg.history_len, world.layout.total))
        self.memory = estimator.initial_memory(n)

    def clear(self, ids) -> None:
        self.hist[ids] = 0.0
        self.memory[ids] = 0.0

    def act(self) -> np.ndarray:
        obs = self.world.observe()
        self.hist = np.roll(self.hist, 1, axis=1)
        self.hist[:, 0] = obs
        depth = np.stack([self.world.frame_now, self.world.frame_prev], axis=1)
        eps = None
        if not self.deterministic or self.est_cfg.sample_latent_in_eval:
            eps = self.rng.standard_normal((self.world.n, self.est_cfg.latent_dim))
        with T.no_grad():
            out = self.estimator.encode(self.hist.reshape(self.world.n, -1),
                                        depth, self.memory, eps)
            if self.est_cfg.feed_next_obs_to_policy:
                pred = self.estimator.decode_next_obs(out.z, out.velocity,
                                                      out.clearance, out.terrain_latent)
                feed = out.policy_feed(pred)
            else:
                feed = out.policy_feed()
        self.memory = out.memory.data.copy()
        actions, _ = self.actor.act(obs, feed,
                                    None if self.deterministic else self.rng,
                                    deterministic=self.deterministic)
        return actions


def _column_seed(base_seed: int, kind: str, set_idx: int) -> int:
    kinds = ("flat", "gap", "step", "hurdle", "stairs")
    return (base_seed * 1000003 + kinds.index(kind) * 101 + set_idx) & 0x7FFFFFFF


def mean_terminated_difficulty(cfg: RunConfig, actor: PolicyNet,
                               estimator: Estimator, est_cfg: EstimatorConfig,
                               kind: str, n_sets: int | None = None,
                               n_robots: int | None = None,
                               pilot_factory=None) -> tuple[float, list[int]]:
    """Column protocol: every robot starts at level 1 and climbs its column
    until a termination (or a failed/timed-out level) stops it; report the
    mean final level. ``pilot_factory(world, seed)`` lets tests substitute
    scripted controllers."""
    ev = cfg.eval
    n_sets = n_sets or ev.n_sets
    n_robots = n_robots or ev.n_robots
    finals = []
    seeds = []
    for set_idx in range(n_sets):
        seed = _column_seed(cfg.seed, kind, set_idx)
        seeds.append(seed)
        world = ParkourWorld(cfg, n_envs=n_robots, seed=seed, kinds=[kind],
                             fixed_level=1, use_curriculum=False,
                             episode_length_s=ev.episode_length_s)
        if pilot_factory is not None:
            pilot = pilot_factory(world, seed)
        else:
            pilot = Pilot(world, actor, estimator, est_cfg, deterministic=True,
                          seed=seed)
        active = np.ones(n_robots, dtype=bool)
        final = np.ones(n_robots, dtype=np.float64)
        while active.any():
            actions = pilot.act()
            actions[~active] = 0.0
            info = world.step(actions, auto_reset=False)
            done = info["done"] & active
            for i in np.flatnonzero(done):
                level = int(world.level[i])
                success = (info["traversed"][i] >= ev.success_frac
                           and not info["terminated"][i])
                if success and level < ev.max_level:
                    world.level[i] = level + 1
                    world.reset(np.array([i]))
                    pilot.clear(np.array([i]))
                else:
                    final[i] = level
                    active[i] = False
        finals.append(final.mean())
    return float(np.mean(finals)), seeds


def success_rate(cfg: RunConfig, actor: PolicyNet, estimator: Estimator,
                 est_cfg: EstimatorConfig, kinds: list[str], level: int,
                 seed: int, n_robots: int | None = None) -> float:
    """Fraction of fixed-level episodes traversed without termination."""
    ev = cfg.eval
    n_robots = n_robots or ev.n_robots
    outcomes = []
    for kind in kinds:
        world = ParkourWorld(cfg, n_envs=n_robots, seed=seed, kinds=[kind],
                             fixed_level=level, use_curriculum=False,
                             episode_length_s=ev.episode_length_s)
        pilot = Pilot(world, actor, estimator, est_cfg, deterministic=True, seed=seed)
        pending = np.ones(n_robots, dtype=bool)
        while pending.any():
            actions = pilot.act()
            actions[~pending] = 0.0
            info = world.step(actions, auto_reset=False)
            done = info["done"] & pending
            for i in np.flatnonzero(done):
                ok = (info["traversed"][i] >= ev.success_frac
                      and not info["terminated"][i])
                outcomes.append(bool(ok))
                pending[i] = False
    return float(np.mean(outcomes))


def noise_sweep(cfg: RunConfig, actor: PolicyNet, estimator: Estimator,
                est_cfg: EstimatorConfig, axis: str, values: list[float],
                kinds: list[str] | None = None,
                level: int | None = None) -> list[dict]:
    """Success-rate curve along one camera-corruption axis."""
    if axis not in NOISE_AXES:
        raise ValueError(f"unknown noise axis {axis!r}; expected one of "
                         f"{sorted(NOISE_AXES)}")
    kinds = kinds or [k for k in cfg.terrain_kinds if k != "flat"] or ["flat"]
    level = level if level is not None else cfg.eval.max_level
    curve = []
    for magnitude in values:
        noise = dataclasses.replace(cfg.sensor.noise, **{NOISE_AXES[axis]: magnitude})
        sweep_cfg = dataclasses.replace(
            cfg, sensor=dataclasses.replace(cfg.sensor, noise=noise))
        seed = _column_seed(cfg.seed, kinds[0], 777)
        rate = success_rate(sweep_cfg, actor, estimator, est_cfg, kinds,
                            level, seed)
        curve.append({"magnitude": float(magnitude), "seed": seed,
                      "success_rate": rate})
    return curve


def evaluate_difficulty(cfg: RunConfig, actor, estimator, est_cfg,
                        kinds: list[str] | None = None, variant: str = "full",
                        checkpoint: str = "") -> EvalReport:
    report = EvalReport(config_hash=config_hash(cfg), checkpoint=checkpoint,
                        variant=variant)
    for kind in kinds or list(cfg.terrain_kinds):
        level, seeds = mean_terminated_difficulty(cfg, actor, estimator,
                                                  est_cfg, kind)
        report.difficulty[kind] = level
        report.difficulty_seeds[kind] = seeds
    return report


def ablation_matrix(base_cfg: RunConfig, variants: list[str], out_dir: str | Path,
                    kinds: list[str] | None = None,
                    train: bool = True, quiet: bool = True) -> dict[str, EvalReport]:
    """Train (or load) each estimator variant under identical seeds and
    report their column difficulties side by side."""
    from .ppo import Trainer, run_training
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports: dict[str, EvalReport] = {}
    for variant in ["full"] + [v for v in variants if v != "full"]:
        vdir = out / variant
        ckpt = vdir / "checkpoint.bin"
        if train or not ckpt.exists():
            trainer = run_training(base_cfg, vdir, variant=variant, quiet=quiet)
        else:
            trainer = Trainer(base_cfg, variant=variant)
            trainer.load_checkpoint(ckpt)
        report = evaluate_difficulty(base_cfg, trainer.actor, trainer.estimator,
                                     trainer.est_cfg, kinds=kinds, variant=variant,
                                     checkpoint=str(ckpt))
        report.save(vdir / "eval_report.json")
        reports[variant] = report
    combined = {v: dataclasses.asdict(r) for v, r in reports.items()}
    (out / "ablation_report.json").write_text(json.dumps(combined, indent=2,
                                                         sort_keys=True) + "\n")
    return reports


def trace_episode(cfg: RunConfig, actor, estimator, est_cfg, path: str | Path,
                  kind: str = "flat", level: int = 1, seed: int = 0,
                  max_steps: int | None = None) -> None:
    """Run one deterministic episode and dump a per-step CSV trace."""
    world = ParkourWorld(cfg, n_envs=1, seed=seed, kinds=[kind], fixed_level=level,
                         use_curriculum=False)
    pilot = Pilot(world, actor, estimator, est_cfg, deterministic=True, seed=seed)
    header = (["t", "x", "z", "pitch", "vx", "vz", "pitch_rate"]
              + [f"q{j}" for j in range(cfg.robot.n_joints)]
              + [f"reward_{k}" for k in REWARD_NAMES]
              + ["reward_total", "terminated", "timeout"])
    lines = [f"# config_hash={config_hash(cfg)} kind={kind} level={level} seed={seed}",
             ",".join(header)]
    steps = max_steps or world.max_steps
    for _ in range(steps):
        actions = pilot.act()
        info = world.step(actions, auto_reset=False)
        r = info["reward"]
        vals = [world.time[0], world.com[0, 0], world.com[0, 1], world.pitch[0],
                world.vel[0, 0], world.vel[0, 1], world.pitch_rate[0]]
        vals += list(world.q[0])
        vals += [float(r.terms[k][0]) for k in REWARD_NAMES]
        vals += [float(r.total[0]), float(info["terminated"][0]),
                 float(info["timeout"][0])]
        lines.append(",".join(f"{v:.8g}" for v in vals))
        if info["done"][0]:
            break
    world.export_domains_json(Path(path).with_suffix(".domains.json"),
                              {"config_hash": config_hash(cfg)})
    Path(path).write_text("\n".join(lines) + "\n")
