"""Run configuration: dataclass tree, strict JSON round-trip, content hash.

Every artifact a run produces (metrics CSV, checkpoints, reports, renders)
embeds ``config_hash(cfg)`` so results stay traceable to the exact settings
that produced them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

Range = tuple[float, float]


@dataclass(frozen=True)
class RobotConfig:
    """Planar quadruped-lite: rigid box body, 2 sagittal legs x 2 pitch joints.

    Legs are front/rear pairs collapsed into the sagittal plane. Masses,
    peak torque and hip height follow a 12.7 kg low-cost quadruped; joint
    geometry is chosen so the standing hip height is 0.25 m.
    """

    n_joints: int = 4                 # (hip_f, knee_f, hip_r, knee_r)
    thigh_length: float = 0.17678
    shank_length: float = 0.17678
    hip_spacing: float = 0.34         # distance between hip joints [m]
    body_length: float = 0.44         # contact hull length [m]
    body_height: float = 0.12         # contact hull height [m]
    mass: float = 12.7
    pitch_inertia: float = 0.32       # body box + leg contribution [kg m^2]
    leg_inertia: float = 0.03         # reflected inertia per joint [kg m^2]
    tau_max: float = 30.5
    kp: float = 80.0                  # base PD gains, scaled by domain factors
    kd: float = 2.0
    stand_pose: tuple[float, ...] = (0.7854, -1.44, 0.7854, -1.44)
    joint_lower: tuple[float, ...] = (-0.9, -2.7, -0.9, -2.7)
    joint_upper: tuple[float, ...] = (2.4, -0.25, 2.4, -0.25)
    action_bound: float = 1.5         # |a| cap before joint-limit clamp [rad]
    hip_height: float = 0.25
    paw_half_len: float = 0.045       # toe/heel contact offset per foot [m]


@dataclass(frozen=True)
class TerrainConfig:
    resolution: float = 0.025         # meters per grid cell
    extent_x: float = 10.0
    extent_y: float = 1.0
    spawn_pad: float = 1.5            # flat pad at track start [m]
    n_features: int = 4               # obstacles per track
    feature_spacing: float = 1.5      # gap between consecutive obstacles [m]
    jitter_frac: float = 0.20         # per-feature size jitter when randomized
    # Level-1 minima; level-10 maxima are the published terrain limits.
    gap_width_min: float = 0.1
    gap_width_max: float = 1.0
    gap_depth_min: float = 0.2
    gap_depth_max: float = 0.8
    step_height_min: float = 0.1
    step_height_max: float = 0.75
    hurdle_height_min: float = 0.1
    hurdle_height_max: float = 0.75
    stair_rise_min: float = 0.08
    stair_rise_max: float = 0.25
    stair_run: float = 0.30
    promote_frac: float = 0.8         # traversed fraction -> level up
    demote_frac: float = 0.4          # traversed fraction -> level down


@dataclass(frozen=True)
class NoiseConfig:
    """Depth-camera corruption magnitudes; all zero = bitwise identity."""

    lag_offset: float = 0.0           # re-render shifted along -x [m]
    position_noise_max: float = 0.0   # uniform per-axis pose jitter [m]
    pitch_noise_max: float = 0.0      # uniform pitch jitter [rad]
    gaussian_std: float = 0.0         # additive per-pixel noise [m]
    salt_pepper_prob: float = 0.0     # pixel -> min/max depth probability


@dataclass(frozen=True)
class SensorConfig:
    image_width: int = 64
    image_height: int = 48
    depth_min: float = 0.1
    depth_max: float = 3.0
    cam_offset_x: float = 0.22        # nominal mount, body frame [m]
    cam_offset_z: float = 0.08
    cam_pitch: float = 0.52           # nominal downward pitch [rad]
    frame_interval: int = 5           # control steps between depth frames
    scan_points: int = 33
    scan_x_min: float = -0.5          # height-scan span ahead of base [m]
    scan_x_max: float = 1.5
    scan_clip: float = 1.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)


@dataclass(frozen=True)
class DomainRandConfig:
    """Episode-level randomization ranges (physical + sensor parameters)."""

    payload_kg: Range = (-1.0, 2.0)
    kp_factor: Range = (0.9, 1.1)
    kd_factor: Range = (0.9, 1.1)
    motor_strength_factor: Range = (0.9, 1.1)
    com_shift_m: Range = (-0.05, 0.05)
    friction: Range = (0.2, 1.2)
    init_joint_factor: Range = (0.5, 1.5)
    system_delay_s: Range = (0.0, 0.015)
    cam_position_m: Range = (-0.01, 0.01)           # per axis x, y, z
    cam_pitch_rad: Range = (-0.017453, 0.017453)    # +/- 1 deg
    cam_hfov_rad: Range = (1.501, 1.536)            # 86..88 deg


@dataclass(frozen=True)
class WorldConfig:
    control_dt: float = 0.02
    substeps: int = 4
    gravity: float = 9.81
    contact_stiffness: float = 5.0e3
    contact_damping: float = 100.0
    tangential_damping: float = 200.0
    joint_friction: float = 0.1
    episode_length_s: float = 10.0
    settle_steps: int = 120           # substeps run at reset to reach rest
    # Termination thresholds (declared defaults, not from the robot spec).
    fall_pitch: float = 1.0
    min_base_clearance: float = 0.05
    collision_persist_s: float = 0.1
    cmd_vx: Range = (0.0, 1.5)
    cmd_yaw: Range = (-1.2, 1.2)


@dataclass(frozen=True)
class EstimatorConfig:
    history_len: int = 10             # proprioceptive history H1
    depth_frames: int = 2             # stacked depth frames H2
    latent_dim: int = 32              # sampled latent z
    terrain_latent_dim: int = 64      # encoded height-map latent
    gru_hidden: int = 128
    proprio_hidden: int = 128
    proprio_embed: int = 64
    conv_channels: tuple[int, ...] = (8, 16)
    token_patch: int = 4              # feature-map patch size per visual token
    attn_dim: int = 64
    decoder_hidden: int = 128
    learning_rate: float = 1.0e-3
    # Head toggles: disabling removes that term from the training loss only.
    learn_next_obs: bool = True
    learn_heightmap: bool = True
    learn_velocity: bool = True
    learn_clearance: bool = True
    # Policy consumes predicted next observation instead of the latent z.
    feed_next_obs_to_policy: bool = False
    sample_latent_in_eval: bool = False


@dataclass(frozen=True)
class PPOConfig:
    horizon: int = 24
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    learning_rate: float = 3.0e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    max_grad_norm: float = 1.0
    init_log_std: float = -1.0
    min_log_std: float = -4.0
    actor_hidden: tuple[int, ...] = (128, 128)
    critic_hidden: tuple[int, ...] = (128, 128)


@dataclass(frozen=True)
class EvalConfig:
    n_sets: int = 4                   # terrain seeds per kind (paper-scale: 40)
    n_robots: int = 16                # robots per set (paper-scale: 100)
    success_frac: float = 0.95        # traversed fraction counted as success
    max_level: int = 10
    episode_length_s: float = 20.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_envs: int = 64
    iterations: int = 300
    workers: int = 1
    checkpoint_every: int = 50
    terrain_kinds: tuple[str, ...] = ("flat",)
    out_dir: str = "runs/default"
    robot: RobotConfig = field(default_factory=RobotConfig)
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    domain_rand: DomainRandConfig = field(default_factory=DomainRandConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def to_dict(cfg) -> dict:
    """Dataclass tree -> plain dict (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _coerce(ftype, value, path: str):
    origin = typing.get_origin(ftype)
    if dataclasses.is_dataclass(ftype):
        return from_dict(ftype, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{path}: expected a sequence, got {value!r}")
        return tuple(value)
    if ftype is float and isinstance(value, (int, float)):
        return float(value)
    return value


def from_dict(cls, data: dict, path: str = "config"):
    """Strict dict -> dataclass: unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{path}.{name}")
    return cls(**kwargs)


_RUN_CONTROL_KEYS = ("iterations", "out_dir", "workers", "checkpoint_every")


def config_hash(cfg: RunConfig) -> str:
    """Stable content hash of the configuration.

    Run-control knobs that cannot change results (iteration budget, output
    paths, worker count, checkpoint cadence) are excluded, so extending or
    relocating a run keeps its identity.
    """
    data = to_dict(cfg)
    for key in _RUN_CONTROL_KEYS:
        data.pop(key, None)
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2) + "\n")


def load_config(path: str | Path) -> RunConfig:
    return from_dict(RunConfig, json.loads(Path(path).read_text()))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``dotted.key=value`` overrides on top of a config."""
    data = to_dict(cfg)
    for item in overrides:
        key, _, raw = item.partition("=")
        if not _ or not key:
            raise ValueError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node:
                raise ValueError(f"override {item!r}: no such key {part!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ValueError(f"override {item!r}: no such key {leaf!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node[leaf] = value
    return from_dict(RunConfig, data)


def validate(cfg: RunConfig) -> None:
    """Reject configurations that cannot produce a well-posed run."""
    if cfg.n_envs < 1 or cfg.iterations < 0 or cfg.workers < 1:
        raise ValueError("n_envs/iterations/workers must be positive")
    if cfg.terrain.resolution <= 0:
        raise ValueError("terrain.resolution must be positive")
    if cfg.sensor.depth_min >= cfg.sensor.depth_max:
        raise ValueError("sensor depth clip range is empty")
    noise = cfg.sensor.noise
    if min(noise.lag_offset, noise.position_noise_max, noise.pitch_noise_max,
           noise.gaussian_std, noise.salt_pepper_prob) < 0:
        raise ValueError("noise magnitudes must be non-negative")
    if noise.salt_pepper_prob > 1.0:
        raise ValueError("salt_pepper_prob must be <= 1")
    for name in ("payload_kg", "kp_factor", "kd_factor", "motor_strength_factor",
                 "com_shift_m", "friction", "init_joint_factor", "system_delay_s",
                 "cam_position_m", "cam_pitch_rad", "cam_hfov_rad"):
        lo, hi = getattr(cfg.domain_rand, name)
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise ValueError(f"domain_rand.{name}: bad range ({lo}, {hi})")
    for kind in cfg.terrain_kinds:
        if kind not in ("flat", "gap", "step", "hurdle", "stairs"):
            raise ValueError(f"unknown terrain kind {kind!r}")
