"""Deterministic planar quadruped-lite simulation.

Body: rigid box with 3 DOF (x, z, pitch). Legs: front/rear, each a
2-joint (hip, knee) chain treated as massless with reflected joint
inertia; contact forces at feet/knees pass to the body directly and load
the joints through the leg Jacobian transpose. Ground contact is a
penalty spring-damper against the height field with a Coulomb friction
bound. Control runs at 50 Hz over semi-implicit Euler substeps at 200 Hz.

Everything is batched over environments; per-env math is elementwise, so
stepping a subset of environments (or sharding across workers) produces
bit-identical trajectories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from .config import DomainRandConfig, RobotConfig, RunConfig, WorldConfig
from .sensors import (CameraIntrinsics, CameraPose, DepthImage, ObsLayout,
                      apply_pixel_noise, assemble_obs, corrupt_pose,
                      gravity_in_body, height_scan, render_depth)
from .terrain import (HeightField, curriculum_update, generate_track,
                      height_at)

N_CONTACTS = 10         # paw toe/heel per foot(4), knees(2), body corners(4)
PAW_SLICE = slice(0, 4)
KNEE_SLICE = slice(4, 6)
NON_FOOT_START = 4

REWARD_NAMES = ("lin_tracking", "ang_tracking", "lin_vel_z", "ang_vel_xy",
                "orientation", "joint_acc", "joint_power", "collision",
                "action_rate", "smoothness")
REWARD_WEIGHTS = {
    "lin_tracking": 1.5,
    "ang_tracking": 0.5,
    "lin_vel_z": -1.0,
    "ang_vel_xy": -0.05,
    "orientation": -1.0,
    "joint_acc": -2.5e-7,
    "joint_power": -2.0e-5,
    # Listed as equation -n with weight -10; implemented as the evident
    # intent: a penalty of 10 per non-foot contact point.
    "collision": -10.0,
    "action_rate": -0.01,
    "smoothness": -0.01,
}


class SimulationError(RuntimeError):
    """A physics step produced a non-finite state (integrator/tuning bug)."""


@dataclass(frozen=True)
class DomainSample:
    """One episode's randomized physical and sensor parameters."""

    payload: float
    kp_factor: float
    kd_factor: float
    motor_strength: float
    com_shift: float
    friction: float
    init_joint_factor: float
    system_delay: float
    cam_offset: tuple[float, float, float]
    cam_pitch_offset: float
    cam_hfov: float

    def as_dict(self) -> dict:
        return {
            "payload": self.payload, "kp_factor": self.kp_factor,
            "kd_factor": self.kd_factor, "motor_strength": self.motor_strength,
            "com_shift": self.com_shift, "friction": self.friction,
            "init_joint_factor": self.init_joint_factor,
            "system_delay": self.system_delay, "cam_offset": list(self.cam_offset),
            "cam_pitch_offset": self.cam_pitch_offset, "cam_hfov": self.cam_hfov,
        }


def randomize_domain(ranges: DomainRandConfig, rng: np.random.Generator) -> DomainSample:
    """Draw one domain sample, every field i.i.d. uniform in its range."""
    u = lambda r: float(rng.uniform(r[0], r[1]))
    return DomainSample(
        payload=u(ranges.payload_kg),
        kp_factor=u(ranges.kp_factor),
        kd_factor=u(ranges.kd_factor),
        motor_strength=u(ranges.motor_strength_factor),
        com_shift=u(ranges.com_shift_m),
        friction=u(ranges.friction),
        init_joint_factor=u(ranges.init_joint_factor),
        system_delay=u(ranges.system_delay_s),
        cam_offset=(u(ranges.cam_position_m), u(ranges.cam_position_m),
                    u(ranges.cam_position_m)),
        cam_pitch_offset=u(ranges.cam_pitch_rad),
        cam_hfov=u(ranges.cam_hfov_rad),
    )


def sample_command(rng: np.random.Generator, world: WorldConfig = WorldConfig()) -> np.ndarray:
    """(forward velocity, yaw rate) command; yaw is stored but inert in-plane."""
    vx = rng.uniform(world.cmd_vx[0], world.cmd_vx[1])
    yaw = rng.uniform(world.cmd_yaw[0], world.cmd_yaw[1])
    return np.array([vx, yaw])


def apply_action(action: np.ndarray, robot: RobotConfig) -> np.ndarray:
    """Action is a bias on the standstill pose, then clamped to joint limits."""
    a = np.clip(np.asarray(action, dtype=np.float64),
                -robot.action_bound, robot.action_bound)
    target = np.asarray(robot.stand_pose) + a
    return np.clip(target, robot.joint_lower, robot.joint_upper)


def pd_torque(target, q, qd, kp, kd, tau_max, strength=1.0):
    """Saturated PD joint torque."""
    tau = kp * (np.asarray(target) - np.asarray(q)) - kd * np.asarray(qd)
    limit = tau_max * strength
    return np.clip(tau, -limit, limit)


@dataclass
class RewardInputs:
    """Signals one reward evaluation needs; planar envs fill the inert
    lateral/yaw channels with zeros."""

    cmd_vel_xy: np.ndarray      # (..., 2)
    cmd_yaw: np.ndarray         # (...,)
    vel_xy: np.ndarray          # (..., 2)
    vel_z: np.ndarray
    ang_vel_xy: np.ndarray      # (..., 2) roll/pitch rates
    yaw_rate: np.ndarray
    gravity_tilt: np.ndarray    # (..., 2) tilt components of body-frame gravity
    qdd: np.ndarray             # (..., nj)
    tau: np.ndarray
    qd: np.ndarray
    n_collision: np.ndarray
    action: np.ndarray
    action_prev: np.ndarray
    action_prev2: np.ndarray


@dataclass
class RewardTerms:
    terms: dict[str, np.ndarray]
    total: np.ndarray


def compute_reward(inp: RewardInputs,
                   weights: dict[str, float] = REWARD_WEIGHTS) -> RewardTerms:
    """All ten reward rows plus their weighted sum."""
    sq = lambda v: np.sum(np.square(v), axis=-1)
    terms = {
        "lin_tracking": np.exp(-4.0 * sq(inp.cmd_vel_xy - inp.vel_xy)),
        "ang_tracking": np.exp(-4.0 * np.square(inp.cmd_yaw - inp.yaw_rate)),
        "lin_vel_z": np.square(inp.vel_z),
        "ang_vel_xy": sq(inp.ang_vel_xy),
        "orientation": sq(inp.gravity_tilt),
        "joint_acc": sq(inp.qdd),
        "joint_power": np.sum(np.abs(inp.tau) * np.abs(inp.qd), axis=-1),
        "collision": np.asarray(inp.n_collision, dtype=np.float64),
        "action_rate": sq(inp.action - inp.action_prev),
        "smoothness": sq(inp.action - 2.0 * inp.action_prev + inp.action_prev2),
    }
    total = sum(weights[k] * terms[k] for k in REWARD_NAMES)
    return RewardTerms(terms=terms, total=total)


@dataclass
class SimState:
    """Read-only snapshot of one environment (for tests and traces)."""

    base_pos: np.ndarray        # (2,) CoM x, z
    pitch: float
    base_vel: np.ndarray        # (2,)
    pitch_rate: float
    q: np.ndarray               # (4,)
    qd: np.ndarray
    foot_pos: np.ndarray        # (2, 2) world (x, z) per foot
    contact: np.ndarray         # (N_CONTACTS,) bool
    prev_action: np.ndarray
    prev_action2: np.ndarray
    time: float
    command: np.ndarray         # (2,) vx, yaw
    domain: DomainSample | None = None

    @property
    def velocity3(self) -> np.ndarray:
        """(vx, vy, vz) with the inert lateral channel zero-filled."""
        return np.array([self.base_vel[0], 0.0, self.base_vel[1]])


class ParkourWorld:
    """Batched planar environments over per-env curriculum tracks."""

    def __init__(self, cfg: RunConfig, n_envs: int | None = None,
                 seed: int | None = None, kinds: Sequence[str] | None = None,
                 fixed_level: int | None = None, use_curriculum: bool = True,
                 randomize_terrain: bool = True, randomize_domain_params: bool = True,
                 episode_length_s: float | None = None):
        self.cfg = cfg
        self.robot = cfg.robot
        self.world = cfg.world
        self.sensor = cfg.sensor
        self.n = n_envs if n_envs is not None else cfg.n_envs
        self.seed = cfg.seed if seed is None else seed
        self.kinds = list(kinds if kinds is not None else cfg.terrain_kinds)
        self.fixed_level = fixed_level
        self.use_curriculum = use_curriculum and fixed_level is None
        self.randomize_terrain = randomize_terrain
        self.randomize_domain_params = randomize_domain_params
        self.contacts_enabled = True
        self.layout = ObsLayout.planar(self.robot.n_joints)

        ep_s = episode_length_s if episode_length_s is not None else self.world.episode_length_s
        self.max_steps = int(round(ep_s / self.world.control_dt))
        self.substep_dt = self.world.control_dt / self.world.substeps

        n = self.n
        nj = self.robot.n_joints
        self.level = np.ones(n, dtype=np.int64) if fixed_level is None \
            else np.full(n, fixed_level, dtype=np.int64)
        self.env_kind = [self.kinds[i % len(self.kinds)] for i in range(n)]
        self.episode_idx = np.zeros(n, dtype=np.int64)

        self.com = np.zeros((n, 2))
        self.pitch = np.zeros(n)
        self.vel = np.zeros((n, 2))
        self.pitch_rate = np.zeros(n)
        self.q = np.zeros((n, nj))
        self.qd = np.zeros((n, nj))
        self.qd_prev = np.zeros((n, nj))
        self.tau = np.zeros((n, nj))
        self.action_prev = np.zeros((n, nj))
        self.action_prev2 = np.zeros((n, nj))
        self.cur_target = np.zeros((n, nj))
        self.pending_target = np.zeros((n, nj))
        self.pending_time = np.full(n, np.inf)
        self.time = np.zeros(n)
        self.step_count = np.zeros(n, dtype=np.int64)
        self.command = np.zeros((n, 2))
        self.collision_timer = np.zeros(n)
        self.n_collision = np.zeros(n, dtype=np.int64)
        self.contact_flags = np.zeros((n, N_CONTACTS), dtype=bool)
        self.spawn_x = np.zeros(n)

        # Domain sample, unpacked to arrays for vectorized stepping.
        self.domains: list[DomainSample | None] = [None] * n
        self.payload = np.zeros(n)
        self.kp_eff = np.full(n, self.robot.kp)
        self.kd_eff = np.full(n, self.robot.kd)
        self.motor_f = np.ones(n)
        self.com_shift = np.zeros(n)
        self.friction = np.ones(n)
        self.delay = np.zeros(n)
        self.cam_off = np.zeros((n, 3))
        self.cam_pitch_off = np.zeros(n)
        self.cam_hfov = np.full(n, np.radians(87.0))

        # Terrain stack (per-env profile along the centerline, edge-padded).
        self.fields: list[HeightField] = [None] * n  # type: ignore[list-item]
        self._profiles = np.zeros((n, 2))
        self._extent = np.zeros(n)

        # Camera frame state (10 Hz capture over a 50 Hz control loop).
        h, w = self.sensor.image_height, self.sensor.image_width
        self.frame_now = np.zeros((n, h, w))
        self.frame_prev = np.zeros((n, h, w))
        self.frame_id = np.zeros(n, dtype=np.int64)
        self.frame_time = np.zeros(n)
        self._pose_ring = np.zeros((n, self.world.substeps, 3))   # x, z, pitch
        self._pose_ring_t = np.zeros((n, self.world.substeps))

        self._noise_rngs: list[np.random.Generator] = [np.random.default_rng(0)] * n
        self.reset(np.arange(n))

    # ------------------------------------------------------------------ rng

    def _rng(self, env: int, tag: int) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, int(env), tag,
                                     int(self.episode_idx[env])])
        return np.random.Generator(np.random.PCG64(ss))

    # ------------------------------------------------------------ kinematics

    def _hip_offsets(self) -> np.ndarray:
        s = self.robot.hip_spacing / 2.0
        return np.array([[s, 0.0], [-s, 0.0]])

    def _leg_points(self, q: np.ndarray):
        """Body-frame knee/foot positions and foot Jacobians per leg.

        q: (n, 4). Returns knees (n, 2, 2), feet (n, 2, 2),
        jac (n, 2, 2, 2) as d(foot)/d(hip, knee) per leg.
        """
        l1, l2 = self.robot.thigh_length, self.robot.shank_length
        hips = self._hip_offsets()
        th1 = q[:, 0::2]                           # (n, 2) hip angles
        th12 = th1 + q[:, 1::2]                    # absolute shank angles
        knee = hips[None] + l1 * np.stack([np.sin(th1), -np.cos(th1)], axis=-1)
        foot = knee + l2 * np.stack([np.sin(th12), -np.cos(th12)], axis=-1)
        d1 = np.stack([np.cos(th1), np.sin(th1)], axis=-1) * l1
        d12 = np.stack([np.cos(th12), np.sin(th12)], axis=-1) * l2
        jac = np.stack([d1 + d12, d12], axis=2)    # (n, legs, joint, xy)
        return knee, foot, jac

    def _body_points(self, idx=None):
        """World positions/velocities of all contact points, plus foot Jacobians.

        Point order: [toe_f, heel_f, toe_r, heel_r, knee_f, knee_r, corners x4].
        Paw points sit at a fixed body-frame x offset from the foot center, so
        they share the foot's joint Jacobian.
        """
        sl = slice(None) if idx is None else idx
        q = self.q[sl]
        pitch = self.pitch[sl]
        com = self.com[sl]
        vel = self.vel[sl]
        rate = self.pitch_rate[sl]
        qd = self.qd[sl]

        knee_b, foot_b, jac = self._leg_points(q)
        paw = np.array([[self.robot.paw_half_len, 0.0],
                        [-self.robot.paw_half_len, 0.0]])
        n = q.shape[0]
        paw_b = (foot_b[:, :, None, :] + paw[None, None]).reshape(n, 4, 2)
        half_l = self.robot.body_length / 2.0
        half_h = self.robot.body_height / 2.0
        corners = np.array([[half_l, -half_h], [-half_l, -half_h],
                            [half_l, half_h], [-half_l, half_h]])
        pts_b = np.concatenate([paw_b, knee_b,
                                np.broadcast_to(corners, (n, 4, 2))], axis=1)
        # Points are defined about the geometric center; the integrated state
        # is the CoM, offset along body x by the sampled shift.
        shift = np.stack([self.com_shift[sl], np.zeros(n)], axis=-1)
        pts_b = pts_b - shift[:, None, :]

        c, s = np.cos(pitch), np.sin(pitch)
        rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], axis=1)  # (n,2,2)
        pts_w = com[:, None, :] + np.einsum("nij,npj->npi", rot, pts_b)

        # Point velocity: CoM velocity + rotation + joint motion (legs only).
        r = pts_w - com[:, None, :]
        v_rot = rate[:, None, None] * np.stack([-r[..., 1], r[..., 0]], axis=-1)
        v_joint_b = np.zeros_like(pts_b)
        qd_legs = qd.reshape(n, 2, 2)
        v_foot_b = np.einsum("nljk,nlj->nlk", jac, qd_legs)
        v_joint_b[:, 0] = v_foot_b[:, 0]
        v_joint_b[:, 1] = v_foot_b[:, 0]
        v_joint_b[:, 2] = v_foot_b[:, 1]
        v_joint_b[:, 3] = v_foot_b[:, 1]
        l1 = self.robot.thigh_length
        th1 = q[:, 0::2]
        v_knee_b = qd[:, 0::2][..., None] * l1 * np.stack(
            [np.cos(th1), np.sin(th1)], axis=-1)
        v_joint_b[:, KNEE_SLICE] = v_knee_b
        pts_v = vel[:, None, :] + v_rot + np.einsum("nij,npj->npi", rot, v_joint_b)
        return pts_w, pts_v, jac, rot

    def foot_positions(self, idx=None) -> np.ndarray:
        """World (x, z) of the two foot centers, (n, 2, 2)."""
        sl = slice(None) if idx is None else idx
        q = self.q[sl]
        _, foot_b, _ = self._leg_points(q)
        n = q.shape[0]
        shift = np.stack([self.com_shift[sl], np.zeros(n)], axis=-1)
        foot_b = foot_b - shift[:, None, :]
        c, s = np.cos(self.pitch[sl]), np.sin(self.pitch[sl])
        rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], axis=1)
        return self.com[sl][:, None, :] + np.einsum("nij,npj->npi", rot, foot_b)

    # -------------------------------------------------------------- terrain

    def _terrain_height(self, x: np.ndarray, idx=None) -> np.ndarray:
        """Centerline terrain height per env; x clamps to each env's extent."""
        sl = slice(None) if idx is None else idx
        prof = self._profiles[sl]
        extent = self._extent[sl]
        res = self.cfg.terrain.resolution
        t = np.clip(x, 0.0, extent[..., None] if x.ndim > 1 else extent) / res
        nmax = prof.shape[1]
        i0 = np.clip(np.floor(t).astype(np.int64), 0, nmax - 2)
        f = np.clip(t - i0, 0.0, 1.0)
        rows = np.arange(prof.shape[0])
        if x.ndim > 1:
            rows = rows[:, None]
        return prof[rows, i0] * (1 - f) + prof[rows, i0 + 1] * f

    def _install_field(self, i: int, field: HeightField) -> None:
        self.fields[i] = field
        mid = field.ny // 2
        prof = field.heights[:, mid]
        nmax = self._profiles.shape[1]
        if len(prof) > nmax:
            grown = np.full((self.n, len(prof)), 0.0)
            for j in range(self.n):
                old = self._profiles[j]
                grown[j, :len(old)] = old
                grown[j, len(old):] = old[-1]
            self._profiles = grown
            nmax = len(prof)
        self._profiles[i, :len(prof)] = prof
        self._profiles[i, len(prof):] = prof[-1]
        self._extent[i] = field.extent_x

    # ---------------------------------------------------------------- reset

    def reset(self, env_ids: np.ndarray) -> None:
        ids = np.atleast_1d(np.asarray(env_ids, dtype=np.int64))
        if not len(ids):
            return
        for i in ids:
            self._prepare_one(int(i))
        # settle into static equilibrium (vectorized over the reset batch),
        # then zero transients
        for _ in range(self.world.settle_steps):
            self._substep(ids)
        self.vel[ids] = 0.0
        self.pitch_rate[ids] = 0.0
        self.qd[ids] = 0.0
        self.qd_prev[ids] = 0.0
        self.time[ids] = 0.0
        for i in ids:
            self._pose_ring[i] = self._camera_pose_raw(int(i))
            self._pose_ring_t[i] = 0.0
            self.frame_id[i] = 0
            self._capture_frame(int(i), first=True)

    def _prepare_one(self, i: int) -> None:
        self.episode_idx[i] += 1
        terrain_rng = self._rng(i, 0)
        domain_rng = self._rng(i, 1)
        command_rng = self._rng(i, 2)
        self._noise_rngs[i] = self._rng(i, 3)

        kind = self.env_kind[i]
        level = int(self.level[i])
        track_seed = int(terrain_rng.integers(2 ** 62))
        field = generate_track(kind, level, track_seed, self.randomize_terrain,
                               self.cfg.terrain)
        self._install_field(i, field)

        if self.randomize_domain_params:
            dom = randomize_domain(self.cfg.domain_rand, domain_rng)
        else:
            r = self.cfg.domain_rand
            mid = lambda rr: 0.5 * (rr[0] + rr[1])
            dom = DomainSample(payload=0.0, kp_factor=1.0, kd_factor=1.0,
                               motor_strength=1.0, com_shift=0.0, friction=mid(r.friction),
                               init_joint_factor=1.0, system_delay=0.0,
                               cam_offset=(0.0, 0.0, 0.0), cam_pitch_offset=0.0,
                               cam_hfov=mid(r.cam_hfov_rad))
        self.domains[i] = dom
        self.payload[i] = dom.payload
        self.kp_eff[i] = self.robot.kp * dom.kp_factor
        self.kd_eff[i] = self.robot.kd * dom.kd_factor
        self.motor_f[i] = dom.motor_strength
        self.com_shift[i] = dom.com_shift
        self.friction[i] = dom.friction
        self.delay[i] = dom.system_delay
        self.cam_off[i] = dom.cam_offset
        self.cam_pitch_off[i] = dom.cam_pitch_offset
        self.cam_hfov[i] = dom.cam_hfov

        q0 = np.asarray(self.robot.stand_pose) * dom.init_joint_factor
        q0 = np.clip(q0, self.robot.joint_lower, self.robot.joint_upper)
        self.q[i] = q0
        self.qd[i] = 0.0
        self.qd_prev[i] = 0.0
        self.pitch[i] = 0.0
        self.pitch_rate[i] = 0.0
        self.vel[i] = 0.0
        self.spawn_x[i] = min(1.0, self.cfg.terrain.spawn_pad * 0.6)
        ground = float(self._terrain_height(np.array([self.spawn_x[i]]), [i])[0])
        _, foot_b, _ = self._leg_points(self.q[i:i + 1])
        lowest = float(foot_b[0, :, 1].min())
        self.com[i] = (self.spawn_x[i], ground - lowest + 1e-4)

        self.cur_target[i] = q0
        self.pending_target[i] = q0
        self.pending_time[i] = np.inf
        self.action_prev[i] = 0.0
        self.action_prev2[i] = 0.0
        self.tau[i] = 0.0
        self.time[i] = 0.0
        self.step_count[i] = 0
        self.collision_timer[i] = 0.0
        self.n_collision[i] = 0
        self.command[i] = sample_command(command_rng, self.world)

    # -------------------------------------------------------------- physics

    def _substep(self, idx: np.ndarray) -> None:
        h = self.substep_dt
        robot = self.robot

        ready = self.time[idx] + 1e-12 >= self.pending_time[idx]
        if np.any(ready):
            rows = idx[ready]
            self.cur_target[rows] = self.pending_target[rows]
            self.pending_time[rows] = np.inf

        q = self.q[idx]
        qd = self.qd[idx]
        tau = pd_torque(self.cur_target[idx], q, qd,
                        self.kp_eff[idx][:, None], self.kd_eff[idx][:, None],
                        robot.tau_max, self.motor_f[idx][:, None])
        self.tau[idx] = tau

        pts_w, pts_v, jac, rot = self._body_points(idx)
        ground = self._terrain_height(pts_w[..., 0], idx)
        pen = ground - pts_w[..., 1]
        in_contact = pen > 0.0
        if not self.contacts_enabled:
            in_contact = np.zeros_like(in_contact)

        fz = np.where(in_contact,
                      self.world.contact_stiffness * pen
                      - self.world.contact_damping * pts_v[..., 1], 0.0)
        fz = np.maximum(fz, 0.0)            # no tensile normal force
        ft = np.where(in_contact, -self.world.tangential_damping * pts_v[..., 0], 0.0)
        bound = self.friction[idx][:, None] * fz
        ft = np.clip(ft, -bound, bound)
        forces = np.stack([ft, fz], axis=-1)          # (n, pts, 2) world frame

        mass = robot.mass + self.payload[idx]
        g = self.world.gravity
        f_sum = forces.sum(axis=1)
        lin_acc = f_sum / mass[:, None] + np.array([0.0, -g])

        r = pts_w - self.com[idx][:, None, :]
        torque_pts = (r[..., 0] * forces[..., 1] - r[..., 1] * forces[..., 0]).sum(axis=1)
        hip_reaction = -(tau[:, 0] + tau[:, 2])
        ang_acc = (torque_pts + hip_reaction) / robot.pitch_inertia

        # Contact loads on the joints: J^T f for paws, thigh Jacobian for knees.
        f_body = np.einsum("nji,npj->npi", rot, forces)       # rotate into body frame
        f_paw = f_body[:, PAW_SLICE]
        f_feet = np.stack([f_paw[:, 0] + f_paw[:, 1],
                           f_paw[:, 2] + f_paw[:, 3]], axis=1)    # (n, legs, 2)
        tau_contact = np.einsum("nljk,nlk->nlj", jac, f_feet).reshape(q.shape)
        f_knee = f_body[:, KNEE_SLICE]
        l1 = robot.thigh_length
        th1 = q[:, 0::2]
        dknee = np.stack([np.cos(th1), np.sin(th1)], axis=-1) * l1
        tau_contact[:, 0::2] += np.einsum("nlk,nlk->nl", dknee, f_knee)

        qdd = (tau + tau_contact - self.world.joint_friction * qd) / robot.leg_inertia

        qd = qd + h * qdd
        vel = self.vel[idx] + h * lin_acc
        rate = self.pitch_rate[idx] + h * ang_acc

        q_new = q + h * qd
        q_clamped = np.clip(q_new, robot.joint_lower, robot.joint_upper)
        hit_limit = q_clamped != q_new
        qd = np.where(hit_limit, 0.0, qd)

        self.q[idx] = q_clamped
        self.qd[idx] = qd
        self.vel[idx] = vel
        self.pitch_rate[idx] = rate
        self.com[idx] = self.com[idx] + h * vel
        self.pitch[idx] = self.pitch[idx] + h * rate
        self.time[idx] = self.time[idx] + h
        self.contact_flags[idx] = in_contact

        bad = ~np.isfinite(self.com[idx]).all(axis=1)
        bad |= ~np.isfinite(self.q[idx]).all(axis=1)
        bad |= ~np.isfinite(self.vel[idx]).all(axis=1)
        if np.any(bad):
            which = np.atleast_1d(idx)[bad]
            raise SimulationError(
                f"non-finite state in envs {which.tolist()} at t="
                f"{self.time[np.atleast_1d(idx)[bad][0]]:.3f}s")

        # pose ring for delayed camera capture
        slot = np.round(self.time[idx] / h).astype(np.int64) % self.world.substeps
        rows = np.atleast_1d(idx)
        self._pose_ring[rows, slot] = np.stack(
            [self.com[idx][:, 0], self.com[idx][:, 1], self.pitch[idx]], axis=-1)
        self._pose_ring_t[rows, slot] = self.time[idx]

    # --------------------------------------------------------------- camera

    def _camera_pose_raw(self, i: int) -> np.ndarray:
        """(x, z, pitch) the camera mount follows (base pose, not offsets)."""
        return np.array([self.com[i, 0], self.com[i, 1], self.pitch[i]])

    def camera_pose(self, i: int, base_x: float, base_z: float,
                    base_pitch: float) -> CameraPose:
        """World camera pose from a (possibly delayed) base pose."""
        off_x = self.sensor.cam_offset_x + self.cam_off[i, 0]
        off_z = self.sensor.cam_offset_z + self.cam_off[i, 2]
        c, s = np.cos(base_pitch), np.sin(base_pitch)
        x = base_x + c * off_x - s * off_z
        z = base_z + s * off_x + c * off_z
        pitch_down = self.sensor.cam_pitch + self.cam_pitch_off[i] - base_pitch
        return CameraPose(x, self.cfg.terrain.extent_y / 2.0 + self.cam_off[i, 1],
                          z, pitch_down)

    def intrinsics(self, i: int) -> CameraIntrinsics:
        return CameraIntrinsics(hfov=float(self.cam_hfov[i]),
                                width=self.sensor.image_width,
                                height=self.sensor.image_height,
                                depth_min=self.sensor.depth_min,
                                depth_max=self.sensor.depth_max)

    def _capture_frame(self, i: int, first: bool = False) -> None:
        """Render a frame from the pose as of (now - system delay)."""
        t_capture = self.time[i] - self.delay[i]
        ring_t = self._pose_ring_t[i]
        valid = ring_t <= t_capture + 1e-12
        slot = int(np.argmax(np.where(valid, ring_t, -np.inf))) if valid.any() \
            else int(np.argmin(ring_t))
        bx, bz, bp = self._pose_ring[i, slot]

        pose = self.camera_pose(i, bx, bz, bp)
        intr = self.intrinsics(i)
        noise = self.sensor.noise
        rng = self._noise_rngs[i]
        geometric = (noise.lag_offset > 0 or noise.position_noise_max > 0
                     or noise.pitch_noise_max > 0)
        if geometric:
            pose = corrupt_pose(pose, noise, rng)
        ground = self._terrain_height(np.array([np.clip(pose.x, 0.0, self._extent[i])]),
                                      [i])[0]
        if pose.z <= ground:
            # Lens pressed into terrain mid-fall: saturate instead of failing.
            depth = np.full((intr.height, intr.width), intr.depth_min)
            img = DepthImage(depth, float(min(t_capture, self.time[i])))
        else:
            img = render_depth(self.fields[i], pose, intr,
                               timestamp=float(min(t_capture, self.time[i])))
        img = apply_pixel_noise(img, noise, rng, intr.depth_min, intr.depth_max)

        if first:
            self.frame_prev[i] = 0.0          # zero-padded history at episode start
            self.frame_id[i] = 0
        else:
            self.frame_prev[i] = self.frame_now[i]
            self.frame_id[i] += 1
        self.frame_now[i] = img.depth
        self.frame_time[i] = img.timestamp

    def depth_history(self, i: int) -> np.ndarray:
        """(2, H, W): newest frame then the previous distinct frame."""
        return np.stack([self.frame_now[i], self.frame_prev[i]])

    # -------------------------------------------------------------- signals

    def observe(self) -> np.ndarray:
        """Batched policy observation o_t, (n, obs_dim)."""
        return self.layout.assemble(
            self.pitch_rate[:, None], gravity_in_body(self.pitch),
            self.command, self.q, self.qd, self.action_prev)

    def true_velocity(self) -> np.ndarray:
        """(n, 3) base velocity with zero-filled lateral channel."""
        return np.stack([self.vel[:, 0], np.zeros(self.n), self.vel[:, 1]], axis=-1)

    def heightmap_scan(self) -> np.ndarray:
        offsets = np.linspace(self.sensor.scan_x_min, self.sensor.scan_x_max,
                              self.sensor.scan_points)
        xs = self.com[:, 0:1] + offsets[None, :]
        rel = self._terrain_height(xs) - self.com[:, 1:2]
        return np.clip(rel, -self.sensor.scan_clip, self.sensor.scan_clip)

    def foot_clearances(self) -> np.ndarray:
        feet = self.foot_positions()
        ground = self._terrain_height(feet[..., 0])
        return feet[..., 1] - ground

    def privileged(self, obs: np.ndarray | None = None) -> np.ndarray:
        obs = self.observe() if obs is None else obs
        return np.concatenate([obs, self.true_velocity(), self.heightmap_scan()],
                              axis=-1)

    def traversed_fraction(self) -> np.ndarray:
        end = self._extent - 0.5
        span = np.maximum(end - self.spawn_x, 1e-6)
        return np.clip((self.com[:, 0] - self.spawn_x) / span, 0.0, 1.0)

    def check_termination(self):
        """(terminated, timeout) boolean masks at the current control tick."""
        ground = self._terrain_height(self.com[:, 0:1])[:, 0]
        fell = np.abs(self.pitch) > self.world.fall_pitch
        too_low = (self.com[:, 1] - ground) < self.world.min_base_clearance
        crashed = self.collision_timer > self.world.collision_persist_s
        terminated = fell | too_low | crashed
        timeout = self.step_count >= self.max_steps
        return terminated, timeout & ~terminated

    # ----------------------------------------------------------------- step

    def step(self, actions: np.ndarray, workers: int = 1,
             auto_reset: bool = True) -> dict:
        """Advance all envs one control tick; auto-resets finished episodes
        unless the caller wants to adjust levels first."""
        actions = np.clip(np.asarray(actions, dtype=np.float64),
                          -self.robot.action_bound, self.robot.action_bound)
        targets = np.clip(np.asarray(self.robot.stand_pose) + actions,
                          self.robot.joint_lower, self.robot.joint_upper)
        self.pending_target[:] = targets
        self.pending_time[:] = self.time + self.delay
        self.qd_prev[:] = self.qd

        def advance(chunk: np.ndarray) -> None:
            for _ in range(self.world.substeps):
                self._substep(chunk)

        chunks = [c for c in np.array_split(np.arange(self.n), max(1, workers)) if len(c)]
        if workers > 1 and len(chunks) > 1:
            # Env rows are disjoint per chunk, so threaded stepping is exact.
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                list(pool.map(advance, chunks))
        else:
            for chunk in chunks:
                advance(chunk)

        self.step_count += 1

        non_foot = self.contact_flags[:, NON_FOOT_START:].any(axis=1)
        self.collision_timer = np.where(non_foot,
                                        self.collision_timer + self.world.control_dt,
                                        0.0)
        self.n_collision = self.contact_flags[:, NON_FOOT_START:].sum(axis=1)

        qdd = (self.qd - self.qd_prev) / self.world.control_dt
        inp = RewardInputs(
            cmd_vel_xy=np.stack([self.command[:, 0], np.zeros(self.n)], axis=-1),
            cmd_yaw=self.command[:, 1],
            vel_xy=np.stack([self.vel[:, 0], np.zeros(self.n)], axis=-1),
            vel_z=self.vel[:, 1],
            ang_vel_xy=np.stack([np.zeros(self.n), self.pitch_rate], axis=-1),
            yaw_rate=np.zeros(self.n),
            gravity_tilt=gravity_in_body(self.pitch)[:, 0:1],
            qdd=qdd, tau=self.tau, qd=self.qd,
            n_collision=self.n_collision,
            action=actions, action_prev=self.action_prev,
            action_prev2=self.action_prev2,
        )
        reward = compute_reward(inp)

        self.action_prev2[:] = self.action_prev
        self.action_prev[:] = actions

        # camera cadence: a fresh frame every frame_interval-th control tick
        for i in range(self.n):
            if self.step_count[i] % self.sensor.frame_interval == 0:
                self._capture_frame(i)

        obs_next = self.observe()                 # successor obs, pre-reset
        terminated, timeout = self.check_termination()
        done = terminated | timeout
        traversed = self.traversed_fraction()

        reset_ids = np.flatnonzero(done) if auto_reset else np.array([], dtype=np.int64)
        if self.use_curriculum:
            for i in reset_ids:
                self.level[i] = curriculum_update(int(self.level[i]),
                                                  float(traversed[i]),
                                                  self.cfg.terrain)
        if len(reset_ids):
            self.reset(reset_ids)

        return {
            "reward": reward,
            "terminated": terminated,
            "timeout": timeout,
            "done": done,
            "traversed": traversed,
            "obs_next": obs_next,
            "reset_ids": reset_ids,
            "level": self.level.copy(),
        }

    # -------------------------------------------------------------- export

    def get_state(self, i: int) -> SimState:
        return SimState(
            base_pos=self.com[i].copy(), pitch=float(self.pitch[i]),
            base_vel=self.vel[i].copy(), pitch_rate=float(self.pitch_rate[i]),
            q=self.q[i].copy(), qd=self.qd[i].copy(),
            foot_pos=self.foot_positions(np.array([i]))[0].copy(),
            contact=self.contact_flags[i].copy(),
            prev_action=self.action_prev[i].copy(),
            prev_action2=self.action_prev2[i].copy(),
            time=float(self.time[i]), command=self.command[i].copy(),
            domain=self.domains[i],
        )

    def export_domains_json(self, path, extra_meta: dict | None = None) -> None:
        payload = {"meta": extra_meta or {},
                   "domains": [d.as_dict() if d else None for d in self.domains]}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
