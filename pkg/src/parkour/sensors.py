"""Egocentric depth camera, camera corruption, and observation assembly.

The renderer intersects each pixel ray with the terrain profile under the
camera (the height field extruded along y). Terrain is piecewise linear
between grid nodes and rays are straight lines, so first hits are computed
exactly, not by fixed-step marching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import NoiseConfig, SensorConfig
from .terrain import HeightField, height_at


@dataclass(frozen=True)
class CameraPose:
    """World-frame camera placement; pitch_down > 0 looks below the horizon."""

    x: float
    y: float
    z: float
    pitch_down: float


@dataclass(frozen=True)
class CameraIntrinsics:
    hfov: float                  # horizontal field of view [rad]
    width: int
    height: int
    depth_min: float
    depth_max: float


@dataclass(frozen=True)
class DepthImage:
    depth: np.ndarray            # (height, width), meters along the ray
    timestamp: float


def pixel_directions(intr: CameraIntrinsics, pitch_down: float) -> np.ndarray:
    """Unit world-frame ray directions, shape (height, width, 3)."""
    f_px = (intr.width / 2.0) / np.tan(intr.hfov / 2.0)
    cols = (np.arange(intr.width) + 0.5) - intr.width / 2.0
    rows = (np.arange(intr.height) + 0.5) - intr.height / 2.0
    u = cols[None, :] / f_px                      # + right
    v = rows[:, None] / f_px                      # + down (row 0 is top)
    d_cam = np.stack([np.ones_like(u + v), -np.broadcast_to(u, (intr.height, intr.width)),
                      -np.broadcast_to(v, (intr.height, intr.width))], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    cp, sp = np.cos(pitch_down), np.sin(pitch_down)
    dx = d_cam[..., 0] * cp + d_cam[..., 2] * sp
    dy = d_cam[..., 1]
    dz = -d_cam[..., 0] * sp + d_cam[..., 2] * cp
    return np.stack([dx, dy, dz], axis=-1)


def _profile(field: HeightField, xs: np.ndarray, y: float) -> np.ndarray:
    """Terrain heights along x at fixed y, clamped to the field extent."""
    xq = np.clip(xs, 0.0, field.extent_x)
    yq = np.clip(y, 0.0, field.extent_y)
    return np.asarray(height_at(field, xq, np.full_like(xq, yq)))


def render_depth(field: HeightField, pose: CameraPose, intr: CameraIntrinsics,
                 timestamp: float = 0.0) -> DepthImage:
    """Exact first-hit distances of all pixel rays against the terrain profile."""
    ground = float(_profile(field, np.array([pose.x]), pose.y)[0])
    if pose.z <= ground:
        raise ValueError(f"camera at z={pose.z:.3f} is below terrain ({ground:.3f})")

    dirs = pixel_directions(intr, pose.pitch_down).reshape(-1, 3)
    n_pix = dirs.shape[0]
    depth = np.full(n_pix, intr.depth_max)

    # Sample nodes along x from the camera forward one clip range; the first
    # entry sits exactly at the camera so the scan starts above ground.
    res = field.resolution
    first = np.floor(pose.x / res + 1.0) * res
    nodes = np.concatenate([[pose.x], np.arange(first, pose.x + intr.depth_max + res, res)])
    terrain_z = _profile(field, nodes, pose.y)

    forward = dirs[:, 0] > 1e-9
    if np.any(forward):
        dxz = dirs[forward, 2] / dirs[forward, 0]
        ray_z = pose.z + (nodes[None, :] - pose.x) * dxz[:, None]
        f = ray_z - terrain_z[None, :]
        crossing = (f[:, :-1] > 0) & (f[:, 1:] <= 0)
        has_hit = crossing.any(axis=1)
        seg = np.argmax(crossing, axis=1)
        rows = np.arange(f.shape[0])
        f0 = f[rows, seg]
        f1 = f[rows, seg + 1]
        span = nodes[seg + 1] - nodes[seg]
        x_hit = nodes[seg] + span * f0 / np.maximum(f0 - f1, 1e-30)
        t = (x_hit - pose.x) / dirs[forward, 0]
        d = np.where(has_hit, t, intr.depth_max)
        depth[forward] = d

    # Rays with no forward progress hit the column under the camera or escape.
    stalled = ~forward
    if np.any(stalled):
        dz = dirs[stalled, 2]
        drop = pose.z - ground
        t = np.where(dz < -1e-9, drop / np.maximum(-dz, 1e-30), intr.depth_max)
        depth[stalled] = t

    depth = np.clip(depth, intr.depth_min, intr.depth_max)
    return DepthImage(depth.reshape(intr.height, intr.width), timestamp)


def corrupt_pose(pose: CameraPose, cfg: NoiseConfig, rng: np.random.Generator) -> CameraPose:
    """Geometric corruption: lag along -x, uniform position and pitch jitter."""
    dx = -cfg.lag_offset
    dy = dz = 0.0
    if cfg.position_noise_max > 0:
        dx += rng.uniform(-cfg.position_noise_max, cfg.position_noise_max)
        dy += rng.uniform(-cfg.position_noise_max, cfg.position_noise_max)
        dz += rng.uniform(-cfg.position_noise_max, cfg.position_noise_max)
    dpitch = rng.uniform(-cfg.pitch_noise_max, cfg.pitch_noise_max) \
        if cfg.pitch_noise_max > 0 else 0.0
    return CameraPose(pose.x + dx, pose.y + dy, pose.z + dz, pose.pitch_down + dpitch)


def apply_pixel_noise(img: DepthImage, cfg: NoiseConfig, rng: np.random.Generator,
                      depth_min: float, depth_max: float) -> DepthImage:
    """Photometric corruption: additive Gaussian then salt-pepper, then clip."""
    if cfg.gaussian_std == 0.0 and cfg.salt_pepper_prob == 0.0:
        return img
    depth = img.depth.copy()
    if cfg.gaussian_std > 0:
        depth += rng.normal(0.0, cfg.gaussian_std, size=depth.shape)
    if cfg.salt_pepper_prob > 0:
        u = rng.random(size=depth.shape)
        depth[u < cfg.salt_pepper_prob / 2] = depth_min
        depth[(u >= cfg.salt_pepper_prob / 2) & (u < cfg.salt_pepper_prob)] = depth_max
    np.clip(depth, depth_min, depth_max, out=depth)
    return DepthImage(depth, img.timestamp)


def apply_camera_noise(img: DepthImage, cfg: NoiseConfig, rng: np.random.Generator,
                       field: HeightField | None = None,
                       pose: CameraPose | None = None,
                       intr: CameraIntrinsics | None = None,
                       depth_min: float = 0.1, depth_max: float = 3.0) -> DepthImage:
    """Full corruption pipeline; geometric channels re-render from a shifted pose.

    With an all-zero config the input image is returned untouched. Geometric
    noise (lag/position/pitch) needs (field, pose, intr) to re-render; pixel
    noise alone does not.
    """
    geometric = cfg.lag_offset > 0 or cfg.position_noise_max > 0 or cfg.pitch_noise_max > 0
    if geometric:
        if field is None or pose is None or intr is None:
            raise ValueError("geometric camera noise requires field/pose/intrinsics")
        shifted = corrupt_pose(pose, cfg, rng)
        img = render_depth(field, shifted, intr, timestamp=img.timestamp)
    if intr is not None:
        depth_min, depth_max = intr.depth_min, intr.depth_max
    return apply_pixel_noise(img, cfg, rng, depth_min=depth_min, depth_max=depth_max)


def foot_clearance(field: HeightField, foot_xz: np.ndarray, y: float | None = None):
    """Vertical foot-to-terrain distance; negative while penetrating.

    ``foot_xz``: (..., 2) world-frame (x, z) per foot.
    """
    foot_xz = np.asarray(foot_xz, dtype=np.float64)
    yq = field.extent_y / 2.0 if y is None else y
    ground = height_at(field, foot_xz[..., 0], np.full(foot_xz.shape[:-1], yq))
    return foot_xz[..., 1] - ground


def height_scan(field: HeightField, base_x: float, base_z: float,
                cfg: SensorConfig) -> np.ndarray:
    """Privileged terrain heights relative to the base at fixed forward offsets."""
    offsets = np.linspace(cfg.scan_x_min, cfg.scan_x_max, cfg.scan_points)
    xs = np.clip(base_x + offsets, 0.0, field.extent_x)
    ys = np.full_like(xs, field.extent_y / 2.0)
    rel = np.asarray(height_at(field, xs, ys)) - base_z
    return np.clip(rel, -cfg.scan_clip, cfg.scan_clip)


@dataclass(frozen=True)
class ObsLayout:
    """Widths of the proprioceptive observation, in concatenation order."""

    ang_vel: int
    gravity: int
    command: int
    q: int
    qd: int
    prev_action: int

    @property
    def total(self) -> int:
        return self.ang_vel + self.gravity + self.command + self.q + self.qd + self.prev_action

    @staticmethod
    def planar(n_joints: int = 4) -> "ObsLayout":
        return ObsLayout(ang_vel=1, gravity=2, command=2, q=n_joints,
                         qd=n_joints, prev_action=n_joints)

    @staticmethod
    def quadruped_3d(n_joints: int = 12) -> "ObsLayout":
        return ObsLayout(ang_vel=3, gravity=3, command=3, q=n_joints,
                         qd=n_joints, prev_action=n_joints)

    def assemble(self, ang_vel, gravity, command, q, qd, prev_action) -> np.ndarray:
        parts = [np.atleast_1d(np.asarray(p, dtype=np.float64))
                 for p in (ang_vel, gravity, command, q, qd, prev_action)]
        widths = (self.ang_vel, self.gravity, self.command, self.q, self.qd, self.prev_action)
        for part, want, tag in zip(parts, widths, ("ang_vel", "gravity", "command",
                                                   "q", "qd", "prev_action")):
            if part.shape[-1] != want:
                raise ValueError(f"obs part {tag}: width {part.shape[-1]}, layout wants {want}")
        return np.concatenate(parts, axis=-1)


def gravity_in_body(pitch: float | np.ndarray) -> np.ndarray:
    """Unit gravity direction in the body frame for a nose-up pitch angle."""
    pitch = np.asarray(pitch, dtype=np.float64)
    return np.stack([-np.sin(pitch), -np.cos(pitch)], axis=-1)


def assemble_obs(state, layout: ObsLayout | None = None) -> np.ndarray:
    """Policy observation [omega, g, c, q, qd, a_prev] from one sim state."""
    layout = layout or ObsLayout.planar(len(state.q))
    return layout.assemble(state.pitch_rate, gravity_in_body(state.pitch),
                           state.command, state.q, state.qd, state.prev_action)


def assemble_privileged(obs: np.ndarray, velocity: np.ndarray,
                        scan: np.ndarray) -> np.ndarray:
    """Critic input: observation, true base velocity, height scan, in order."""
    return np.concatenate([np.asarray(obs, dtype=np.float64),
                           np.asarray(velocity, dtype=np.float64),
                           np.asarray(scan, dtype=np.float64)], axis=-1)


def save_pgm(img: DepthImage, path, comment: str = "") -> None:
    """16-bit PGM in millimeters, for visual inspection."""
    mm = np.clip(np.round(img.depth * 1000.0), 0, 65535).astype(">u2")
    header = f"P5\n# {comment}\n{mm.shape[1]} {mm.shape[0]}\n65535\n"
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(mm.tobytes())
