import numpy as np
import pytest

from parkour import sensors, terrain
from parkour.config import NoiseConfig, RunConfig, SensorConfig
from parkour.sensors import (CameraIntrinsics, CameraPose, ObsLayout,
                             apply_camera_noise, assemble_privileged,
                             foot_clearance, gravity_in_body, height_scan,
                             pixel_directions, render_depth, save_pgm)
from parkour.world import ParkourWorld


def intrinsics(hfov_deg=87.0):
    return CameraIntrinsics(hfov=np.radians(hfov_deg), width=64, height=48,
                            depth_min=0.1, depth_max=3.0)


@pytest.fixture(scope="module")
def flat_field():
    return terrain.generate_track("flat", 1, 0, False)


class TestRenderDepth:
    @pytest.mark.parametrize("pitch_deg", [5, 10, 20, 30, 45])
    def test_flat_plane_analytic_oracle(self, flat_field, pitch_deg):
        pose = CameraPose(2.0, 0.5, 0.3, np.radians(pitch_deg))
        img = render_depth(flat_field, pose, intrinsics())
        dirs = pixel_directions(intrinsics(), pose.pitch_down).reshape(-1, 3)
        expect = np.where(dirs[:, 2] < 0,
                          pose.z / np.maximum(-dirs[:, 2], 1e-30), 3.0)
        expect = np.clip(expect, 0.1, 3.0)
        assert np.abs(img.depth.reshape(-1) - expect).max() < 1e-4

    def test_single_ray_closed_form(self, flat_field):
        # a ray alpha below the horizon from height 0.3 travels 0.3/sin(alpha)
        alpha = np.radians(25.0)
        pose = CameraPose(2.0, 0.5, 0.3, alpha)
        narrow = CameraIntrinsics(hfov=1e-5, width=1, height=1,
                                  depth_min=0.05, depth_max=5.0)
        img = render_depth(flat_field, pose, narrow)
        assert img.depth[0, 0] == pytest.approx(0.3 / np.sin(alpha), abs=1e-9)

    def test_horizon_rows_at_far_clip(self, flat_field):
        pose = CameraPose(2.0, 0.5, 0.3, 0.0)
        img = render_depth(flat_field, pose, intrinsics())
        assert np.all(img.depth[0] == 3.0)      # top rows look upward

    def test_deterministic(self, flat_field):
        pose = CameraPose(1.0, 0.5, 0.4, 0.5)
        a = render_depth(flat_field, pose, intrinsics())
        b = render_depth(flat_field, pose, intrinsics())
        assert np.array_equal(a.depth, b.depth)

    def test_camera_below_terrain_rejected(self):
        field = terrain.generate_track("step", 10, 3, False)
        xs = np.arange(field.nx) * field.resolution
        high = xs[np.argmax(field.heights[:, field.ny // 2])]
        with pytest.raises(ValueError, match="below terrain"):
            render_depth(field, CameraPose(high, 0.5, 0.2, 0.5), intrinsics())

    def test_sees_wall_ahead(self, flat_field):
        field = terrain.generate_track("step", 10, 3, False)
        pose = CameraPose(1.0, 0.5, 0.35, 0.1)
        img = render_depth(field, pose, intrinsics())
        assert img.depth.min() < 3.0

    def test_values_inside_clip_range(self, flat_field):
        img = render_depth(flat_field, CameraPose(2.0, 0.5, 0.11, 0.8), intrinsics())
        assert img.depth.min() >= 0.1 and img.depth.max() <= 3.0


class TestCameraNoise:
    def test_zero_config_is_bitwise_identity(self, flat_field):
        pose = CameraPose(2.0, 0.5, 0.3, 0.5)
        img = render_depth(flat_field, pose, intrinsics())
        out = apply_camera_noise(img, NoiseConfig(), np.random.default_rng(0),
                                 field=flat_field, pose=pose, intr=intrinsics())
        assert out.depth.tobytes() == img.depth.tobytes()

    def test_salt_pepper_prob_one_saturates(self, flat_field):
        img = render_depth(flat_field, CameraPose(2, 0.5, 0.3, 0.5), intrinsics())
        out = apply_camera_noise(img, NoiseConfig(salt_pepper_prob=1.0),
                                 np.random.default_rng(1), intr=intrinsics())
        assert np.all((out.depth == 0.1) | (out.depth == 3.0))

    def test_gaussian_std_statistical_oracle(self, flat_field):
        # pixel residuals on unclipped flat-ground pixels: sample std within
        # 10% of the configured 0.05 m over ~1e5 pixels
        cfg = NoiseConfig(gaussian_std=0.05)
        pose = CameraPose(2.0, 0.5, 0.3, np.radians(35))
        big = CameraIntrinsics(hfov=np.radians(87), width=520, height=340,
                               depth_min=0.1, depth_max=3.0)
        clean = render_depth(flat_field, pose, big)
        noisy = apply_camera_noise(clean, cfg, np.random.default_rng(2), intr=big)
        keep = (clean.depth > 0.3) & (clean.depth < 2.5) \
            & (noisy.depth > 0.1) & (noisy.depth < 3.0)
        assert keep.sum() > 1e5
        resid = (noisy.depth - clean.depth)[keep]
        assert 0.045 <= resid.std() <= 0.055

    def test_lag_rerenders_from_shifted_pose(self):
        field = terrain.generate_track("step", 10, 3, False)
        pose = CameraPose(1.5, 0.5, 0.4, 0.3)
        img = render_depth(field, pose, intrinsics())
        lagged = apply_camera_noise(img, NoiseConfig(lag_offset=0.25),
                                    np.random.default_rng(3), field=field,
                                    pose=pose, intr=intrinsics())
        direct = render_depth(field, CameraPose(1.25, 0.5, 0.4, 0.3), intrinsics())
        assert np.array_equal(lagged.depth, direct.depth)

    def test_geometric_noise_without_renderer_rejected(self, flat_field):
        img = render_depth(flat_field, CameraPose(2, 0.5, 0.3, 0.5), intrinsics())
        with pytest.raises(ValueError, match="requires field"):
            apply_camera_noise(img, NoiseConfig(pitch_noise_max=0.1),
                               np.random.default_rng(0))


class TestPrivilegedSignals:
    def test_foot_clearance_basic(self, flat_field):
        clr = foot_clearance(flat_field, np.array([[2.0, 0.3], [3.0, 0.0]]))
        assert np.allclose(clr, [0.3, 0.0])

    def test_foot_clearance_over_raised_terrain(self):
        field = terrain.generate_track("step", 10, 3, False)
        xs = np.arange(field.nx) * field.resolution
        top_x = xs[np.argmax(field.heights[:, field.ny // 2])]
        clr = foot_clearance(field, np.array([[top_x, 0.95]]))
        assert clr[0] == pytest.approx(0.2, abs=1e-9)

    def test_foot_clearance_over_gap_interior(self):
        field = terrain.generate_track("gap", 10, 5, False)
        spans = terrain.measure_gap_spans(field)
        mid = (spans[0][0] + spans[0][1]) / 2
        depth = -float(terrain.height_at(field, mid, field.extent_y / 2))
        clr = foot_clearance(field, np.array([[mid, 0.0]]))
        assert clr[0] == pytest.approx(depth, abs=1e-9)
        assert clr[0] > 0.3

    def test_foot_outside_extent_raises(self, flat_field):
        with pytest.raises(ValueError):
            foot_clearance(flat_field, np.array([[99.0, 0.3]]))

    def test_height_scan_flat_relative_to_base(self, flat_field):
        scan = height_scan(flat_field, 2.0, 0.25, SensorConfig())
        assert scan.shape == (33,)
        assert np.allclose(scan, -0.25)

    def test_height_scan_clipped(self):
        field = terrain.generate_track("gap", 10, 5, False)
        scan = height_scan(field, 2.0, 2.0, SensorConfig())
        assert np.all(scan >= -1.0) and np.all(scan <= 1.0)

    def test_height_scan_ignores_camera_noise_settings(self):
        # privilege separation: the scan reads terrain directly
        cfg = RunConfig(n_envs=1, terrain_kinds=("step",))
        import dataclasses
        noisy = dataclasses.replace(cfg, sensor=dataclasses.replace(
            cfg.sensor, noise=NoiseConfig(gaussian_std=0.5, salt_pepper_prob=0.5)))
        w1 = ParkourWorld(cfg, n_envs=1, seed=4)
        w2 = ParkourWorld(noisy, n_envs=1, seed=4)
        assert np.array_equal(w1.heightmap_scan(), w2.heightmap_scan())


class TestObservationAssembly:
    def test_planar_layout_width(self):
        assert ObsLayout.planar(4).total == 17

    def test_quadruped_3d_layout_width(self):
        assert ObsLayout.quadruped_3d(12).total == 45

    def test_parts_concatenated_in_order(self):
        layout = ObsLayout.planar(4)
        obs = layout.assemble([0.1], [0.0, -1.0], [0.5, 0.2],
                              [1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12])
        assert obs.shape == (17,)
        assert obs[0] == 0.1
        assert np.allclose(obs[3:5], [0.5, 0.2])
        assert np.allclose(obs[13:], [9, 10, 11, 12])

    def test_wrong_part_width_rejected(self):
        layout = ObsLayout.planar(4)
        with pytest.raises(ValueError, match="gravity"):
            layout.assemble([0.1], [0.0, -1.0, 0.0], [0.5, 0.2],
                            [1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12])

    def test_3d_layout_assembles_45_wide(self):
        layout = ObsLayout.quadruped_3d(12)
        obs = layout.assemble(np.zeros(3), np.zeros(3), np.zeros(3),
                              np.zeros(12), np.zeros(12), np.zeros(12))
        assert obs.shape == (45,)

    def test_upright_gravity(self):
        assert np.allclose(gravity_in_body(0.0), [0.0, -1.0])

    def test_gravity_rotates_with_pitch(self):
        # rotation-matrix oracle
        pitch = 0.1
        rot = np.array([[np.cos(-pitch), -np.sin(-pitch)],
                        [np.sin(-pitch), np.cos(-pitch)]])
        assert np.allclose(gravity_in_body(pitch), rot @ np.array([0.0, -1.0]))

    def test_privileged_concatenation(self):
        obs = np.arange(17.0)
        vel = np.array([1.0, 0.0, -0.5])
        scan = np.full(33, -0.25)
        s = assemble_privileged(obs, vel, scan)
        assert s.shape == (53,)
        assert np.array_equal(s[:17], obs)
        assert np.array_equal(s[17:20], vel)
        assert np.array_equal(s[20:], scan)


class TestFrameScheduling:
    def test_frame_ids_hold_then_advance(self):
        cfg = RunConfig(n_envs=1, terrain_kinds=("flat",))
        w = ParkourWorld(cfg, n_envs=1, seed=1, randomize_domain_params=False)
        ids = [int(w.frame_id[0])]
        for _ in range(6):
            w.step(np.zeros((1, 4)))
            ids.append(int(w.frame_id[0]))
        # same id through steps 0-4, new id at step 5
        assert ids[:5] == [0, 0, 0, 0, 0]
        assert ids[5] == 1

    def test_history_is_two_most_recent_distinct_frames(self):
        cfg = RunConfig(n_envs=1, terrain_kinds=("flat",))
        w = ParkourWorld(cfg, n_envs=1, seed=1, randomize_domain_params=False)
        frame0 = w.frame_now[0].copy()
        for _ in range(5):
            w.step(np.full((1, 4), 0.05))
        hist = w.depth_history(0)
        assert np.array_equal(hist[1], frame0)
        assert not np.array_equal(hist[0], frame0)

    def test_system_delay_ages_frame_timestamp(self):
        import dataclasses
        cfg = RunConfig(n_envs=1, terrain_kinds=("flat",))
        cfg = dataclasses.replace(cfg, domain_rand=dataclasses.replace(
            cfg.domain_rand, system_delay_s=(0.015, 0.015)))
        w = ParkourWorld(cfg, n_envs=1, seed=1)
        for _ in range(5):
            w.step(np.zeros((1, 4)))
        assert w.frame_time[0] <= w.time[0] - 0.015 + 1e-12

    def test_zero_padded_history_at_episode_start(self):
        cfg = RunConfig(n_envs=1, terrain_kinds=("flat",))
        w = ParkourWorld(cfg, n_envs=1, seed=1)
        assert np.all(w.depth_history(0)[1] == 0.0)


class TestPgmExport:
    def test_pgm_header_and_geometry(self, tmp_path, flat_field):
        img = render_depth(flat_field, CameraPose(2, 0.5, 0.3, 0.5), intrinsics())
        path = tmp_path / "d.pgm"
        save_pgm(img, path, comment="hash=abc")
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n# hash=abc\n64 48\n65535\n")
        assert len(raw) == len(b"P5\n# hash=abc\n64 48\n65535\n") + 64 * 48 * 2
