import math

import numpy as np
import pytest

from parkour.agent import PolicyNet, ValueNet, obs_normalization
from parkour.config import PPOConfig, RobotConfig
from parkour.sensors import ObsLayout
from parkour.world import apply_action


def make_actor(seed=0, est_dim=101):
    return PolicyNet(17, est_dim, 4, PPOConfig(), np.random.default_rng(seed))


class TestPolicy:
    def test_zero_weight_net_composes_to_stand_pose(self):
        actor = make_actor()
        for layer in actor.mlp.layers:
            layer.w.data[:] = 0.0
            layer.b.data[:] = 0.0
        a, _ = actor.act(np.zeros((1, 17)), np.zeros((1, 101)), deterministic=True)
        assert np.allclose(a, 0.0)
        robot = RobotConfig()
        assert np.allclose(apply_action(a[0], robot), robot.stand_pose)

    def test_log_prob_matches_closed_form(self):
        actor = make_actor()
        rng = np.random.default_rng(1)
        obs = rng.standard_normal((3, 17))
        feed = rng.standard_normal((3, 101))
        actions, logp = actor.act(obs, feed, rng)
        mean = actor.mean(obs, feed).data
        sigma = np.exp(actor.log_std.data)
        want = (-0.5 * ((actions - mean) / sigma) ** 2
                - np.log(sigma) - 0.5 * math.log(2 * math.pi)).sum(axis=-1)
        assert np.allclose(logp, want, atol=1e-12)

    def test_deterministic_mode_repeatable(self):
        actor = make_actor()
        obs = np.random.default_rng(2).standard_normal((2, 17))
        feed = np.random.default_rng(3).standard_normal((2, 101))
        a1, _ = actor.act(obs, feed, deterministic=True)
        a2, _ = actor.act(obs, feed, deterministic=True)
        assert np.array_equal(a1, a2)

    def test_log_std_floor_applied(self):
        actor = make_actor()
        actor.log_std.data[:] = -10.0
        actor.clamp_log_std()
        assert np.all(actor.log_std.data == PPOConfig().min_log_std)

    def test_entropy_closed_form(self):
        actor = make_actor()
        actor.log_std.data[:] = -1.0
        want = 4 * (-1.0 + 0.5 * (math.log(2 * math.pi) + 1.0))
        assert float(actor.entropy().data) == pytest.approx(want)


class TestAsymmetry:
    def test_actor_is_structurally_blind_to_privilege(self):
        # the actor is constructed from obs+estimator widths alone; there is
        # no parameter or input slot that could receive the privileged state
        actor = make_actor()
        assert actor.mlp.layers[0].w.data.shape[0] == 17 + 101
        priv = np.zeros((1, 53))
        with pytest.raises(Exception):
            actor.act(priv, np.zeros((1, 101)))

    def test_critic_consumes_privileged_only(self):
        critic = ValueNet(53, PPOConfig(), np.random.default_rng(0))
        out = critic.predict(np.zeros((4, 53)))
        assert out.shape == (4,)

    def test_deleting_privilege_breaks_only_the_critic(self):
        # dropping the privileged tail changes the critic's input assembly;
        # the actor's forward pass runs unchanged
        actor = make_actor()
        critic = ValueNet(53, PPOConfig(), np.random.default_rng(1))
        obs = np.zeros((1, 17))
        feed = np.zeros((1, 101))
        actor.act(obs, feed, deterministic=True)      # actor fine without priv
        with pytest.raises(Exception):
            critic.predict(obs)                        # critic needs s_t


class TestNormalizationConstants:
    def test_shapes_match_layout(self):
        center, scale = obs_normalization(RobotConfig(), ObsLayout.planar(4))
        assert center.shape == (17,) and scale.shape == (17,)

    def test_gravity_and_stand_centering(self):
        robot = RobotConfig()
        center, _ = obs_normalization(robot, ObsLayout.planar(4))
        assert center[2] == -1.0                      # gravity z channel
        assert np.allclose(center[5:9], robot.stand_pose)
