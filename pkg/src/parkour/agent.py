"""Asymmetric actor-critic networks.

The actor sees only deployable signals: the proprioceptive observation
plus the estimator's outputs. The critic additionally consumes the
privileged state (true velocity and height scan); it has no structural
connection to the actor's input path.
"""

from __future__ import annotations

import numpy as np

from .config import PPOConfig
from .nn import MLP, Module
from .nn import tensor as T
from .nn.tensor import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


def obs_normalization(robot, layout) -> tuple[np.ndarray, np.ndarray]:
    """Fixed affine (center, scale) conditioning the raw observation.

    Applied inside the networks; the observation contract itself stays raw.
    """
    center = np.zeros(layout.total)
    scale = np.ones(layout.total)
    i = 0
    scale[i:i + layout.ang_vel] = 0.25
    i += layout.ang_vel
    center[i + layout.gravity - 1] = -1.0         # gravity z rests at -1 upright
    i += layout.gravity
    scale[i] = 1.0 / 1.5                           # forward command range
    if layout.command > 1:
        scale[i + 1:i + layout.command] = 1.0 / 1.2
    i += layout.command
    center[i:i + layout.q] = np.asarray(robot.stand_pose)[:layout.q]
    i += layout.q
    scale[i:i + layout.qd] = 0.05
    i += layout.qd
    scale[i:i + layout.prev_action] = 1.0 / robot.action_bound
    return center, scale


class PolicyNet(Module):
    """Gaussian policy over joint-angle offsets; state-independent log-std."""

    def __init__(self, obs_dim: int, est_dim: int, n_actions: int, cfg: PPOConfig,
                 rng: np.random.Generator,
                 obs_center: np.ndarray | None = None,
                 obs_scale: np.ndarray | None = None):
        self.obs_dim = obs_dim
        self.est_dim = est_dim
        self.n_actions = n_actions
        self.cfg = cfg
        self.obs_center = np.zeros(obs_dim) if obs_center is None else np.asarray(obs_center)
        self.obs_scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale)
        dims = (obs_dim + est_dim, *cfg.actor_hidden, n_actions)
        self.mlp = MLP(dims, rng, activation="tanh", name="actor")
        self.log_std = T.parameter(np.full(n_actions, cfg.init_log_std), "actor.log_std")

    def mean(self, obs, est_feed) -> Tensor:
        obs = obs if isinstance(obs, Tensor) else Tensor(obs)
        est_feed = est_feed if isinstance(est_feed, Tensor) else Tensor(est_feed)
        normed = (obs - Tensor(self.obs_center)) * Tensor(self.obs_scale)
        return self.mlp(T.concat([normed, est_feed], axis=-1))

    def log_prob(self, mean: Tensor, actions) -> Tensor:
        """Diagonal-Gaussian log density of recorded actions, (B,)."""
        actions = actions if isinstance(actions, Tensor) else Tensor(actions)
        inv_sigma = T.exp(-self.log_std)
        zscore = (actions - mean) * inv_sigma
        per_dim = -0.5 * T.square(zscore) - self.log_std - 0.5 * LOG_2PI
        return T.tsum(per_dim, axis=-1)

    def entropy(self) -> Tensor:
        return T.tsum(self.log_std + 0.5 * (LOG_2PI + 1.0))

    def act(self, obs: np.ndarray, est_feed: np.ndarray,
            rng: np.random.Generator | None = None,
            deterministic: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Sample (or take the mean) action with its log-prob, tape-free."""
        with T.no_grad():
            mean = self.mean(obs, est_feed).data
        if deterministic or rng is None:
            actions = mean
        else:
            sigma = np.exp(self.log_std.data)
            actions = mean + sigma * rng.standard_normal(mean.shape)
        sigma = np.exp(self.log_std.data)
        z = (actions - mean) / sigma
        log_prob = np.sum(-0.5 * z * z - self.log_std.data - 0.5 * LOG_2PI, axis=-1)
        return actions, log_prob

    def clamp_log_std(self) -> None:
        np.maximum(self.log_std.data, self.cfg.min_log_std, out=self.log_std.data)


class ValueNet(Module):
    """Critic over the privileged state only."""

    def __init__(self, priv_dim: int, cfg: PPOConfig, rng: np.random.Generator,
                 priv_center: np.ndarray | None = None,
                 priv_scale: np.ndarray | None = None):
        self.priv_dim = priv_dim
        self.priv_center = np.zeros(priv_dim) if priv_center is None else np.asarray(priv_center)
        self.priv_scale = np.ones(priv_dim) if priv_scale is None else np.asarray(priv_scale)
        self.mlp = MLP((priv_dim, *cfg.critic_hidden, 1), rng, activation="tanh",
                       name="critic")

    def value(self, priv) -> Tensor:
        priv = priv if isinstance(priv, Tensor) else Tensor(priv)
        normed = (priv - Tensor(self.priv_center)) * Tensor(self.priv_scale)
        return T.reshape(self.mlp(normed), (priv.data.shape[0],))

    def predict(self, priv: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.value(priv).data
