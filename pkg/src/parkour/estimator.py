"""Recurrent cross-modal state and terrain estimator.

Consumes a short proprioceptive history and the two most recent depth
frames. A conv stack turns the depth pair into visual tokens, an MLP embeds
the proprioceptive history into one token, a shared single-head attention
block lets the modalities attend to each other, and a GRU integrates the
result over time. Four heads read the GRU state:

  * velocity  - explicit base velocity estimate
  * clearance - explicit per-foot terrain clearance estimate
  * terrain_latent - compact encoding of the surrounding height map,
    trained through a decoder that reconstructs the privileged scan
  * (mu, log_sigma) - a variational latent whose sample, decoded together
    with the other heads, predicts the next proprioceptive observation

The training loss is the standard-normal KL of the variational latent plus
unit-weight MSE terms for every enabled head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import EstimatorConfig
from .nn import Conv2d, CrossAttention, Dense, GRUCell, MLP, Module
from .nn import tensor as T
from .nn.tensor import Tensor


def reparameterize(mu: Tensor, log_sigma: Tensor, eps: np.ndarray | Tensor) -> Tensor:
    """Pathwise sample z = mu + exp(log_sigma) * eps."""
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    return mu + T.exp(log_sigma) * eps


def kl_standard_normal(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """KL(q || N(0, I)) summed over latent dims, averaged over the batch."""
    sigma_sq = T.exp(log_sigma * 2.0)
    per_dim = 0.5 * (T.square(mu) + sigma_sq - 1.0 - 2.0 * log_sigma)
    per_sample = T.tsum(per_dim, axis=-1)
    return T.tmean(per_sample) if per_sample.data.ndim else per_sample


@dataclass
class EstimatorOutput:
    velocity: Tensor            # (B, 3)
    clearance: Tensor           # (B, n_feet)
    terrain_latent: Tensor      # (B, terrain_latent_dim)
    mu: Tensor                  # (B, latent_dim)
    log_sigma: Tensor
    z: Tensor
    memory: Tensor              # (B, gru_hidden)

    def policy_feed(self, next_obs_pred: Tensor | None = None) -> np.ndarray:
        """The extra policy inputs [v, h, z_m, z] (or predicted next obs
        replacing z under that ablation), as plain arrays."""
        tail = self.z if next_obs_pred is None else next_obs_pred
        return np.concatenate([self.velocity.data, self.clearance.data,
                               self.terrain_latent.data, tail.data], axis=-1)


@dataclass
class LossTerms:
    kl: Tensor
    next_obs: Tensor | None
    heightmap: Tensor | None
    velocity: Tensor | None
    clearance: Tensor | None
    total: Tensor

    def scalars(self) -> dict[str, float]:
        out = {"kl": float(self.kl.data), "total": float(self.total.data)}
        for name in ("next_obs", "heightmap", "velocity", "clearance"):
            term = getattr(self, name)
            out[name] = float(term.data) if term is not None else 0.0
        return out


class Estimator(Module):
    def __init__(self, cfg: EstimatorConfig, obs_dim: int, scan_dim: int,
                 n_feet: int, image_hw: tuple[int, int],
                 rng: np.random.Generator,
                 obs_center: np.ndarray | None = None,
                 obs_scale: np.ndarray | None = None,
                 depth_range: tuple[float, float] = (0.1, 3.0)):
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.scan_dim = scan_dim
        self.n_feet = n_feet
        self.image_hw = image_hw
        self.obs_center = np.zeros(obs_dim) if obs_center is None else np.asarray(obs_center)
        self.obs_scale = np.ones(obs_dim) if obs_scale is None else np.asarray(obs_scale)
        self.depth_range = depth_range

        h, w = image_hw
        c1, c2 = cfg.conv_channels
        self.conv1 = Conv2d(cfg.depth_frames, c1, 4, rng, stride=4, name="est.conv1")
        self.conv2 = Conv2d(c1, c2, 3, rng, stride=1, padding=1, name="est.conv2")
        fh, fw = h // 4, w // 4
        p = cfg.token_patch
        if fh % p or fw % p:
            raise ValueError(f"feature map {fh}x{fw} not tiled by {p}x{p} patches")
        self.patch_grid = (fh // p, fw // p)
        self.n_tokens = self.patch_grid[0] * self.patch_grid[1]
        self.token_proj = Dense(c2 * p * p, cfg.attn_dim, rng, "est.token_proj")

        hist_dim = cfg.history_len * obs_dim
        self.prop_enc = MLP((hist_dim, cfg.proprio_hidden, cfg.proprio_embed), rng,
                            activation="relu", name="est.prop")
        if cfg.proprio_embed != cfg.attn_dim:
            raise ValueError("proprio_embed must equal attn_dim (it is a token)")
        self.attn = CrossAttention(cfg.attn_dim, rng, name="est.attn")
        self.gru = GRUCell(2 * cfg.attn_dim, cfg.gru_hidden, rng, name="est.gru")

        g = cfg.gru_hidden
        self.head_vel = Dense(g, 3, rng, "est.head_vel")
        self.head_clr = Dense(g, n_feet, rng, "est.head_clr")
        self.head_terrain = Dense(g, cfg.terrain_latent_dim, rng, "est.head_terrain")
        self.head_mu = Dense(g, cfg.latent_dim, rng, "est.head_mu")
        self.head_log_sigma = Dense(g, cfg.latent_dim, rng, "est.head_log_sigma")

        self.dec_heightmap = MLP((cfg.terrain_latent_dim, cfg.decoder_hidden, scan_dim),
                                 rng, activation="relu", name="est.dec_hm")
        dec_in = cfg.latent_dim + 3 + n_feet + cfg.terrain_latent_dim
        self.dec_next_obs = MLP((dec_in, cfg.decoder_hidden, obs_dim), rng,
                                activation="relu", name="est.dec_obs")

    # ------------------------------------------------------------- plumbing

    def initial_memory(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.cfg.gru_hidden))

    def feed_width(self) -> int:
        """Width of the estimator block appended to the policy input."""
        tail = self.obs_dim if self.cfg.feed_next_obs_to_policy else self.cfg.latent_dim
        return 3 + self.n_feet + self.cfg.terrain_latent_dim + tail

    def _normalize_hist(self, obs_hist: Tensor) -> Tensor:
        reps = self.cfg.history_len
        center = np.tile(self.obs_center, reps)
        scale = np.tile(self.obs_scale, reps)
        return (obs_hist - Tensor(center)) * Tensor(scale)

    def _normalize_depth(self, depth: Tensor) -> Tensor:
        lo, hi = self.depth_range
        return (depth - Tensor(np.float64(lo))) * (2.0 / (hi - lo)) - 1.0

    # -------------------------------------------------------------- forward

    def encode(self, obs_hist, depth, memory,
               eps: np.ndarray | None = None) -> EstimatorOutput:
        """One estimator step.

        obs_hist: (B, H1*obs_dim) newest-first concatenated observations.
        depth: (B, H2, H, W) newest-first frames. memory: (B, gru_hidden).
        eps: (B, latent_dim) standard-normal draws for the latent sample;
        None uses the mean (deterministic evaluation).
        """
        obs_hist = obs_hist if isinstance(obs_hist, Tensor) else Tensor(obs_hist)
        depth = depth if isinstance(depth, Tensor) else Tensor(depth)
        memory = memory if isinstance(memory, Tensor) else Tensor(memory)
        bsz = obs_hist.data.shape[0]
        expect = self.cfg.history_len * self.obs_dim
        if obs_hist.data.shape[-1] != expect:
            raise T.ShapeError(
                f"estimator: obs history width {obs_hist.data.shape[-1]} != {expect}")

        feat = T.relu(self.conv2(T.relu(self.conv1(self._normalize_depth(depth)))))
        b, c, fh, fw = feat.data.shape
        p = self.cfg.token_patch
        gh, gw = self.patch_grid
        tokens = T.reshape(feat, (b, c, gh, p, gw, p))
        tokens = T.transpose(tokens, (0, 2, 4, 1, 3, 5))
        tokens = T.reshape(tokens, (b, self.n_tokens, c * p * p))
        vis_tokens = self.token_proj(tokens)

        prop = self.prop_enc(self._normalize_hist(obs_hist))
        prop_token = T.reshape(prop, (bsz, 1, self.cfg.attn_dim))

        mixed = self.attn(T.concat([vis_tokens, prop_token], axis=1))
        vis_summary = T.tmean(T.narrow(mixed, 1, 0, self.n_tokens), axis=1)
        prop_summary = T.reshape(T.narrow(mixed, 1, self.n_tokens, 1),
                                 (bsz, self.cfg.attn_dim))

        new_memory = self.gru(T.concat([vis_summary, prop_summary], axis=-1), memory)

        mu = self.head_mu(new_memory)
        log_sigma = self.head_log_sigma(new_memory)
        z = reparameterize(mu, log_sigma, eps) if eps is not None else mu
        return EstimatorOutput(
            velocity=self.head_vel(new_memory),
            clearance=self.head_clr(new_memory),
            terrain_latent=T.tanh(self.head_terrain(new_memory)),
            mu=mu, log_sigma=log_sigma, z=z, memory=new_memory,
        )

    def decode_heightmap(self, terrain_latent: Tensor) -> Tensor:
        return self.dec_heightmap(terrain_latent)

    def decode_next_obs(self, z: Tensor, velocity: Tensor, clearance: Tensor,
                        terrain_latent: Tensor) -> Tensor:
        joined = T.concat([z, velocity, clearance, terrain_latent], axis=-1)
        normalized = self.dec_next_obs(joined)
        # decoder learns in normalized units; the loss compares raw vectors
        return normalized * Tensor(1.0 / self.obs_scale) + Tensor(self.obs_center)

    # ----------------------------------------------------------------- loss

    def loss(self, out: EstimatorOutput, obs_next, scan, velocity,
             clearance) -> LossTerms:
        """Eq-style unit-weight sum; head toggles only remove MSE terms."""
        cfg = self.cfg
        mse = lambda pred, tgt: T.tmean(T.square(pred - (tgt if isinstance(tgt, Tensor)
                                                         else Tensor(tgt))))
        kl = kl_standard_normal(out.mu, out.log_sigma)
        total = kl
        t_next = t_hm = t_vel = t_clr = None
        if cfg.learn_next_obs:
            pred = self.decode_next_obs(out.z, out.velocity, out.clearance,
                                        out.terrain_latent)
            t_next = mse(pred, obs_next)
            total = total + t_next
        if cfg.learn_heightmap:
            t_hm = mse(self.decode_heightmap(out.terrain_latent), scan)
            total = total + t_hm
        if cfg.learn_velocity:
            t_vel = mse(out.velocity, velocity)
            total = total + t_vel
        if cfg.learn_clearance:
            t_clr = mse(out.clearance, clearance)
            total = total + t_clr
        return LossTerms(kl=kl, next_obs=t_next, heightmap=t_hm,
                         velocity=t_vel, clearance=t_clr, total=total)


ABLATION_VARIANTS = {
    "full": {},
    "no_next_obs": {"learn_next_obs": False},
    "no_heightmap": {"learn_heightmap": False},
    "no_velocity": {"learn_velocity": False},
    "no_clearance": {"learn_clearance": False},
    "next_obs_input": {"feed_next_obs_to_policy": True},
}


def apply_variant(cfg: EstimatorConfig, variant: str) -> EstimatorConfig:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; "
                         f"expected one of {sorted(ABLATION_VARIANTS)}")
    import dataclasses
    return dataclasses.replace(cfg, **ABLATION_VARIANTS[variant])
