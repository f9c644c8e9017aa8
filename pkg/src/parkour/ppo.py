"""Rollout collection, GAE, PPO updates, and concurrent estimator regression.

One training iteration: collect a fixed horizon from all environments with
frozen parameters, compute advantages, run the clipped-surrogate update on
the actor-critic, then one regression epoch of the estimator on the same
buffer. The estimator's outputs enter the policy as constants (stop
gradient) unless ``backprop_into_estimator`` is flipped on.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import PolicyNet, ValueNet, obs_normalization
from .config import RunConfig, config_hash, to_dict
from .estimator import Estimator, apply_variant
from .nn import Adam, clip_grad_norm, load_arrays, save_arrays
from .nn import tensor as T
from .nn.tensor import Tensor
from .world import REWARD_NAMES, ParkourWorld


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss."""


@dataclass
class RolloutBuffer:
    """Fixed-horizon on-policy storage, (T, N, ...) layout."""

    obs: np.ndarray
    obs_hist: np.ndarray
    depth_keys: np.ndarray           # (T, N, 2) indices into frame_pool
    memory_in: np.ndarray
    eps: np.ndarray
    est_feed: np.ndarray
    priv: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    reward_terms: dict[str, np.ndarray]
    target_obs_next: np.ndarray
    target_scan: np.ndarray
    target_vel: np.ndarray
    target_clearance: np.ndarray
    frame_pool: np.ndarray           # (P, H, W); index 0 is the zero frame
    last_values: np.ndarray = field(default=None)  # type: ignore[assignment]
    advantages: np.ndarray = field(default=None)   # type: ignore[assignment]
    returns: np.ndarray = field(default=None)      # type: ignore[assignment]

    @property
    def horizon(self) -> int:
        return self.obs.shape[0]

    @property
    def n_envs(self) -> int:
        return self.obs.shape[1]

    def flat(self, arr: np.ndarray) -> np.ndarray:
        return arr.reshape(arr.shape[0] * arr.shape[1], *arr.shape[2:])

    def depth_batch(self, flat_idx: np.ndarray) -> np.ndarray:
        keys = self.flat(self.depth_keys)[flat_idx]          # (B, 2)
        return self.frame_pool[keys]                         # (B, 2, H, W)


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                last_values: np.ndarray, gamma: float = 0.99,
                lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage recursion with episode-boundary masking."""
    horizon = rewards.shape[0]
    adv = np.zeros_like(rewards)
    carry = np.zeros_like(last_values)
    for t in reversed(range(horizon)):
        nonterminal = 1.0 - dones[t]
        next_value = values[t + 1] if t < horizon - 1 else last_values
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        carry = delta + gamma * lam * nonterminal * carry
        adv[t] = carry
    return adv, adv + values


class Trainer:
    """Owns the world, the three networks, their optimizers, and all rng."""

    def __init__(self, cfg: RunConfig, variant: str = "full",
                 world: ParkourWorld | None = None):
        self.cfg = cfg
        self.variant = variant
        est_cfg = apply_variant(cfg.estimator, variant)
        self.est_cfg = est_cfg
        self.world = world if world is not None else ParkourWorld(cfg)
        self.n = self.world.n
        self.layout = self.world.layout
        self.obs_dim = self.layout.total
        self.scan_dim = cfg.sensor.scan_points
        self.n_feet = 2
        self.priv_dim = self.obs_dim + 3 + self.scan_dim
        self.iteration = 0
        self.total_steps = 0

        center, scale = obs_normalization(cfg.robot, self.layout)
        priv_center = np.concatenate([center, np.zeros(3), np.zeros(self.scan_dim)])
        priv_scale = np.concatenate([scale, np.full(3, 1.0), np.full(self.scan_dim, 2.0)])

        init_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, 101])))
        self.estimator = Estimator(
            est_cfg, self.obs_dim, self.scan_dim, self.n_feet,
            (cfg.sensor.image_height, cfg.sensor.image_width), init_rng,
            obs_center=center, obs_scale=scale,
            depth_range=(cfg.sensor.depth_min, cfg.sensor.depth_max))
        self.actor = PolicyNet(self.obs_dim, self.estimator.feed_width(),
                               cfg.robot.n_joints, cfg.ppo, init_rng,
                               obs_center=center, obs_scale=scale)
        self.critic = ValueNet(self.priv_dim, cfg.ppo, init_rng,
                               priv_center=priv_center, priv_scale=priv_scale)

        self.backprop_into_estimator = False
        self.ac_params = {**{f"actor.{k}": v for k, v in self.actor.parameters().items()},
                          **{f"critic.{k}": v for k, v in self.critic.parameters().items()}}
        self.est_params = {f"est.{k}": v for k, v in self.estimator.parameters().items()}
        self.ac_opt = Adam(self.ac_params, lr=cfg.ppo.learning_rate)
        self.est_opt = Adam(self.est_params, lr=est_cfg.learning_rate)

        seed = cfg.seed & 0xFFFFFFFF
        self.action_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, 201])))
        self.eps_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, 202])))
        self.shuffle_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, 203])))

        self.obs_hist = np.zeros((self.n, est_cfg.history_len, self.obs_dim))
        self.memory = self.estimator.initial_memory(self.n)
        self._push_obs(self.world.observe(), np.arange(self.n))

    # ------------------------------------------------------------- plumbing

    def _push_obs(self, obs: np.ndarray, fresh_ids: np.ndarray | None = None) -> None:
        if fresh_ids is not None and len(fresh_ids):
            self.obs_hist[fresh_ids] = 0.0
        self.obs_hist = np.roll(self.obs_hist, 1, axis=1)
        self.obs_hist[:, 0] = obs

    def _hist_flat(self) -> np.ndarray:
        return self.obs_hist.reshape(self.n, -1)

    def _encode_step(self, eps: np.ndarray | None):
        """Estimator forward for the current signals (tape-free)."""
        depth = np.stack([self.world.frame_now, self.world.frame_prev], axis=1)
        with T.no_grad():
            out = self.estimator.encode(self._hist_flat(), depth, self.memory, eps)
            if self.est_cfg.feed_next_obs_to_policy:
                pred = self.estimator.decode_next_obs(out.z, out.velocity,
                                                      out.clearance, out.terrain_latent)
                feed = out.policy_feed(pred)
            else:
                feed = out.policy_feed()
        return out, feed

    # -------------------------------------------------------------- collect

    def collect(self, horizon: int | None = None, deterministic: bool = False,
                workers: int | None = None) -> tuple[RolloutBuffer, dict]:
        cfg = self.cfg
        horizon = horizon or cfg.ppo.horizon
        workers = workers if workers is not None else cfg.workers
        n = self.n
        est_cfg = self.est_cfg
        h_img, w_img = cfg.sensor.image_height, cfg.sensor.image_width

        shape = lambda *tail: np.zeros((horizon, n, *tail))
        buf = RolloutBuffer(
            obs=shape(self.obs_dim),
            obs_hist=shape(est_cfg.history_len * self.obs_dim),
            depth_keys=np.zeros((horizon, n, 2), dtype=np.int64),
            memory_in=shape(est_cfg.gru_hidden),
            eps=shape(est_cfg.latent_dim),
            est_feed=shape(self.estimator.feed_width()),
            priv=shape(self.priv_dim),
            actions=shape(cfg.robot.n_joints),
            log_probs=shape(),
            values=shape(),
            rewards=shape(),
            dones=shape(),
            reward_terms={k: shape() for k in REWARD_NAMES},
            target_obs_next=shape(self.obs_dim),
            target_scan=shape(self.scan_dim),
            target_vel=shape(3),
            target_clearance=shape(self.n_feet),
            frame_pool=np.zeros((1, h_img, w_img)),
        )

        pool: list[np.ndarray] = [np.zeros((h_img, w_img))]
        pool_index: dict[tuple[int, int, int], int] = {}

        def frame_key(i: int, fid: int) -> int:
            if fid < 0:
                return 0
            key = (i, int(self.world.episode_idx[i]), fid)
            if key not in pool_index:
                pool_index[key] = len(pool)
                pool.append((self.world.frame_now if fid == self.world.frame_id[i]
                             else self.world.frame_prev)[i].copy())
            return pool_index[key]

        ep_lengths: list[int] = []
        ep_traversed: list[float] = []
        sample_eps = None

        for t in range(horizon):
            obs = self.world.observe()
            buf.obs[t] = obs
            buf.obs_hist[t] = self._hist_flat()
            buf.memory_in[t] = self.memory
            for i in range(n):
                fid = int(self.world.frame_id[i])
                buf.depth_keys[t, i, 0] = frame_key(i, fid)
                buf.depth_keys[t, i, 1] = frame_key(i, fid - 1)

            buf.target_scan[t] = self.world.heightmap_scan()
            buf.target_vel[t] = self.world.true_velocity()
            buf.target_clearance[t] = self.world.foot_clearances()

            if deterministic and not est_cfg.sample_latent_in_eval:
                sample_eps = None
            else:
                sample_eps = self.eps_rng.standard_normal((n, est_cfg.latent_dim))
            est_out, est_feed = self._encode_step(sample_eps)
            buf.eps[t] = 0.0 if sample_eps is None else sample_eps
            buf.est_feed[t] = est_feed

            priv = self.world.privileged(obs)
            buf.priv[t] = priv
            actions, log_probs = self.actor.act(obs, est_feed, self.action_rng,
                                                deterministic=deterministic)
            values = self.critic.predict(priv)
            buf.actions[t] = actions
            buf.log_probs[t] = log_probs
            buf.values[t] = values

            step_counts = self.world.step_count.copy()
            info = self.world.step(actions, workers=workers)
            buf.rewards[t] = info["reward"].total
            buf.dones[t] = info["done"].astype(np.float64)
            for k in REWARD_NAMES:
                buf.reward_terms[k][t] = info["reward"].terms[k]
            buf.target_obs_next[t] = info["obs_next"]

            reset_ids = info["reset_ids"]
            for i in reset_ids:
                ep_lengths.append(int(step_counts[i]) + 1)
                ep_traversed.append(float(info["traversed"][i]))
            self.memory = est_out.memory.data.copy()
            if len(reset_ids):
                self.memory[reset_ids] = 0.0
            self._push_obs(self.world.observe(), reset_ids)
            self.total_steps += n

        buf.frame_pool = np.stack(pool)
        buf.last_values = self.critic.predict(self.world.privileged())
        stats = {
            "episodes": len(ep_lengths),
            "ep_len_mean": float(np.mean(ep_lengths)) if ep_lengths else 0.0,
            "traversed_mean": float(np.mean(ep_traversed)) if ep_traversed else 0.0,
            "level_mean": float(np.mean(self.world.level)),
        }
        return buf, stats

    # --------------------------------------------------------------- update

    def ppo_update(self, buf: RolloutBuffer) -> dict:
        cfg = self.cfg.ppo
        buf.advantages, buf.returns = compute_gae(
            buf.rewards, buf.values, buf.dones, buf.last_values,
            cfg.gamma, cfg.gae_lambda)
        adv = buf.flat(buf.advantages)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        obs = buf.flat(buf.obs)
        est_feed = buf.flat(buf.est_feed)
        priv = buf.flat(buf.priv)
        actions = buf.flat(buf.actions)
        old_logp = buf.flat(buf.log_probs)
        returns = buf.flat(buf.returns)
        total = obs.shape[0]

        stats = {"surrogate": 0.0, "value_loss": 0.0, "entropy": 0.0,
                 "clip_frac": 0.0, "grad_norm": 0.0}
        n_batches = 0
        for _ in range(cfg.epochs):
            perm = self.shuffle_rng.permutation(total)
            for chunk in np.array_split(perm, cfg.minibatches):
                mean = self.actor.mean(obs[chunk], est_feed[chunk])
                logp = self.actor.log_prob(mean, actions[chunk])
                ratio = T.exp(logp - Tensor(old_logp[chunk]))
                adv_t = Tensor(adv[chunk])
                clipped = T.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
                surrogate = -T.tmean(T.minimum(ratio * adv_t, clipped * adv_t))
                value = self.critic.value(priv[chunk])
                value_loss = T.tmean(T.square(value - Tensor(returns[chunk])))
                entropy = self.actor.entropy()
                loss = surrogate + cfg.value_coef * value_loss \
                    - cfg.entropy_coef * entropy
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite PPO loss at iteration {self.iteration}")

                for p in self.ac_params.values():
                    p.zero_grad()
                loss.backward()
                norm = clip_grad_norm(self.ac_params, cfg.max_grad_norm)
                self.ac_opt.step()
                self.actor.clamp_log_std()

                stats["surrogate"] += float(surrogate.data)
                stats["value_loss"] += float(value_loss.data)
                stats["entropy"] += float(entropy.data)
                stats["clip_frac"] += float(np.mean(
                    np.abs(ratio.data - 1.0) > cfg.clip_ratio))
                stats["grad_norm"] += norm
                n_batches += 1
        return {k: v / max(n_batches, 1) for k, v in stats.items()}

    def estimator_update(self, buf: RolloutBuffer) -> dict:
        cfg = self.cfg.ppo
        obs_hist = buf.flat(buf.obs_hist)
        memory_in = buf.flat(buf.memory_in)
        eps = buf.flat(buf.eps)
        t_obs = buf.flat(buf.target_obs_next)
        t_scan = buf.flat(buf.target_scan)
        t_vel = buf.flat(buf.target_vel)
        t_clr = buf.flat(buf.target_clearance)
        total = obs_hist.shape[0]

        sums: dict[str, float] = {}
        n_batches = 0
        perm = self.shuffle_rng.permutation(total)
        for chunk in np.array_split(perm, cfg.minibatches):
            depth = buf.depth_batch(chunk)
            out = self.estimator.encode(obs_hist[chunk], depth, memory_in[chunk],
                                        eps[chunk])
            terms = self.estimator.loss(out, t_obs[chunk], t_scan[chunk],
                                        t_vel[chunk], t_clr[chunk])
            if not np.isfinite(terms.total.data):
                raise TrainingError(
                    f"non-finite estimator loss at iteration {self.iteration}")
            for p in self.est_params.values():
                p.zero_grad()
            terms.total.backward()
            clip_grad_norm(self.est_params, cfg.max_grad_norm)
            self.est_opt.step()
            for k, v in terms.scalars().items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        return {f"est_{k}": v / max(n_batches, 1) for k, v in sums.items()}

    def train_iteration(self, workers: int | None = None) -> dict:
        t0 = time.perf_counter()
        buf, ep_stats = self.collect(workers=workers)
        ppo_stats = self.ppo_update(buf)
        est_stats = self.estimator_update(buf)
        self.iteration += 1

        row = {"iteration": self.iteration, "steps": self.total_steps}
        for k in REWARD_NAMES:
            row[f"reward_{k}"] = float(buf.reward_terms[k].mean())
        row["reward_total"] = float(buf.rewards.mean())
        row.update(ep_stats)
        row.update(ppo_stats)
        row.update(est_stats)
        row["wall_s"] = time.perf_counter() - t0
        return row

    # ----------------------------------------------------------- checkpoint

    def _rng_state(self) -> dict:
        enc = lambda g: json.loads(json.dumps(g.bit_generator.state))
        return {
            "action": enc(self.action_rng), "eps": enc(self.eps_rng),
            "shuffle": enc(self.shuffle_rng),
            "world_noise": [enc(g) for g in self.world._noise_rngs],
        }

    def _load_rng_state(self, state: dict) -> None:
        self.action_rng.bit_generator.state = state["action"]
        self.eps_rng.bit_generator.state = state["eps"]
        self.shuffle_rng.bit_generator.state = state["shuffle"]
        for g, s in zip(self.world._noise_rngs, state["world_noise"]):
            g.bit_generator.state = s

    def save_checkpoint(self, path: str | Path) -> None:
        arrays = {k: p.data for k, p in {**self.ac_params, **self.est_params}.items()}
        for tag, opt in (("ac", self.ac_opt), ("est", self.est_opt)):
            st = opt.state_dict()
            for k, v in st["m"].items():
                arrays[f"opt.{tag}.m.{k}"] = v
            for k, v in st["v"].items():
                arrays[f"opt.{tag}.v.{k}"] = v
        arrays["curriculum.level"] = self.world.level.astype(np.int64)
        arrays["world.episode_idx"] = self.world.episode_idx.astype(np.int64)
        meta = {
            "config_hash": config_hash(self.cfg),
            "config": to_dict(self.cfg),
            "variant": self.variant,
            "iteration": self.iteration,
            "total_steps": self.total_steps,
            "opt_t": {"ac": self.ac_opt.t, "est": self.est_opt.t},
            "rng": self._rng_state(),
        }
        save_arrays(path, arrays, meta)

    def load_checkpoint(self, path: str | Path, strict_hash: bool = True) -> dict:
        meta, arrays = load_arrays(path)
        if strict_hash and meta.get("config_hash") != config_hash(self.cfg):
            raise ValueError(
                "checkpoint was produced by a different configuration "
                f"({meta.get('config_hash')} != {config_hash(self.cfg)}); "
                "pass --allow-config-mismatch to override")
        for key, p in {**self.ac_params, **self.est_params}.items():
            stored = arrays[key]
            if stored.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {key!r}: "
                                 f"{stored.shape} vs {p.data.shape}")
            p.data = stored.copy()
        for tag, opt in (("ac", self.ac_opt), ("est", self.est_opt)):
            opt.t = int(meta["opt_t"][tag])
            for k in opt.m:
                opt.m[k] = arrays[f"opt.{tag}.m.{k}"].copy()
                opt.v[k] = arrays[f"opt.{tag}.v.{k}"].copy()
        self.world.level = arrays["curriculum.level"].astype(np.int64)
        self.world.episode_idx = arrays["world.episode_idx"].astype(np.int64)
        self.iteration = int(meta["iteration"])
        self.total_steps = int(meta["total_steps"])
        self._load_rng_state(meta["rng"])
        return meta


METRIC_COLUMNS = (["iteration", "steps"]
                  + [f"reward_{k}" for k in REWARD_NAMES]
                  + ["reward_total", "episodes", "ep_len_mean", "traversed_mean",
                     "level_mean", "surrogate", "value_loss", "entropy",
                     "clip_frac", "grad_norm", "est_kl", "est_next_obs",
                     "est_heightmap", "est_velocity", "est_clearance",
                     "est_total"])
# wall_s stays out of the CSV: metrics files are part of the bit-for-bit
# determinism contract and wall-clock would break it


def metrics_line(row: dict) -> str:
    return ",".join(f"{row.get(col, 0.0):.10g}" if col not in ("iteration", "steps")
                    else str(row.get(col, 0)) for col in METRIC_COLUMNS)


def run_training(cfg: RunConfig, out_dir: str | Path, variant: str = "full",
                 resume_from: str | Path | None = None,
                 log_every: int = 1, quiet: bool = False) -> Trainer:
    """Full training loop with metrics CSV and periodic atomic checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=2) + "\n")

    trainer = Trainer(cfg, variant=variant)
    metrics_path = out / "metrics.csv"
    if resume_from is not None:
        trainer.load_checkpoint(resume_from)
        mode = "a"
    else:
        mode = "w"
    with open(metrics_path, mode) as fh:
        if mode == "w":
            fh.write(f"# config_hash={chash} variant={variant}\n")
            fh.write(",".join(METRIC_COLUMNS) + "\n")
        while trainer.iteration < cfg.iterations:
            row = trainer.train_iteration()
            if trainer.iteration % log_every == 0 or trainer.iteration == cfg.iterations:
                fh.write(metrics_line(row) + "\n")
                fh.flush()
            if not quiet:
                print(f"iter {row['iteration']:4d} reward {row['reward_total']:+.3f} "
                      f"lin {row['reward_lin_tracking']:.3f} "
                      f"eplen {row['ep_len_mean']:.0f} level {row['level_mean']:.2f}",
                      flush=True)
            if (trainer.iteration % cfg.checkpoint_every == 0
                    or trainer.iteration == cfg.iterations):
                trainer.save_checkpoint(out / "checkpoint.bin")
    trainer.save_checkpoint(out / "checkpoint.bin")
    return trainer
