"""Rollout collection, GAE and the clipped PPO update."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .agent import entropy_terms, log_prob_terms, pad_codes
from .environment import RewardConfig, rollout_episode
from .errors import ConfigError, TrainingError
from .nn import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ConfigError("gamma and lambda must lie in [0, 1]")


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    epochs: int = 4
    minibatch_size: int = 64
    lr: float = 3e-4
    normalize_advantages: bool = True

    def __post_init__(self):
        if self.clip <= 0:
            raise ConfigError("clip epsilon must be positive")
        if self.value_coef < 0 or self.entropy_coef < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ConfigError("epochs and minibatch size must be at least 1")


def compute_gae(rewards, values, bootstrap=0.0, cfg: GaeConfig = GaeConfig()):
    """Advantages by backward recursion, and value targets ``A + V_old``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("cannot compute advantages of an empty trajectory")
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have the same length")
    next_values = np.append(values[1:], bootstrap)
    deltas = rewards + cfg.gamma * next_values - values
    adv = np.zeros_like(deltas)
    running = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        running = deltas[t] + cfg.gamma * cfg.lam * running
        adv[t] = running
    return adv, adv + values


@dataclass
class RolloutBuffer:
    records: list = field(default_factory=list)
    advantages: np.ndarray = None
    targets: np.ndarray = None

    @classmethod
    def from_trajectories(cls, trajectories, cfg: GaeConfig = GaeConfig()):
        records, advs, targets = [], [], []
        for traj in trajectories:
            adv, tgt = compute_gae([r.reward for r in traj], [r.value for r in traj], 0.0, cfg)
            records.extend(traj)
            advs.append(adv)
            targets.append(tgt)
        return cls(records, np.concatenate(advs), np.concatenate(targets))

    def __len__(self):
        return len(self.records)

    @property
    def old_log_probs(self):
        return np.array([r.log_prob for r in self.records])

    @property
    def old_values(self):
        return np.array([r.value for r in self.records])


@dataclass
class PpoLosses:
    l_clip: float
    l_vf: float
    entropy: float
    total: float
    mean_ratio: float
    clip_fraction: float
    ratios: np.ndarray = field(repr=False, default=None)


def normalize(adv):
    adv = adv - adv.mean()
    std = adv.std()
    return adv / std if std > 1e-12 else adv


def ppo_losses(records, advantages, targets, agent, cfg: PpoConfig, lambda_disc, backward=False):
    """Clipped surrogate, value and entropy terms on a set of records.

    With ``backward=True`` the gradient of the total loss is accumulated into
    the agent's parameters.
    """
    codes, valid = pad_codes([r.codes for r in records], agent.cfg.d_latent)
    queries = np.stack([r.query for r in records])
    bits = np.zeros(valid.shape, dtype=bool)
    for b, r in enumerate(records):
        bits[b, : len(r.action)] = r.action
    steps = np.array([r.step for r in records])
    old_logp = np.array([r.log_prob for r in records])
    adv = np.asarray(advantages, dtype=np.float64)
    if cfg.normalize_advantages:
        adv = normalize(adv)
    targets = np.asarray(targets, dtype=np.float64)

    out = agent.forward(codes, valid, queries)
    logp, dlogp = log_prob_terms(out.probs, bits, steps, lambda_disc, valid)
    ratio = np.exp(logp - old_logp)
    if not np.all(np.isfinite(ratio)):
        bad = int(np.flatnonzero(~np.isfinite(ratio))[0])
        raise TrainingError(
            f"non-finite probability ratio at record {bad} (sample {records[bad].sample_seed}, step {records[bad].step})"
        )
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    surrogate = np.minimum(unclipped_obj, clipped_obj)
    ent, dent = entropy_terms(out.probs, steps, lambda_disc, valid)
    v_err = out.values - targets

    m = len(records)
    l_clip = float(surrogate.mean())
    l_vf = float(np.mean(v_err**2))
    l_ent = float(ent.mean())
    total = -l_clip + cfg.value_coef * l_vf - cfg.entropy_coef * l_ent
    if backward:
        # d surrogate / d logp is ratio*A where the unclipped branch is the minimum
        active = unclipped_obj <= clipped_obj
        dsurr = np.where(active, ratio * adv, 0.0)
        dlogits = (-dsurr[:, None] * dlogp - cfg.entropy_coef * dent) / m
        dvalues = cfg.value_coef * 2.0 * v_err / m
        agent.backward(dlogits=dlogits, dvalues=dvalues)
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > cfg.clip))
    return PpoLosses(l_clip, l_vf, l_ent, total, float(ratio.mean()), clip_frac, ratio)


@dataclass
class TrainMetrics:
    mean_ratio: float = 0.0
    clip_fraction: float = 0.0
    l_clip: float = 0.0
    l_vf: float = 0.0
    entropy: float = 0.0
    total: float = 0.0
    mean_reward: float = 0.0
    first_epoch_clip_fraction: float = 0.0


def ppo_update(buffer, agent, cfg: PpoConfig, lambda_disc, rng, optimizer=None):
    optimizer = optimizer or Adam(agent.parameters(), lr=cfg.lr)
    n = len(buffer)
    stats = []
    first_clip = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            agent.zero_grad()
            losses = ppo_losses(
                [buffer.records[i] for i in idx], buffer.advantages[idx], buffer.targets[idx],
                agent, cfg, lambda_disc, backward=True,
            )
            if not np.isfinite(losses.total):
                raise TrainingError(f"PPO loss became {losses.total} in epoch {epoch}")
            optimizer.step()
            stats.append(losses)
            if epoch == 0:
                first_clip.append(losses.clip_fraction)
    return TrainMetrics(
        mean_ratio=float(np.mean([s.mean_ratio for s in stats])),
        clip_fraction=float(np.mean([s.clip_fraction for s in stats])),
        l_clip=float(np.mean([s.l_clip for s in stats])),
        l_vf=float(np.mean([s.l_vf for s in stats])),
        entropy=float(np.mean([s.entropy for s in stats])),
        total=float(np.mean([s.total for s in stats])),
        mean_reward=float(np.mean([r.reward for r in buffer.records])),
        first_epoch_clip_fraction=float(np.mean(first_clip)) if first_clip else 0.0,
    )


@dataclass(frozen=True)
class RlConfig:
    iterations: int = 60
    rollout_batch: int = 128
    t_max: int = 3
    lambda_disc: float = 0.5
    gae: GaeConfig = GaeConfig()
    ppo: PpoConfig = PpoConfig()
    reward: RewardConfig = RewardConfig()


def train_rl(samples, codes, agent, cfg: RlConfig, rng, log_fn=None):
    """PPO fine-tuning on a pool of training samples with precomputed codes.

    Each iteration draws ``rollout_batch`` samples, rolls out ``t_max`` steps,
    computes GAE per trajectory and runs one PPO update.  Returns the metric rows.
    """
    optimizer = Adam(agent.parameters(), lr=cfg.ppo.lr)
    rows = []
    for it in range(cfg.iterations):
        pick = rng.choice(len(samples), size=cfg.rollout_batch, replace=False)
        batch = [samples[i] for i in pick]
        episode_seeds = rng.integers(0, 2**32, size=len(batch))
        trajs = rollout_episode(batch, [codes[i] for i in pick], agent, cfg.t_max, cfg.lambda_disc,
                                cfg.reward, episode_seeds)
        buffer = RolloutBuffer.from_trajectories(trajs, cfg.gae)
        m = ppo_update(buffer, agent, cfg.ppo, cfg.lambda_disc, rng, optimizer)
        row = {
            "iteration": it,
            "mean_reward": float(np.mean([sum(r.reward for r in t) for t in trajs])),
            "mean_score": float(np.mean([t[-1].score for t in trajs])),
            "mean_tokens": float(np.mean([int(t[-1].action.sum()) for t in trajs])),
            "l_clip": m.l_clip,
            "l_vf": m.l_vf,
            "entropy": m.entropy,
            "clip_fraction": m.clip_fraction,
        }
        rows.append(row)
        if log_fn is not None:
            log_fn(row)
        log.info("ppo iteration %d reward %.4f score %.4f tokens %.1f", it, row["mean_reward"],
                 row["mean_score"], row["mean_tokens"])
    return agent, rows
