"""Synthetic token-pruning MDP.

A sample is a set of ``N`` visual tokens plus a query embedding.  A planted
subset of tokens carries a query-dependent direction; the surrogate scorer
rewards keeping that subset and mildly penalises clutter.  The scorer only
ever sees masks over the original tokens, never compressed codes.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np

from .agent import joint_log_prob
from .errors import ConfigError, DegenerateStateError, DimensionError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskConfig:
    n_tokens: int = 64
    d_v: int = 64
    d_q: int = 16
    n_relevant: int = 16
    signal_strength: float = 5.0
    signal_rank: int = 4
    world_seed: int = 0

    def __post_init__(self):
        if min(self.n_tokens, self.d_v, self.d_q, self.n_relevant, self.signal_rank) < 1:
            raise ConfigError("task dimensions must be positive")
        if self.n_relevant > self.n_tokens:
            raise ConfigError("n_relevant cannot exceed n_tokens")
        if self.signal_rank > min(self.d_v, self.d_q):
            raise ConfigError("signal_rank cannot exceed min(d_v, d_q)")
        if self.signal_strength < 0:
            raise ConfigError("signal_strength must be non-negative")


@dataclass
class Sample:
    tokens: np.ndarray  # (N, d_v) original visual tokens
    query: np.ndarray  # (d_q,)
    relevant: np.ndarray  # sorted original indices of task-critical tokens
    seed: int

    @property
    def n_tokens(self):
        return self.tokens.shape[0]


@functools.lru_cache(maxsize=16)
def query_projection(d_v, d_q, signal_rank, world_seed):
    """Fixed low-rank map from query space into token space (read-only)."""
    rng = np.random.default_rng([world_seed, 0x5EED])
    left = rng.standard_normal((d_v, signal_rank))
    right = rng.standard_normal((signal_rank, d_q))
    m = left @ right
    m.setflags(write=False)
    return m


def query_direction(query, d_v, signal_rank=4, world_seed=0):
    """Unit token-space direction ``u(q)`` planted into relevant tokens."""
    query = np.asarray(query, dtype=np.float64)
    u = query_projection(d_v, query.shape[0], signal_rank, world_seed) @ query
    norm = np.linalg.norm(u)
    return u / norm if norm > 0 else u


def generate_sample(seed, n_tokens=64, d_v=64, d_q=16, n_relevant=16, signal_strength=5.0, signal_rank=4, world_seed=0):
    if not 1 <= n_relevant <= n_tokens or min(d_v, d_q) < 1:
        raise ConfigError(f"invalid sample dimensions N={n_tokens} d_v={d_v} d_q={d_q} n_relevant={n_relevant}")
    if signal_strength < 0:
        raise ConfigError("signal_strength must be non-negative")
    rng = np.random.default_rng(seed)
    query = rng.standard_normal(d_q)
    relevant = np.sort(rng.choice(n_tokens, size=n_relevant, replace=False))
    tokens = rng.standard_normal((n_tokens, d_v))
    u = query_direction(query, d_v, signal_rank, world_seed)
    tokens[relevant] += signal_strength * u
    return Sample(tokens=tokens, query=query, relevant=relevant, seed=int(seed))


def sample_from_config(seed, task: TaskConfig):
    return generate_sample(
        seed, task.n_tokens, task.d_v, task.d_q, task.n_relevant,
        task.signal_strength, task.signal_rank, task.world_seed,
    )


def sample_seeds(run_seed, split, count):
    """Deterministic per-sample seeds; ``split`` keeps train/eval streams disjoint."""
    ss = np.random.SeedSequence([int(run_seed), int(split)])
    return [int(s) for s in ss.generate_state(count, dtype=np.uint32)]


def surrogate_score(mask, sample, kappa=0.25):
    """``recall / (1 + kappa * clutter)`` of the retained set against the planted set."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (sample.n_tokens,):
        raise DimensionError(f"mask length {mask.shape} does not match N={sample.n_tokens}")
    kept = int(mask.sum())
    if kept == 0:
        return 0.0
    hits = int(mask[sample.relevant].sum())
    recall = hits / len(sample.relevant)
    clutter = (kept - hits) / kept
    return recall / (1.0 + kappa * clutter)


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 1.0
    beta: float = 0.1
    kappa: float = 0.25
    batch_size: int = 8
    batch_mean: bool = False  # share the batch-mean reward across samples

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("reward weights alpha and beta must be non-negative")
        if self.kappa < 0:
            raise ConfigError("kappa must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("reward batch size must be at least 1")


@dataclass
class PruningState:
    codes: np.ndarray  # (K_t, d_l) codes of surviving tokens, original order
    mask: np.ndarray  # (N,) bool over original indices
    index_map: np.ndarray  # (K_t,) original index of each surviving row
    step: int = 0

    @property
    def n_alive(self):
        return len(self.index_map)

    @classmethod
    def initial(cls, codes):
        codes = np.asarray(codes, dtype=np.float64)
        n = codes.shape[0]
        return cls(codes=codes, mask=np.ones(n, dtype=bool), index_map=np.arange(n), step=0)


def apply_action(state, action):
    action = np.asarray(action).astype(bool)
    if action.shape != (state.n_alive,):
        raise DimensionError(f"action length {action.shape} does not match K_t={state.n_alive}")
    mask = state.mask.copy()
    mask[state.index_map[~action]] = False
    return PruningState(
        codes=state.codes[action],
        mask=mask,
        index_map=state.index_map[action],
        step=state.step + 1,
    )


def sample_reward(prev, nxt, sample, cfg: RewardConfig):
    if prev.n_alive == 0:
        raise DegenerateStateError(f"sample {sample.seed}: previous state has no tokens")
    delta = surrogate_score(nxt.mask, sample, cfg.kappa) - surrogate_score(prev.mask, sample, cfg.kappa)
    return cfg.alpha * delta + cfg.beta * (1.0 - nxt.n_alive / prev.n_alive)


def reward_step(prev_states, next_states, samples, cfg: RewardConfig):
    """Batch reward: task term and efficiency term, each averaged over the batch."""
    if not (len(prev_states) == len(next_states) == len(samples)) or not samples:
        raise DimensionError("reward_step needs equally long non-empty lists")
    for p, s in zip(prev_states, samples):
        if p.n_alive == 0:
            raise DegenerateStateError(f"sample {s.seed}: previous state has no tokens")
    task = np.mean([
        surrogate_score(n.mask, s, cfg.kappa) - surrogate_score(p.mask, s, cfg.kappa)
        for p, n, s in zip(prev_states, next_states, samples)
    ])
    eff = np.mean([1.0 - n.n_alive / p.n_alive for p, n in zip(prev_states, next_states)])
    return float(cfg.alpha * task + cfg.beta * eff)


@dataclass
class StepRecord:
    codes: np.ndarray
    query: np.ndarray
    index_map: np.ndarray
    mask: np.ndarray
    step: int
    action: np.ndarray
    log_prob: float
    value: float
    reward: float = 0.0
    done: bool = False
    score: float = 0.0  # surrogate score after the action
    floor_applied: bool = False
    sample_seed: int = 0


def token_uniforms(episode_seed, step, n_tokens):
    """Uniform draws indexed by original token index, one stream per (episode, step)."""
    return np.random.default_rng([int(episode_seed), int(step), 0xACE]).random(n_tokens)


def rollout_episode(samples, codes, agent, t_max, lambda_disc, reward_cfg: RewardConfig, episode_seeds, draw_fn=None):
    """Run the stochastic multi-step pruning episode for a batch of samples.

    ``draw_fn(episode_seed, step, n_tokens)`` returns per-original-token uniforms;
    the default uses independent seeded streams so results do not depend on
    token order.  Returns one list of ``StepRecord`` per sample.
    """
    if t_max < 1:
        raise ConfigError("t_max must be at least 1")
    draw_fn = draw_fn or token_uniforms
    states = [PruningState.initial(c) for c in codes]
    trajectories = [[] for _ in samples]
    active = list(range(len(samples)))
    for t in range(t_max):
        if not active:
            break
        out = agent.forward_states([states[b].codes for b in active], [samples[b].query for b in active])
        scale = lambda_disc**t
        nexts = {}
        for j, b in enumerate(active):
            st = states[b]
            probs = out.probs[j, : st.n_alive]
            q = scale * probs
            u = draw_fn(episode_seeds[b], t, samples[b].n_tokens)[st.index_map]
            bits = u < q
            floor = False
            if not bits.any():
                bits[int(np.argmax(probs))] = True
                floor = True
                log.debug("token floor engaged: sample %s step %d", samples[b].seed, t)
            rec = StepRecord(
                codes=st.codes, query=samples[b].query, index_map=st.index_map, mask=st.mask,
                step=t, action=bits, log_prob=joint_log_prob(probs, bits, t, lambda_disc),
                value=float(out.values[j]), floor_applied=floor, sample_seed=samples[b].seed,
            )
            nexts[b] = apply_action(st, bits)
            rec.score = surrogate_score(nexts[b].mask, samples[b], reward_cfg.kappa)
            rec.done = t == t_max - 1 or nexts[b].n_alive <= 1
            trajectories[b].append(rec)
        _assign_rewards([states[b] for b in active], [nexts[b] for b in active],
                        [samples[b] for b in active], [trajectories[b][-1] for b in active], reward_cfg)
        for b in active:
            states[b] = nexts[b]
        active = [b for b in active if not trajectories[b][-1].done]
    return trajectories


def _assign_rewards(prevs, nexts, samples, records, cfg: RewardConfig):
    per_sample = [sample_reward(p, n, s, cfg) for p, n, s in zip(prevs, nexts, samples)]
    if not cfg.batch_mean:
        for rec, r in zip(records, per_sample):
            rec.reward = r
        return
    for start in range(0, len(records), cfg.batch_size):
        chunk = slice(start, start + cfg.batch_size)
        shared = reward_step(prevs[chunk], nexts[chunk], samples[chunk], cfg)
        for rec in records[chunk]:
            rec.reward = shared
