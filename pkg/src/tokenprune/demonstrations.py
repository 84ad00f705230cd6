"""Heuristic demonstrations and behaviour-cloning pretraining of the policy."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .agent import pad_codes
from .environment import query_direction
from .errors import ConfigError, StateError, TrainingError
from .nn import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeuristicConfig:
    rates: tuple = (0.25, 0.50)

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        if not rates:
            raise ConfigError("at least one pruning rate is required")
        if any(not 0.0 <= r < 1.0 for r in rates):
            raise ConfigError(f"pruning rates must lie in [0, 1): {rates}")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"pruning rates must be strictly increasing: {rates}")
        object.__setattr__(self, "rates", rates)


class QueryCodeProjection:
    """Maps a query into code space by encoding its token-space direction.

    ``E(s*u(q)) - E(-s*u(q))`` cancels the encoder offset, leaving the direction
    along which query-relevant tokens move in code space.
    """

    def __init__(self, encoder, d_v, signal_rank, world_seed, scale=3.0):
        if not encoder.frozen:
            raise StateError("the heuristic needs a frozen encoder")
        self.encoder = encoder
        self.d_v, self.signal_rank, self.world_seed, self.scale = d_v, signal_rank, world_seed, scale

    def __call__(self, query):
        u = query_direction(query, self.d_v, self.signal_rank, self.world_seed) * self.scale
        z = self.encoder.encode(np.stack([u, -u]))
        return z[0] - z[1]


def heuristic_relevance(codes, direction):
    """Cosine similarity of each code row with ``direction``; zero-norm rows score 0."""
    codes = np.asarray(codes, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    dn = np.linalg.norm(direction)
    rn = np.linalg.norm(codes, axis=1)
    denom = rn * dn
    out = np.zeros(codes.shape[0])
    ok = denom > 0
    out[ok] = (codes[ok] @ direction) / denom[ok]
    return out


def top_k_mask(scores, k):
    """Keep the ``k`` highest scores; ties go to the lower index."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    mask = np.zeros(len(scores), dtype=bool)
    mask[order[:k]] = True
    return mask


@dataclass
class DemoStep:
    codes: np.ndarray
    query: np.ndarray
    index_map: np.ndarray
    labels: np.ndarray  # bool over the step's surviving tokens


@dataclass
class DemoTrajectory:
    sample_seed: int
    steps: list = field(default_factory=list)

    @property
    def n_tokens(self):
        return sum(len(s.labels) for s in self.steps)


def demo_masks(scores, rates):
    """Nested retention masks over the original tokens, one per cumulative rate."""
    n = len(scores)
    order = np.argsort(-np.asarray(scores), kind="stable")
    masks = []
    for rate in rates:
        keep = math.ceil(n * (1.0 - rate) - 1e-9)
        if keep < 1:
            raise ConfigError(f"pruning rate {rate} leaves no tokens out of {n}")
        m = np.zeros(n, dtype=bool)
        m[order[:keep]] = True
        masks.append(m)
    return masks


def generate_demo(sample, codes, direction, cfg: HeuristicConfig = HeuristicConfig()):
    codes = np.asarray(codes, dtype=np.float64)
    scores = heuristic_relevance(codes, direction)
    traj = DemoTrajectory(sample_seed=sample.seed)
    alive = np.arange(codes.shape[0])
    for mask in demo_masks(scores, cfg.rates):
        labels = mask[alive]
        traj.steps.append(DemoStep(codes=codes[alive], query=sample.query, index_map=alive, labels=labels))
        alive = alive[labels]
    return traj


def rebuild_demo(sample_seed, codes, query, index_maps, labels):
    """Reassemble a trajectory from stored index maps and labels."""
    codes = np.asarray(codes, dtype=np.float64)
    traj = DemoTrajectory(sample_seed=sample_seed)
    for idx, lab in zip(index_maps, labels):
        idx = np.asarray(idx, dtype=np.int64)
        traj.steps.append(DemoStep(codes=codes[idx], query=query, index_map=idx, labels=np.asarray(lab, dtype=bool)))
    return traj


# -- behaviour cloning ------------------------------------------------------------


def _flatten(demos):
    steps = [s for d in demos for s in d.steps]
    codes, valid = pad_codes([s.codes for s in steps], steps[0].codes.shape[1])
    labels = np.zeros(valid.shape)
    for b, s in enumerate(steps):
        labels[b, : len(s.labels)] = s.labels
    queries = np.stack([s.query for s in steps])
    return codes, valid, labels, queries


BCE_CLAMP = 1e-7


def bce_loss(agent, demos, per_token=False, backward=False):
    """Summed token BCE divided by the number of trajectories (or tokens if ``per_token``)."""
    codes, valid, labels, queries = _flatten(demos)
    out = agent.forward(codes, valid, queries)
    p = out.probs
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = labels * np.log(pc) + (1.0 - labels) * np.log1p(-pc)
    norm = float(valid.sum()) if per_token else float(len(demos))
    loss = -float(np.sum(terms * valid)) / norm
    if backward:
        inside = pc == p
        agent.backward(dlogits=(p - labels) * inside * valid / norm)
    return loss


def label_agreement(agent, demos):
    codes, valid, labels, queries = _flatten(demos)
    pred = agent.forward(codes, valid, queries).probs > 0.5
    return float(np.sum((pred == (labels > 0.5)) & valid) / valid.sum())


def shuffled_label_demos(demos, rng):
    """No-signal control: every step gets a random balanced label vector."""
    out = []
    for d in demos:
        steps = []
        for s in d.steps:
            k = len(s.labels)
            lab = np.zeros(k, dtype=bool)
            lab[: k // 2] = True
            steps.append(DemoStep(s.codes, s.query, s.index_map, rng.permutation(lab)))
        out.append(DemoTrajectory(d.sample_seed, steps))
    return out


@dataclass
class PretrainMetrics:
    train_loss: list = field(default_factory=list)
    heldout_loss: list = field(default_factory=list)
    heldout_agreement: list = field(default_factory=list)
    initial_heldout_loss: float = float("nan")
    initial_heldout_agreement: float = float("nan")


def split_demos(demos, holdout_fraction=0.1):
    n_hold = max(1, int(round(len(demos) * holdout_fraction))) if len(demos) > 1 else 0
    return demos[: len(demos) - n_hold], demos[len(demos) - n_hold :] or demos


def pretrain_policy(agent, demos, epochs=50, lr=1e-3, batch_size=32, rng=None, per_token=False,
                    target_agreement=None, optimizer=None):
    """Fit the policy path of ``agent`` to demonstration labels.

    Minibatches are groups of trajectories, so each minibatch loss has the
    same normalisation as the full objective.  Stops early once the held-out
    agreement reaches ``target_agreement`` (if given).
    """
    if not demos:
        raise ConfigError("pretraining needs at least one demonstration")
    rng = np.random.default_rng(0) if rng is None else rng
    train, held = split_demos(list(demos))
    opt = optimizer or Adam(agent.policy_parameters(), lr=lr)
    metrics = PretrainMetrics()
    metrics.initial_heldout_loss = bce_loss(agent, held, per_token)
    metrics.initial_heldout_agreement = label_agreement(agent, held)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), batch_size):
            batch = [train[i] for i in order[start : start + batch_size]]
            agent.zero_grad()
            loss = bce_loss(agent, batch, per_token, backward=True)
            if not np.isfinite(loss):
                raise TrainingError(f"BCE loss became {loss} at epoch {epoch}")
            opt.step()
            total += loss * len(batch)
        metrics.train_loss.append(total / len(train))
        metrics.heldout_loss.append(bce_loss(agent, held, per_token))
        metrics.heldout_agreement.append(label_agreement(agent, held))
        log.info("pretrain epoch %d loss %.4f held-out %.4f agreement %.4f", epoch,
                 metrics.train_loss[-1], metrics.heldout_loss[-1], metrics.heldout_agreement[-1])
        if target_agreement is not None and metrics.heldout_agreement[-1] >= target_agreement:
            break
    return agent, metrics
