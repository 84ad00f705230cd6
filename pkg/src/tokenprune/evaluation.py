"""One-shot inference, baselines, FLOPs accounting and trajectory traces."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .agent import deterministic_mask
from .demonstrations import heuristic_relevance, top_k_mask
from .environment import PruningState, apply_action, surrogate_score, token_uniforms
from .errors import ConfigError

DEFAULT_TAUS = tuple(round(0.1 * i, 2) for i in range(1, 10)) + (0.55, 0.67, 0.74)


@dataclass
class EvalReport:
    mean_score: float
    mean_retained: float
    retention_rate: float
    full_score: float = 1.0
    tau: float = float("nan")
    scores: np.ndarray = field(default=None, repr=False)
    retained: np.ndarray = field(default=None, repr=False)
    curve: list = field(default_factory=list)  # (tau, mean tokens, mean score)
    baselines: dict = field(default_factory=dict)

    @property
    def relative_score(self):
        return self.mean_score / self.full_score if self.full_score > 0 else float("nan")


def _report(masks, samples, kappa, tau=float("nan")):
    scores = np.array([surrogate_score(m, s, kappa) for m, s in zip(masks, samples)])
    retained = np.array([m.sum() for m in masks], dtype=float)
    n = np.mean([s.n_tokens for s in samples])
    full = float(np.mean([surrogate_score(np.ones(s.n_tokens, bool), s, kappa) for s in samples]))
    return EvalReport(float(scores.mean()), float(retained.mean()), float(retained.mean() / n),
                      full, tau, scores, retained)


def policy_probabilities(agent, codes, samples, chunk=64):
    """Raw retention probabilities for every sample's full token set."""
    out = []
    for start in range(0, len(samples), chunk):
        sl = slice(start, start + chunk)
        res = agent.forward_states(codes[sl], [s.query for s in samples[sl]])
        out.extend(res.probs[b, : len(c)].copy() for b, c in enumerate(codes[sl]))
    return out


def one_shot_mask(probs, tau):
    """Threshold mask with the token floor: an empty mask keeps the top token."""
    mask = deterministic_mask(probs, tau)
    if not mask.any():
        mask[int(np.argmax(probs))] = True
    return mask


def evaluate(agent, codes, samples, tau, kappa=0.25, probs=None):
    if not samples:
        raise ConfigError("evaluation needs at least one sample")
    probs = policy_probabilities(agent, codes, samples) if probs is None else probs
    masks = [one_shot_mask(p, tau) for p in probs]
    return _report(masks, samples, kappa, tau)


def tau_curve(agent, codes, samples, taus=DEFAULT_TAUS, kappa=0.25):
    probs = policy_probabilities(agent, codes, samples)
    curve = []
    for tau in sorted(taus):
        r = evaluate(agent, codes, samples, tau, kappa, probs)
        curve.append((tau, r.mean_retained, r.mean_score))
    return curve


def calibrate_tau(probs, rate):
    """Threshold giving a mean retention as close as possible to ``rate``."""
    flat = np.sort(np.concatenate(probs))[::-1]
    n_keep = int(round(rate * len(flat)))
    if n_keep >= len(flat):
        return 0.0
    if n_keep <= 0:
        return 1.0
    # strictly-greater rule: everything above flat[n_keep] survives
    return float(flat[n_keep])


def evaluate_at_rate(agent, codes, samples, rate=1.0 / 3.0, kappa=0.25):
    probs = policy_probabilities(agent, codes, samples)
    tau = calibrate_tau(probs, rate)
    return evaluate(agent, codes, samples, tau, kappa, probs)


def baseline_full(samples, kappa=0.25):
    return _report([np.ones(s.n_tokens, bool) for s in samples], samples, kappa)


def baseline_random(samples, rate, seed=0, kappa=0.25):
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"retention rate {rate} outside (0, 1]")
    rng = np.random.default_rng(seed)
    masks = []
    for s in samples:
        k = math.ceil(s.n_tokens * rate - 1e-9)
        m = np.zeros(s.n_tokens, bool)
        m[rng.choice(s.n_tokens, size=k, replace=False)] = True
        masks.append(m)
    return _report(masks, samples, kappa)


def baseline_heuristic(samples, codes, projection, rate, kappa=0.25):
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"retention rate {rate} outside (0, 1]")
    masks = [
        top_k_mask(heuristic_relevance(c, projection(s.query)), math.ceil(s.n_tokens * rate - 1e-9))
        for s, c in zip(samples, codes)
    ]
    return _report(masks, samples, kappa)


@dataclass
class FlopsModel:
    params: float  # backbone parameter count P
    visual_tokens: float  # retained visual tokens N_v'
    text_tokens: float  # N_t
    vision_cost: float = 0.0
    pruner_cost: float = 0.0
    decode_cost: float = 0.0

    def __post_init__(self):
        if min(self.params, self.visual_tokens, self.text_tokens,
               self.vision_cost, self.pruner_cost, self.decode_cost) < 0:
            raise ConfigError("FLOPs model fields must be non-negative")

    @property
    def prefill(self):
        return 2.0 * self.params * (self.visual_tokens + self.text_tokens)


def flops_estimate(model: FlopsModel):
    return model.vision_cost + model.pruner_cost + model.prefill + model.decode_cost


@dataclass
class TraceStep:
    step: int
    mask: np.ndarray
    retained: int
    score: float

    def to_dict(self):
        return {
            "step": self.step,
            "retained": self.retained,
            "score": self.score,
            "mask": "".join("1" if b else "0" for b in self.mask),
        }


@dataclass
class TraceRecord:
    sample_seed: int
    steps: list


def trace(agent, codes, sample, t_max, lambda_disc, seed, kappa=0.25):
    """Stochastic multi-step rollout with the mask and score recorded after every step."""
    state = PruningState.initial(codes)
    steps = [TraceStep(0, state.mask.copy(), state.n_alive, surrogate_score(state.mask, sample, kappa))]
    for t in range(t_max):
        probs = agent.forward_states([state.codes], [sample.query]).probs[0]
        u = token_uniforms(seed, t, sample.n_tokens)[state.index_map]
        bits = u < lambda_disc**t * probs
        if not bits.any():
            bits[int(np.argmax(probs))] = True
        state = apply_action(state, bits)
        steps.append(TraceStep(t + 1, state.mask.copy(), state.n_alive, surrogate_score(state.mask, sample, kappa)))
        if state.n_alive <= 1:
            break
    return TraceRecord(sample.seed, steps)
