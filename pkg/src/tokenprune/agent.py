"""Pruning agent: shared attention extractor with a per-token policy head and a
pooled value head.

States in a batch may have different token counts; they are zero-padded to the
largest count and padded rows are excluded from attention keys, pooling and
losses.  The projected query always sits in the last row of the sequence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateStateError, DimensionError, StateError
from .nn import Linear, Module, MultiHeadAttention, ResidualMLP, sigmoid

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class AgentConfig:
    d_latent: int = 8
    d_q: int = 16
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    arch: str = "attention"  # or "mlp": tokens go straight to the heads

    def __post_init__(self):
        if self.arch not in ("attention", "mlp"):
            raise ConfigError(f"unknown agent architecture {self.arch!r}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


@dataclass
class AgentOutput:
    probs: np.ndarray  # (B, K_max) raw retention probabilities
    logits: np.ndarray
    values: np.ndarray  # (B,)
    features: np.ndarray  # (B, K_max + 1, d); query row last
    valid: np.ndarray  # (B, K_max) bool
    counts: np.ndarray  # (B,)


class PruningAgent(Module):
    def __init__(self, cfg: AgentConfig, rng):
        self.cfg = cfg
        d = cfg.d_model
        self.token_proj = Linear(cfg.d_latent, d, rng)
        self.query_proj = Linear(cfg.d_q, d, rng)
        self.attention = MultiHeadAttention(d, cfg.n_heads, rng) if cfg.arch == "attention" else None
        self.policy_block = ResidualMLP(d, cfg.d_ff, rng)
        self.policy_out = Linear(d, 1, rng)
        self.value_block = ResidualMLP(d, cfg.d_ff, rng)
        self.value_out = Linear(d, 1, rng)
        self._cache = None

    def policy_parameters(self):
        skip = ("value_block.", "value_out.")
        return [p for n, p in self.named_parameters() if not n.startswith(skip)]

    # -- forward/backward on padded batches ----------------------------------

    def forward(self, codes, valid, queries):
        codes = np.asarray(codes, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool)
        queries = np.asarray(queries, dtype=np.float64)
        n_batch, k_max, _ = codes.shape
        counts = valid.sum(axis=1)
        if np.any(counts == 0):
            raise DegenerateStateError("agent received a state with no surviving tokens")
        x = np.concatenate(
            [self.token_proj.forward(codes), self.query_proj.forward(queries)[:, None, :]], axis=1
        )
        if self.attention is not None:
            key_mask = np.concatenate([valid, np.ones((n_batch, 1), dtype=bool)], axis=1)
            feats = self.attention.forward(x, key_mask)
        else:
            feats = x
        tok = feats[:, :k_max]
        logits = self.policy_out.forward(self.policy_block.forward(tok))[..., 0]
        weights = valid / counts[:, None]
        pooled = np.einsum("bk,bkd->bd", weights, tok)
        values = self.value_out.forward(self.value_block.forward(pooled))[:, 0]
        self._cache = (k_max, weights, valid)
        return AgentOutput(sigmoid(logits), logits, values, feats, valid, counts)

    def backward(self, dlogits=None, dvalues=None):
        if self._cache is None:
            raise StateError("agent backward called before forward")
        k_max, weights, valid = self._cache
        n_batch = valid.shape[0]
        d = self.cfg.d_model
        dtok = np.zeros((n_batch, k_max, d))
        if dlogits is not None:
            dlogits = np.where(valid, dlogits, 0.0)
            dtok += self.policy_block.backward(self.policy_out.backward(dlogits[..., None]))
        if dvalues is not None:
            dpooled = self.value_block.backward(self.value_out.backward(np.asarray(dvalues)[:, None]))
            dtok += weights[..., None] * dpooled[:, None, :]
        dfeats = np.zeros((n_batch, k_max + 1, d))
        dfeats[:, :k_max] = dtok
        dx = self.attention.backward(dfeats) if self.attention is not None else dfeats
        self.token_proj.backward(dx[:, :k_max])
        self.query_proj.backward(dx[:, k_max])

    def forward_states(self, codes_list, queries):
        codes, valid = pad_codes(codes_list, self.cfg.d_latent)
        return self.forward(codes, valid, np.stack([np.asarray(q, dtype=np.float64) for q in queries]))


def pad_codes(codes_list, d_latent):
    k_max = max((len(c) for c in codes_list), default=0)
    if k_max == 0:
        raise DegenerateStateError("no state in the batch has surviving tokens")
    codes = np.zeros((len(codes_list), k_max, d_latent))
    valid = np.zeros((len(codes_list), k_max), dtype=bool)
    for b, c in enumerate(codes_list):
        c = np.asarray(c, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != d_latent:
            raise DimensionError(f"codes must be (K, {d_latent}), got {c.shape}")
        codes[b, : len(c)] = c
        valid[b, : len(c)] = True
    return codes, valid


# -- single-state views --------------------------------------------------------


def extract_features(codes, query, agent):
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise DegenerateStateError("extract_features needs at least one token")
    return agent.forward_states([codes], [query]).features[0]


def policy_probs(features, agent):
    """Retention probabilities from extractor output (query row is the last row)."""
    tok = np.asarray(features, dtype=np.float64)[:-1]
    return sigmoid(agent.policy_out.forward(agent.policy_block.forward(tok))[:, 0])


def value_estimate(features, agent):
    tok = np.asarray(features, dtype=np.float64)[:-1]
    if tok.shape[0] == 0:
        raise DegenerateStateError("value_estimate needs at least one token")
    pooled = tok.mean(axis=0, keepdims=True)
    return float(agent.value_out.forward(agent.value_block.forward(pooled))[0, 0])


def deterministic_mask(probs, tau):
    """Inference rule: keep a token iff its raw probability is strictly above ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"threshold tau={tau} outside [0, 1]")
    return np.asarray(probs) > tau


# -- factorised Bernoulli policy -------------------------------------------------


@dataclass
class ActionSample:
    bits: np.ndarray
    joint_log_prob: float
    per_token_probs: np.ndarray  # discounted retention probabilities


def discounted(probs, step, lambda_disc):
    return lambda_disc**step * np.asarray(probs, dtype=np.float64)


def _clamped(q):
    qc = np.clip(q, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = qc == q
    if not np.all(inside):
        log.debug("clamped %d probabilities to [%g, 1-%g]", int((~inside).sum()), PROB_CLAMP, PROB_CLAMP)
    return qc, inside


def joint_log_prob(probs, bits, step, lambda_disc):
    qc, _ = _clamped(discounted(probs, step, lambda_disc))
    bits = np.asarray(bits, dtype=bool)
    return float(np.sum(np.where(bits, np.log(qc), np.log1p(-qc))))


def entropy(q):
    """Entropy of independent Bernoulli variables with success probabilities ``q``."""
    qc, _ = _clamped(np.asarray(q, dtype=np.float64))
    return float(np.sum(-qc * np.log(qc) - (1.0 - qc) * np.log1p(-qc)))


def sample_actions(probs, step, lambda_disc, rng=None, uniforms=None):
    if not 0.0 < lambda_disc <= 1.0:
        raise ConfigError(f"lambda_disc={lambda_disc} outside (0, 1]")
    q = discounted(probs, step, lambda_disc)
    if uniforms is None:
        uniforms = rng.random(q.shape)
    bits = np.asarray(uniforms) < q
    return ActionSample(bits=bits, joint_log_prob=joint_log_prob(probs, bits, step, lambda_disc), per_token_probs=q)


def action_log_prob(agent, codes, query, bits, step, lambda_disc):
    bits = np.asarray(bits, dtype=bool)
    if bits.shape != (np.shape(codes)[0],):
        raise DimensionError(f"action length {bits.shape} does not match K_t={np.shape(codes)[0]}")
    probs = agent.forward_states([codes], [query]).probs[0]
    return joint_log_prob(probs, bits, step, lambda_disc)


def log_prob_terms(probs, bits, steps, lambda_disc, valid):
    """Batched joint log-probs and their gradient w.r.t. the policy logits.

    ``probs``/``bits``/``valid`` are ``(B, K_max)``, ``steps`` is ``(B,)``.
    """
    scale = (lambda_disc ** np.asarray(steps, dtype=np.float64))[:, None]
    q = scale * probs
    qc, inside = _clamped(q)
    bits = np.asarray(bits, dtype=bool)
    per_token = np.where(bits, np.log(qc), np.log1p(-qc))
    dq = np.where(bits, 1.0 / qc, -1.0 / (1.0 - qc)) * inside
    dlogit = dq * scale * probs * (1.0 - probs)
    return np.sum(per_token * valid, axis=1), dlogit * valid


def entropy_terms(probs, steps, lambda_disc, valid):
    scale = (lambda_disc ** np.asarray(steps, dtype=np.float64))[:, None]
    qc, inside = _clamped(scale * probs)
    per_token = -qc * np.log(qc) - (1.0 - qc) * np.log1p(-qc)
    dq = (np.log1p(-qc) - np.log(qc)) * inside
    dlogit = dq * scale * probs * (1.0 - probs)
    return np.sum(per_token * valid, axis=1), dlogit * valid
