"""Three-phase training pipeline and the ablation drivers built on it."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .agent import PruningAgent
from .autoencoder import AutoEncoder, train_autoencoder
from .config import RunConfig
from .demonstrations import QueryCodeProjection, generate_demo, pretrain_policy
from .environment import sample_from_config, sample_seeds
from .evaluation import baseline_heuristic, baseline_random, evaluate_at_rate
from .ppo import train_rl

log = logging.getLogger(__name__)

TRAIN_SPLIT, EVAL_SPLIT = 0, 1

# independent RNG streams per phase, all derived from the run seed
_STREAMS = {"ae_init": 1, "ae_train": 2, "agent_init": 3, "pretrain": 4, "ppo": 5, "baseline": 6}


def phase_rng(cfg: RunConfig, phase):
    return np.random.default_rng([cfg.seed, _STREAMS[phase]])


def build_samples(cfg: RunConfig, split=TRAIN_SPLIT, count=None):
    if count is None:
        count = cfg.n_train if split == TRAIN_SPLIT else cfg.n_eval
    task = cfg.task()
    return [sample_from_config(s, task) for s in sample_seeds(cfg.seed, split, count)]


def train_encoder(cfg: RunConfig, samples):
    ae = AutoEncoder(cfg.d_v, cfg.d_hidden, cfg.d_latent, phase_rng(cfg, "ae_init"))
    pool = [s.tokens for s in samples[: cfg.ae_train_samples]]
    ae, report = train_autoencoder(ae, pool, cfg.ae_epochs, cfg.ae_lr, cfg.ae_batch, phase_rng(cfg, "ae_train"))
    ae.freeze()
    return ae, report


def make_projection(cfg: RunConfig, encoder):
    return QueryCodeProjection(encoder, cfg.d_v, cfg.signal_rank, cfg.world_seed, max(cfg.signal_strength, 1.0))


def encode_all(encoder, samples):
    return [encoder.encode(s.tokens) for s in samples]


def build_demos(cfg: RunConfig, samples, codes, projection):
    n = min(cfg.n_demos, len(samples))
    return [generate_demo(s, c, projection(s.query), cfg.heuristic()) for s, c in zip(samples[:n], codes[:n])]


def new_agent(cfg: RunConfig):
    return PruningAgent(cfg.agent(), phase_rng(cfg, "agent_init"))


def pretrain(cfg: RunConfig, agent, demos, target_agreement=None):
    if target_agreement is None and cfg.bc_target_agreement > 0:
        target_agreement = cfg.bc_target_agreement
    return pretrain_policy(agent, demos, cfg.bc_epochs, cfg.bc_lr, cfg.bc_batch, phase_rng(cfg, "pretrain"),
                           cfg.bc_per_token, target_agreement)


def finetune(cfg: RunConfig, agent, samples, codes, log_fn=None):
    return train_rl(samples, codes, agent, cfg.rl(), phase_rng(cfg, "ppo"), log_fn)


@dataclass
class Artifacts:
    """Shared upstream products so ablation cells can reuse them."""

    train: list
    eval: list
    encoder: AutoEncoder
    train_codes: list
    eval_codes: list
    projection: QueryCodeProjection
    demos: list = None


def prepare(cfg: RunConfig, with_demos=True):
    train = build_samples(cfg, TRAIN_SPLIT)
    held = build_samples(cfg, EVAL_SPLIT)
    encoder, report = train_encoder(cfg, train)
    log.info("autoencoder held-out relative error %.4f", report.relative_error)
    proj = make_projection(cfg, encoder)
    train_codes, eval_codes = encode_all(encoder, train), encode_all(encoder, held)
    demos = build_demos(cfg, train, train_codes, proj) if with_demos else None
    return Artifacts(train, held, encoder, train_codes, eval_codes, proj, demos)


@dataclass
class PipelineResult:
    policy_score: float
    random_score: float
    heuristic_score: float
    full_score: float
    retention_rate: float
    tau: float
    pretrain_agreement: float = float("nan")
    metrics: list = field(default_factory=list)
    agent: PruningAgent = None


def run_pipeline(cfg: RunConfig, artifacts: Artifacts = None, from_scratch=False, log_fn=None):
    art = artifacts or prepare(cfg, with_demos=not from_scratch)
    agent = new_agent(cfg)
    agreement = float("nan")
    if not from_scratch:
        demos = art.demos if art.demos is not None else build_demos(cfg, art.train, art.train_codes, art.projection)
        agent, pm = pretrain(cfg, agent, demos)
        agreement = pm.heldout_agreement[-1] if pm.heldout_agreement else pm.initial_heldout_agreement
    agent, rows = finetune(cfg, agent, art.train, art.train_codes, log_fn)
    rep = evaluate_at_rate(agent, art.eval_codes, art.eval, cfg.eval_rate, cfg.kappa)
    rnd = baseline_random(art.eval, cfg.eval_rate, cfg.seed, cfg.kappa)
    heu = baseline_heuristic(art.eval, art.eval_codes, art.projection, cfg.eval_rate, cfg.kappa)
    return PipelineResult(rep.mean_score, rnd.mean_score, heu.mean_score, rep.full_score, rep.retention_rate,
                          rep.tau, agreement, rows, agent)


# -- ablations --------------------------------------------------------------------


def ablation_tmax(cfg: RunConfig, grid=(1, 2, 3, 4, 5), artifacts=None):
    art = artifacts or prepare(cfg)
    return [(t, run_pipeline(cfg.replace(t_max=t), art)) for t in grid]


def ablation_dimension(cfg: RunConfig, grid=(2, 4, 8)):
    return [(d, run_pipeline(cfg.replace(d_latent=d))) for d in grid]


def ablation_arch(cfg: RunConfig, artifacts=None):
    art = artifacts or prepare(cfg)
    return [(a, run_pipeline(cfg.replace(arch=a), art)) for a in ("attention", "mlp")]


def ablation_init(cfg: RunConfig, artifacts=None):
    art = artifacts or prepare(cfg)
    return [("lfd", run_pipeline(cfg, art)), ("scratch", run_pipeline(cfg, art, from_scratch=True))]


def format_table(title, rows):
    """Plain-text table of (cell, result) rows, scores relative to the full mask."""
    lines = [title, f"{'cell':>10} {'score':>8} {'relative':>9} {'random':>8} {'heuristic':>9} {'retention':>9}"]
    for cell, r in rows:
        lines.append(f"{str(cell):>10} {r.policy_score:8.4f} {r.policy_score / r.full_score:9.2%} "
                     f"{r.random_score:8.4f} {r.heuristic_score:9.4f} {r.retention_rate:9.4f}")
    return "\n".join(lines)


def table_csv(rows):
    lines = ["cell,score,relative,random,heuristic,retention"]
    for cell, r in rows:
        lines.append(f"{cell},{r.policy_score:.6f},{r.policy_score / r.full_score:.6f},"
                     f"{r.random_score:.6f},{r.heuristic_score:.6f},{r.retention_rate:.6f}")
    return "\n".join(lines)
