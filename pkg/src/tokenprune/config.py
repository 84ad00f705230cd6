"""Flat run configuration: ``key = value`` text files with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .agent import AgentConfig
from .demonstrations import HeuristicConfig
from .environment import RewardConfig, TaskConfig
from .errors import ConfigError
from .ppo import GaeConfig, PpoConfig, RlConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # synthetic task
    n_tokens: int = 64
    d_v: int = 64
    d_q: int = 16
    n_relevant: int = 16
    signal_strength: float = 5.0
    signal_rank: int = 4
    world_seed: int = 0
    n_train: int = 2000
    n_eval: int = 200
    # autoencoder
    d_hidden: int = 32
    d_latent: int = 8
    ae_epochs: int = 50
    ae_lr: float = 1e-3
    ae_batch: int = 256
    ae_train_samples: int = 500
    # demonstrations / pretraining
    demo_rates: tuple = (0.25, 0.50)
    n_demos: int = 2000
    bc_epochs: int = 15
    bc_lr: float = 1e-3
    bc_batch: int = 32
    bc_per_token: bool = False
    bc_target_agreement: float = 0.9  # early stop on held-out agreement; 0 disables
    # agent
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    arch: str = "attention"
    # reward
    alpha: float = 1.0
    beta: float = 0.1
    kappa: float = 0.25
    reward_batch: int = 8
    batch_mean_reward: bool = False
    # rl
    gamma: float = 0.99
    lambda_gae: float = 0.95
    lambda_disc: float = 0.5
    t_max: int = 3
    clip_eps: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    ppo_epochs: int = 4
    ppo_minibatch: int = 64
    ppo_lr: float = 3e-4
    normalize_advantages: bool = True
    rl_iterations: int = 60
    rollout_batch: int = 128
    # inference
    tau: float = 0.55
    eval_rate: float = 1.0 / 3.0

    def __post_init__(self):
        validate(self)

    # -- views for the individual modules --
    def task(self):
        return TaskConfig(self.n_tokens, self.d_v, self.d_q, self.n_relevant, self.signal_strength,
                          self.signal_rank, self.world_seed)

    def agent(self):
        return AgentConfig(self.d_latent, self.d_q, self.d_model, self.n_heads, self.d_ff, self.arch)

    def heuristic(self):
        return HeuristicConfig(self.demo_rates)

    def reward(self):
        return RewardConfig(self.alpha, self.beta, self.kappa, self.reward_batch, self.batch_mean_reward)

    def rl(self):
        return RlConfig(
            iterations=self.rl_iterations, rollout_batch=self.rollout_batch, t_max=self.t_max,
            lambda_disc=self.lambda_disc, gae=GaeConfig(self.gamma, self.lambda_gae),
            ppo=PpoConfig(self.clip_eps, self.c1, self.c2, self.ppo_epochs, self.ppo_minibatch,
                          self.ppo_lr, self.normalize_advantages),
            reward=self.reward(),
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _check(cond, key, message):
    if not cond:
        raise ConfigError(f"{key}: {message}")


def validate(cfg: RunConfig):
    for key in ("n_tokens", "d_v", "d_q", "n_relevant", "signal_rank", "n_train", "n_eval", "d_hidden",
                "d_latent", "ae_batch", "ae_train_samples", "n_demos", "bc_batch", "d_model", "n_heads",
                "d_ff", "reward_batch", "t_max", "ppo_epochs", "ppo_minibatch", "rollout_batch"):
        _check(getattr(cfg, key) >= 1, key, "must be >= 1")
    for key in ("ae_epochs", "bc_epochs", "rl_iterations"):
        _check(getattr(cfg, key) >= 0, key, "must be >= 0")
    for key in ("ae_lr", "bc_lr", "ppo_lr", "alpha", "beta", "kappa", "c1", "c2", "signal_strength"):
        _check(getattr(cfg, key) >= 0, key, "must be >= 0")
    _check(cfg.n_relevant <= cfg.n_tokens, "n_relevant", "must be <= n_tokens")
    _check(cfg.signal_rank <= min(cfg.d_v, cfg.d_q), "signal_rank", "must be <= min(d_v, d_q)")
    _check(cfg.d_model % cfg.n_heads == 0, "n_heads", "must divide d_model")
    _check(0.0 <= cfg.gamma <= 1.0, "gamma", "must lie in [0, 1]")
    _check(0.0 <= cfg.lambda_gae <= 1.0, "lambda_gae", "must lie in [0, 1]")
    _check(0.0 < cfg.lambda_disc <= 1.0, "lambda_disc", "must lie in (0, 1]")
    _check(cfg.clip_eps > 0, "clip_eps", "must be > 0")
    _check(0.0 <= cfg.tau <= 1.0, "tau", "must lie in [0, 1]")
    _check(0.0 <= cfg.bc_target_agreement <= 1.0, "bc_target_agreement", "must lie in [0, 1]")
    _check(0.0 < cfg.eval_rate <= 1.0, "eval_rate", "must lie in (0, 1]")
    _check(cfg.arch in ("attention", "mlp"), "arch", "must be 'attention' or 'mlp'")
    try:
        HeuristicConfig(cfg.demo_rates)
    except ConfigError as exc:
        raise ConfigError(f"demo_rates: {exc}") from None


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(key, text, lineno):
    default = _FIELDS[key].default
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse {key} = {text!r}") from None


def parse_config(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, val, lineno)
    return RunConfig(**values)


def load_config(path):
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def dump_config(cfg: RunConfig):
    lines = ["# effective configuration"]
    lines += [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"
