"""Command-line surface: one subcommand per pipeline phase plus eval, trace and ablate.

Artifacts live in ``--out`` (default ``run/``)::

    samples_train.bin, samples_eval.bin   gen-data
    autoencoder.ckpt                      train-ae
    demos.bin                             gen-demos
    policy_lfd.ckpt, pretrain.jsonl       pretrain-policy
    policy_ppo.ckpt, metrics.jsonl        train-ppo
    eval.json / trace.jsonl / ablate_*.csv

Failures print one JSON line on stderr and exit with the error's status code.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import pipeline as P
from .autoencoder import AutoEncoder
from .config import dump_config, load_config
from .demonstrations import rebuild_demo
from .errors import DependencyError, TokenPruneError, TrainingError
from .evaluation import (baseline_full, baseline_heuristic, baseline_random, calibrate_tau, evaluate,
                         policy_probabilities, trace)
from .storage import atomic_write, load_checkpoint, load_dataset, save_checkpoint, save_dataset

log = logging.getLogger("tokenprune")

TRAIN_DATA, EVAL_DATA = "samples_train.bin", "samples_eval.bin"
AE_CKPT, DEMOS = "autoencoder.ckpt", "demos.bin"
LFD_CKPT, PPO_CKPT = "policy_lfd.ckpt", "policy_ppo.ckpt"


class Run:
    """Config plus output directory, with helpers to load upstream artifacts."""

    def __init__(self, cfg, out):
        self.cfg, self.out = cfg, out
        os.makedirs(out, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out, name)

    def require(self, name, phase):
        p = self.path(name)
        if not os.path.exists(p):
            raise DependencyError(phase, f"missing {p}; run '{phase}' first")
        return p

    def echo_config(self, command):
        atomic_write(self.path(f"config.{command}.txt"), dump_config(self.cfg).encode("utf-8"))

    def samples(self, split):
        name = TRAIN_DATA if split == "train" else EVAL_DATA
        header, samples, _ = load_dataset(self.require(name, "gen-data"))
        cfg = self.cfg
        if (header["n_tokens"], header["d_v"], header["d_q"]) != (cfg.n_tokens, cfg.d_v, cfg.d_q):
            raise DependencyError("gen-data", f"{name} dimensions {header} do not match the config")
        return samples

    def encoder(self):
        sections = load_checkpoint(self.require(AE_CKPT, "train-ae"))
        cfg = self.cfg
        ae = AutoEncoder(cfg.d_v, cfg.d_hidden, cfg.d_latent, np.random.default_rng(0))
        ae.load_state_dict(sections["autoencoder"])
        ae.freeze()
        return ae

    def agent(self, name, phase):
        sections = load_checkpoint(self.require(name, phase))
        for key in ("policy", "value"):
            if key not in sections:
                raise DependencyError(phase, f"{name} has no {key!r} section")
        agent = P.new_agent(self.cfg)
        agent.load_state_dict({**sections["policy"], **sections["value"]})
        return agent

    def save_agent(self, agent, name):
        state = agent.state_dict()
        value = {k: v for k, v in state.items() if k.startswith("value_")}
        policy = {k: v for k, v in state.items() if k not in value}
        save_checkpoint({"policy": policy, "value": value}, self.path(name))


def _jsonl(rows):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode("utf-8")


# -- subcommands ------------------------------------------------------------------


def cmd_gen_data(run, args):
    cfg = run.cfg
    for split, name in ((P.TRAIN_SPLIT, TRAIN_DATA), (P.EVAL_SPLIT, EVAL_DATA)):
        samples = P.build_samples(cfg, split)
        save_dataset(run.path(name), cfg.n_tokens, cfg.d_v, cfg.d_q, samples=samples)
        print(f"wrote {len(samples)} samples to {run.path(name)}")


def cmd_train_ae(run, args):
    ae, report = P.train_encoder(run.cfg, run.samples("train"))
    save_checkpoint({"autoencoder": ae.state_dict()}, run.path(AE_CKPT))
    print(f"autoencoder held-out relative error {report.relative_error:.6f} "
          f"(mse {report.mean_squared_error:.6f}) -> {run.path(AE_CKPT)}")


def cmd_gen_demos(run, args):
    cfg = run.cfg
    samples = run.samples("train")
    encoder = run.encoder()
    demos = P.build_demos(cfg, samples, P.encode_all(encoder, samples), P.make_projection(cfg, encoder))
    save_dataset(run.path(DEMOS), cfg.n_tokens, cfg.d_v, cfg.d_q, demos=demos)
    print(f"wrote {len(demos)} demonstration trajectories to {run.path(DEMOS)}")


def _load_demos(run, samples, encoder):
    _, _, stored = load_dataset(run.require(DEMOS, "gen-demos"))
    if stored is None:
        raise DependencyError("gen-demos", f"{run.path(DEMOS)} holds no demos section")
    by_seed = {s.seed: s for s in samples}
    demos = []
    for seed, maps, labels in stored:
        if seed not in by_seed:
            raise DependencyError("gen-data", f"demo references unknown sample seed {seed}")
        s = by_seed[seed]
        demos.append(rebuild_demo(seed, encoder.encode(s.tokens), s.query, maps, labels))
    return demos


def cmd_pretrain_policy(run, args):
    samples = run.samples("train")
    demos = _load_demos(run, samples, run.encoder())
    agent, metrics = P.pretrain(run.cfg, P.new_agent(run.cfg), demos)
    rows = [{"epoch": i + 1, "train_loss": a, "heldout_loss": b, "heldout_agreement": c}
            for i, (a, b, c) in enumerate(zip(metrics.train_loss, metrics.heldout_loss, metrics.heldout_agreement))]
    atomic_write(run.path("pretrain.jsonl"), _jsonl(rows))
    run.save_agent(agent, LFD_CKPT)
    agreement = rows[-1]["heldout_agreement"] if rows else metrics.initial_heldout_agreement
    print(f"pretrained {len(rows)} epochs, held-out agreement {agreement:.4f} -> {run.path(LFD_CKPT)}")


def cmd_train_ppo(run, args):
    cfg = run.cfg
    samples = run.samples("train")
    encoder = run.encoder()
    if args.from_scratch:
        agent = P.new_agent(cfg)
    else:
        agent = run.agent(LFD_CKPT, "pretrain-policy")
    rows = []
    try:
        agent, rows = P.finetune(cfg, agent, samples, P.encode_all(encoder, samples), rows.append)
    except TrainingError:
        # the failing step never reached the optimiser, so parameters are still finite
        run.save_agent(agent, "policy_ppo.abort.ckpt")
        atomic_write(run.path("metrics.jsonl"), _jsonl(rows))
        raise
    atomic_write(run.path("metrics.jsonl"), _jsonl(rows))
    run.save_agent(agent, PPO_CKPT)
    last = rows[-1] if rows else {}
    print(f"ran {len(rows)} PPO iterations, last mean reward {last.get('mean_reward', float('nan')):.4f} "
          f"-> {run.path(PPO_CKPT)}")


def _eval_policy(run, args):
    # an absolute --checkpoint survives os.path.join with the output directory
    if args.checkpoint is None:
        return run.agent(PPO_CKPT, "train-ppo")
    return run.agent(args.checkpoint, "pretrain-policy")


def cmd_eval(run, args):
    cfg = run.cfg
    samples = run.samples("eval")
    encoder = run.encoder()
    agent = _eval_policy(run, args)
    codes = P.encode_all(encoder, samples)
    probs = policy_probabilities(agent, codes, samples)
    if args.rate is not None:
        tau = calibrate_tau(probs, args.rate)
    else:
        tau = cfg.tau if args.tau is None else args.tau
    rep = evaluate(agent, codes, samples, tau, cfg.kappa, probs)
    result = {"tau": tau, "mean_retained": rep.mean_retained, "retention_rate": rep.retention_rate,
              "mean_score": rep.mean_score, "full_score": rep.full_score, "relative_score": rep.relative_score}
    rate = rep.retention_rate
    result["random_score"] = baseline_random(samples, rate, cfg.seed, cfg.kappa).mean_score
    result["heuristic_score"] = baseline_heuristic(samples, codes, P.make_projection(cfg, encoder), rate,
                                                   cfg.kappa).mean_score
    result["full_mask_score"] = baseline_full(samples, cfg.kappa).mean_score
    atomic_write(run.path("eval.json"), (json.dumps(result, sort_keys=True, indent=2) + "\n").encode("utf-8"))
    print(f"tau {tau:.4f}: mean retained tokens {rep.mean_retained:.2f} of {cfg.n_tokens} "
          f"(rate {rate:.4f}), score {rep.mean_score:.4f}, relative score {rep.relative_score:.4f}")
    print(f"baselines at the same rate: random {result['random_score']:.4f}, "
          f"heuristic {result['heuristic_score']:.4f}; full mask {result['full_mask_score']:.4f}")


def cmd_trace(run, args):
    cfg = run.cfg
    samples = run.samples("eval")
    if not 0 <= args.sample < len(samples):
        raise DependencyError("gen-data", f"sample index {args.sample} outside the {len(samples)} eval samples")
    encoder = run.encoder()
    agent = _eval_policy(run, args)
    s = samples[args.sample]
    rec = trace(agent, encoder.encode(s.tokens), s, cfg.t_max, cfg.lambda_disc, args.episode_seed, cfg.kappa)
    rows = [{"sample_seed": rec.sample_seed, **st.to_dict()} for st in rec.steps]
    atomic_write(run.path("trace.jsonl"), _jsonl(rows))
    for st in rec.steps:
        print(f"t={st.step} retained={st.retained:3d} score={st.score:.4f}")


ABLATIONS = {
    "tmax": ("score vs T_max", lambda cfg: P.ablation_tmax(cfg)),
    "dim": ("score vs latent dimension", lambda cfg: P.ablation_dimension(cfg)),
    "arch": ("attention vs mlp policy", lambda cfg: P.ablation_arch(cfg)),
    "init": ("LfD init vs scratch", lambda cfg: P.ablation_init(cfg)),
}


def cmd_ablate(run, args):
    title, fn = ABLATIONS[args.kind]
    rows = fn(run.cfg)
    atomic_write(run.path(f"ablate_{args.kind}.csv"), (P.table_csv(rows) + "\n").encode("utf-8"))
    print(P.format_table(title, rows))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "gen-demos": cmd_gen_demos,
    "pretrain-policy": cmd_pretrain_policy,
    "train-ppo": cmd_train_ppo,
    "eval": cmd_eval,
    "trace": cmd_trace,
    "ablate": cmd_ablate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="run", help="artifact directory (default: run)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="tokenprune", description="Desk-scale RL visual-token pruning.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-ae", "gen-demos", "pretrain-policy"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("train-ppo", parents=[common])
    p.add_argument("--from-scratch", action="store_true", help="skip the LfD checkpoint")
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--tau", type=float, help="retention threshold (default: config tau)")
    p.add_argument("--rate", type=float, help="calibrate tau to this mean retention rate instead")
    p.add_argument("--checkpoint", help=f"policy checkpoint (default: {PPO_CKPT} in --out)")
    p = sub.add_parser("trace", parents=[common])
    p.add_argument("--sample", type=int, default=0, help="index into the eval split")
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--checkpoint", help=f"policy checkpoint (default: {PPO_CKPT} in --out)")
    p = sub.add_parser("ablate", parents=[common])
    p.add_argument("--kind", choices=sorted(ABLATIONS), default="tmax")
    return parser


def _fail(exc, code):
    print(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2
        return int(exc.code or 0)
    if args.command == "eval" and args.tau is not None and args.rate is not None:
        print(json.dumps({"error": "UsageError", "exit_code": 2, "message": "--tau and --rate are exclusive"}),
              file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        run = Run(cfg, args.out)
        run.echo_config(args.command)
        COMMANDS[args.command](run, args)
    except TokenPruneError as exc:
        return _fail(exc, exc.exit_code)
    except FloatingPointError as exc:
        return _fail(exc, 5)
    except OSError as exc:
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
