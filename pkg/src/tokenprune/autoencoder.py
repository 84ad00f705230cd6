"""Token-wise autoencoder used to compress visual tokens into policy state codes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, StateError, TrainingError
from .nn import GELU, Adam, LayerNorm, Linear, Module

log = logging.getLogger(__name__)


class AutoEncoder(Module):
    """Encoder ``d_v -> d_hidden -> d_latent`` with LayerNorm+GELU on the hidden
    layer, and a mirrored decoder."""

    def __init__(self, d_v, d_hidden, d_latent, rng):
        self.d_v, self.d_hidden, self.d_latent = d_v, d_hidden, d_latent
        self.enc_in = Linear(d_v, d_hidden, rng)
        self.enc_norm = LayerNorm(d_hidden)
        self.enc_act = GELU()
        self.enc_out = Linear(d_hidden, d_latent, rng)
        self.dec_in = Linear(d_latent, d_hidden, rng)
        self.dec_norm = LayerNorm(d_hidden)
        self.dec_act = GELU()
        self.dec_out = Linear(d_hidden, d_v, rng)

    def encode(self, tokens):
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[1] != self.d_v:
            raise DimensionError(f"expected tokens of width {self.d_v}, got shape {tokens.shape}")
        if tokens.shape[0] == 0:
            return np.zeros((0, self.d_latent))
        h = self.enc_act.forward(self.enc_norm.forward(self.enc_in.forward(tokens)))
        return self.enc_out.forward(h)

    def decode(self, codes):
        h = self.dec_act.forward(self.dec_norm.forward(self.dec_in.forward(codes)))
        return self.dec_out.forward(h)

    def reconstruct(self, tokens):
        return self.decode(self.encode(tokens))

    def backward(self, d_recon):
        d = self.dec_in.backward(self.dec_norm.backward(self.dec_act.backward(self.dec_out.backward(d_recon))))
        return self.enc_in.backward(self.enc_norm.backward(self.enc_act.backward(self.enc_out.backward(d))))


def recon_loss(tokens, ae):
    """Mean over tokens of the squared reconstruction error."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("recon_loss needs a non-empty token matrix")
    diff = ae.reconstruct(tokens) - tokens
    return float(np.sum(diff * diff) / tokens.shape[0])


def recon_loss_and_grad(tokens, ae):
    """Loss plus parameter gradients (accumulated into ``ae``; caller zeroes)."""
    diff = ae.reconstruct(tokens) - tokens
    n = tokens.shape[0]
    ae.backward(2.0 * diff / n)
    return float(np.sum(diff * diff) / n)


def relative_error(tokens, ae):
    tokens = np.asarray(tokens, dtype=np.float64)
    err = np.linalg.norm(ae.reconstruct(tokens) - tokens, axis=1)
    norms = np.linalg.norm(tokens, axis=1)
    ok = norms > 0
    return float(np.mean(err[ok] / norms[ok]))


def freeze(ae):
    ae.freeze()
    return ae


@dataclass
class ReconReport:
    mean_squared_error: float
    relative_error: float
    epoch: int
    initial_mean_squared_error: float = float("nan")
    history: list = field(default_factory=list)


def train_autoencoder(ae, token_sets, epochs=50, lr=1e-3, batch_size=256, rng=None, holdout_fraction=0.1):
    """Fit ``ae`` on a list of token matrices (one per sample).

    The last ``holdout_fraction`` of the samples (by index) are held out and
    only used for the report.
    """
    if ae.frozen:
        raise StateError("autoencoder is frozen")
    rng = np.random.default_rng(0) if rng is None else rng
    n_samples = len(token_sets)
    n_hold = max(1, int(round(n_samples * holdout_fraction))) if n_samples > 1 else 0
    n_train = n_samples - n_hold
    train = np.concatenate(list(token_sets[:n_train]), axis=0)
    held = np.concatenate(list(token_sets[n_train:]), axis=0) if n_hold else train

    opt = Adam(ae.parameters(), lr=lr)
    init_mse = recon_loss(held, ae)
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            batch = train[order[start : start + batch_size]]
            ae.zero_grad()
            loss = recon_loss_and_grad(batch, ae)
            if not np.isfinite(loss):
                raise TrainingError(f"autoencoder loss became {loss} at epoch {epoch}")
            opt.step()
        mse = recon_loss(held, ae)
        if not np.isfinite(mse):
            raise TrainingError(f"held-out autoencoder loss became {mse} at epoch {epoch}")
        history.append(mse)
        log.debug("autoencoder epoch %d held-out mse %.6f", epoch, mse)
    report = ReconReport(
        mean_squared_error=history[-1] if history else init_mse,
        relative_error=relative_error(held, ae),
        epoch=epochs,
        initial_mean_squared_error=init_mse,
        history=history,
    )
    return ae, report
