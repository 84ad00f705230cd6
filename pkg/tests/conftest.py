"""Shared helpers: central finite differences and small configurations."""

import numpy as np
import pytest

from tokenprune.config import RunConfig

FD_STEP = 1e-5
GRAD_FLOOR = 1e-5  # below this, central differences at step 1e-5 are round-off bound


def fd_relative_error(loss_fn, params, step=FD_STEP, max_entries=None, rng=None):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(backward)`` returns the scalar loss; with ``backward=True`` it must
    also accumulate gradients into ``params``.
    """
    for p in params:
        p.zero_grad()
    loss_fn(True)
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = np.arange(p.value.size)
        if max_entries is not None and flat.size > max_entries:
            flat = rng.choice(flat, size=max_entries, replace=False)
        for i in flat:
            idx = np.unravel_index(i, p.value.shape)
            old = p.value[idx]
            p.value[idx] = old + step
            up = loss_fn(False)
            p.value[idx] = old - step
            down = loss_fn(False)
            p.value[idx] = old
            num = (up - down) / (2 * step)
            err = abs(num - g[idx]) / max(abs(num), abs(g[idx]), GRAD_FLOOR)
            worst = max(worst, err)
    return worst


class Probe:
    """Gradient holder for an input array of any rank (``Parameter`` is 2-D only)."""

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


@pytest.fixture
def tiny_cfg():
    """Small but complete run configuration for fast pipeline and CLI tests."""
    return RunConfig(
        seed=3, n_tokens=12, d_v=8, d_q=4, n_relevant=3, signal_rank=2, n_train=40, n_eval=10,
        d_hidden=8, d_latent=4, ae_epochs=2, ae_train_samples=20, n_demos=20, bc_epochs=2,
        d_model=8, n_heads=2, d_ff=8, rl_iterations=2, rollout_batch=4, ppo_minibatch=8,
    )


# -- acceptance verdicts ---------------------------------------------------------

ACCEPTANCE = {}


def record_verdict(number, title, ok, detail=""):
    """Store one acceptance verdict; the terminal summary prints them in order."""
    ACCEPTANCE[number] = (title, bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
