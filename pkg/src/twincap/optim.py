"""AdamW, the cyclic cosine learning-rate schedule, and early stopping."""

from __future__ import annotations

import logging
import math

import numpy as np

from twincap.numerics import ParameterSet

log = logging.getLogger(__name__)


def adamw_update(theta, grad, m, v, t, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
    """One AdamW step on raw arrays; returns ``(theta, m, v)`` without mutating inputs."""
    b1, b2 = betas
    theta = theta - lr * weight_decay * theta
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class AdamW:
    """Decoupled weight decay Adam over one :class:`ParameterSet`."""

    def __init__(self, params: ParameterSet, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}
        self._warned = set()

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                if name not in self._warned:
                    self._warned.add(name)
                    log.warning("parameter %s has no gradient; skipped", name)
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * upd

    def state(self, prefix=""):
        out = {f"{prefix}m.{n}": a for n, a in self.m.items()}
        out.update({f"{prefix}v.{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, state, t, prefix=""):
        for n in self.m:
            self.m[n][...] = state[f"{prefix}m.{n}"]
            self.v[n][...] = state[f"{prefix}v.{n}"]
        self.t = int(t)


def adamw_step(params: ParameterSet, opt: AdamW, lr: float):
    if opt.params is not params:
        raise ValueError("optimizer is bound to a different parameter set")
    opt.step(lr)


def lr_at(step: int, steps_per_epoch: int, lr: float, cycle_epochs: int = 4, halve_every: int = 4) -> float:
    """Learning rate at ``step``.

    The base rate halves every ``halve_every`` epochs.  Within each cycle of
    ``cycle_epochs`` a cosine runs from base down to base/10 at mid-cycle and
    back up to base at the cycle end.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    epoch = step / steps_per_epoch
    base = lr * 0.5 ** math.floor(epoch / halve_every)
    frac = (epoch % cycle_epochs) / cycle_epochs
    low = base / 10
    return low + (base - low) * (1 + math.cos(2 * math.pi * frac)) / 2


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without an improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.bad_epochs = 0
        self._improved = False

    def observe(self, metric: float) -> bool:
        """Record one evaluation; returns True when it is a new best."""
        if metric > self.best:
            self.best = metric
            self._improved = True
            return True
        return False

    def end_epoch(self) -> bool:
        """Close the epoch; returns True when training should stop."""
        if self._improved:
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        self._improved = False
        return self.bad_epochs >= self.patience
