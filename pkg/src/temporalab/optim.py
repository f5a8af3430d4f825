"""Adam-style optimizer with decoupled weight decay, plus step-size schedules.

The optimizer owns per-parameter first/second moment state keyed by
parameter name and reads gradients from each tensor's ``.grad`` slot, so a
training step is: zero grads, run the forward under a tape, call
``backward``, then ``step()``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, NumericError

# Parameters whose name contains one of these substrings are exempt from
# weight decay: biases, normalization gains, positional tables, and the
# cls vector are conventionally left unregularized.
NO_DECAY_SUBSTRINGS = ("bias", "norm", "pos", "cls")


class AdamW:
    """Decoupled-weight-decay Adam over a dict of named tensors.

    The decay term is applied directly to the weights (scaled by the
    current step size), not folded into the gradient, so it does not pass
    through the moment estimates.
    """

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, no_decay=NO_DECAY_SUBSTRINGS):
        if lr <= 0:
            raise ConfigError(f"step size must be positive, got {lr}")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be nonnegative, got {weight_decay}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(b1), float(b2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.no_decay = tuple(no_decay)
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _decays(self, name):
        return self.weight_decay > 0 and not any(s in name for s in self.no_decay)

    def step(self):
        """Apply one update from the gradients currently stored on the params.

        Parameters with no gradient (not touched by the last backward) are
        left alone entirely, including decay.
        """
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self._decays(name):
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update


def cosine_lr(base_lr, step, total_steps):
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def schedule_lr(kind, base_lr, step, total_steps):
    if kind == "constant":
        return base_lr
    if kind == "cosine":
        return cosine_lr(base_lr, step, total_steps)
    raise ConfigError(f"unknown schedule {kind!r}")
