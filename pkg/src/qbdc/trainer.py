"""RMSProp training with early stopping, and error-rate evaluation."""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

from .nn import Network, ShapeError, backward, forward, predict, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class RmsPropState:
    accumulators: list
    learning_rate: float = 0.001
    decay: float = 0.9
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, learning_rate=0.001, decay=0.9, epsilon=1e-8):
        if isinstance(params, Network):
            params = params.params
        return cls([np.zeros_like(p) for p in params], learning_rate, decay, epsilon)


@dataclass
class TrainOptions:
    batch_size: int = 200
    max_epochs: int = 100
    patience: int = 5
    standard_dropout_rate: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        rate = self.standard_dropout_rate
        if rate is not None and not 0.0 <= rate < 1.0:
            raise ValueError(f"standard_dropout_rate must be in [0, 1), got {rate}")


@dataclass
class EarlyStopState:
    patience: int
    best_error: float = float("inf")
    since_improvement: int = 0
    best_params: list | None = None

    def update(self, error: float, params) -> bool:
        """Record one evaluation; returns True when training should stop."""
        if error < self.best_error:
            self.best_error = error
            self.since_improvement = 0
            self.best_params = [p.copy() for p in params]
            return False
        if self.since_improvement + 1 > self.patience:
            return True
        self.since_improvement += 1
        return False


def rmsprop_step(net, grads, state: RmsPropState):
    """In-place RMSProp update: ``r = d*r + (1-d)*g^2; theta -= lr*g/sqrt(r+eps)``.

    ``net`` may be a :class:`Network` or a list of parameter arrays; ``grads``
    a :class:`Gradients` or a list aligned with the parameters. Returns
    ``(net, state)``.
    """
    params = net.params if isinstance(net, Network) else net
    gs = grads.params if hasattr(grads, "params") else grads
    if not len(params) == len(gs) == len(state.accumulators):
        raise ShapeError(f"{len(params)} parameters, {len(gs)} gradients, "
                         f"{len(state.accumulators)} accumulators")
    for k, (p, g, r) in enumerate(zip(params, gs, state.accumulators)):
        if g is None:
            continue
        if not p.shape == g.shape == r.shape:
            raise ShapeError(f"parameter {k}: shape {p.shape}, gradient {g.shape}, "
                             f"accumulator {r.shape}")
        r *= state.decay
        r += (1.0 - state.decay) * g * g
        p -= state.learning_rate * g / np.sqrt(r + state.epsilon)
    return net, state


def evaluate(net: Network, x, y, mask=None) -> float:
    """Fraction of misclassified samples."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, x, mask) != y))


def mean_loss(net: Network, x, y, chunk: int = 1000) -> float:
    total = 0.0
    for i in range(0, len(y), chunk):
        logits, _ = forward(net, x[i:i + chunk])
        total += softmax_cross_entropy(logits, y[i:i + chunk]) * len(y[i:i + chunk])
    return total / len(y)


def train_until_early_stop(net: Network, x, y, val_x, val_y, opts: TrainOptions,
                           state: RmsPropState, rng):
    """Minibatch RMSProp on ``(x, y)`` until validation error stops improving.

    The starting parameters count as epoch 0. Returns ``(net, log)`` where
    ``net`` holds the best-validation parameters and ``log`` is a list of
    ``(epoch, train_loss, val_error)`` rows.
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("labeled pool is empty")
    if len(val_y) == 0:
        raise ValueError("validation set is empty")
    rate = opts.standard_dropout_rate or 0.0
    stopper = EarlyStopState(opts.patience)
    err = evaluate(net, val_x, val_y)
    rows = [(0, float("nan"), err)]
    stopper.update(err, net.params)
    for epoch in range(1, opts.max_epochs + 1):
        order = rng.permutation(len(y))
        losses = []
        for i in range(0, len(y), opts.batch_size):
            idx = order[i:i + opts.batch_size]
            logits, trace = forward(net, x[idx], dropout=rate, rng=rng)
            losses.append(softmax_cross_entropy(logits, y[idx]))
            rmsprop_step(net, backward(net, trace, y[idx]), state)
        err = evaluate(net, val_x, val_y)
        loss = float(np.mean(losses))
        if not np.isfinite(loss):
            raise FloatingPointError(f"training loss became {loss} at epoch {epoch}")
        rows.append((epoch, loss, err))
        if stopper.update(err, net.params):
            break
    for p, best in zip(net.params, stopper.best_params):
        p[...] = best
    log.debug("trained %d epochs, best val error %.4f", rows[-1][0], stopper.best_error)
    return net, rows
