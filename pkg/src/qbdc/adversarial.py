"""Fast gradient sign perturbations and adversarial counts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Network, as_batch, backward, forward, predict


@dataclass(frozen=True)
class FgsmParams:
    epsilon: float
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.lo < self.hi:
            raise ValueError(f"clamp range [{self.lo}, {self.hi}] is empty")


@dataclass
class ReportRow:
    epsilon: float
    probed: int
    flipped: int

    @property
    def rate(self) -> float:
        return self.flipped / self.probed if self.probed else 0.0


@dataclass
class AdversarialReport:
    rows: list


def input_gradient(net: Network, x, y) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the (network-shaped) input."""
    _, trace = forward(net, x)
    return backward(net, trace, y, want_input_grad=True).input


def fgsm_perturb(net: Network, x, y, params: FgsmParams) -> np.ndarray:
    """``clamp(x + eps * sign(grad_x J), lo, hi)`` for a batch ``x`` with labels ``y``.

    Entries with an exactly zero gradient are left unperturbed. The result
    has the shape of ``x``.
    """
    x = np.asarray(x)
    if params.epsilon == 0:
        return x.copy()
    xb = as_batch(net, x)
    step = params.epsilon * np.sign(input_gradient(net, xb, np.asarray(y)))
    adv = np.clip(xb + step.astype(xb.dtype), params.lo, params.hi)
    return adv.reshape(x.shape)


def count_adversarials(net: Network, x, y, eps_grid, lo: float = 0.0, hi: float = 1.0,
                       chunk: int = 500) -> AdversarialReport:
    """Per epsilon, how many correctly classified samples become misclassified."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot probe an empty subset")
    xb = as_batch(net, x)
    correct = predict(net, xb) == y
    rows = []
    for eps in eps_grid:
        params = FgsmParams(float(eps), lo, hi)
        flipped = 0
        for i in range(0, len(y), chunk):
            sl = slice(i, i + chunk)
            ok = correct[sl]
            if not ok.any() or params.epsilon == 0:
                continue
            adv = fgsm_perturb(net, xb[sl][ok], y[sl][ok], params)
            flipped += int(np.sum(predict(net, adv) != y[sl][ok]))
        rows.append(ReportRow(float(eps), len(y), flipped))
    return AdversarialReport(rows)
