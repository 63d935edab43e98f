"""Batchwise-dropout committees: mask sampling, last-layer retraining, disagreement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Network, forward, predict, softmax_cross_entropy
from .trainer import RmsPropState, TrainOptions, rmsprop_step


@dataclass(frozen=True)
class DropoutMask:
    """Keep flags per hidden parameterized layer (filters for Conv, units for Dense).

    ``keep`` maps the parameterized-layer ordinal (0 = first Conv/Dense) to a
    boolean vector. The output layer never appears.
    """
    keep: dict
    p: float

    @classmethod
    def keep_all(cls, net: Network, p: float = 0.0) -> "DropoutMask":
        return cls({k: np.ones(w, dtype=bool) for k, w in enumerate(net.hidden_widths())}, p)

    @classmethod
    def sample(cls, net: Network, p: float, rng) -> "DropoutMask":
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        keep = {}
        for k, width in enumerate(net.hidden_widths()):
            while True:
                flags = rng.random(width) >= p
                if flags.any():
                    break
            flags.setflags(write=False)
            keep[k] = flags
        return cls(keep, p)


@dataclass
class CommitteeMember:
    """A partial network: the base network under a fixed mask, with a private last layer."""
    base: Network
    mask: DropoutMask
    weight: np.ndarray
    bias: np.ndarray
    net: Network = field(init=False, repr=False)

    def __post_init__(self):
        self.net = self.base.with_last_layer(self.weight, self.bias)

    def logits(self, x):
        return forward(self.net, x, self.mask)[0]

    def predict(self, x) -> np.ndarray:
        return predict(self.net, x, self.mask)

    def features(self, x, chunk: int = 1000) -> np.ndarray:
        """Masked activations feeding the private last layer, flattened."""
        pos = self.net.param_layers[-1]
        out = []
        for i in range(0, len(x), chunk):
            _, trace = forward(self.net, x[i:i + chunk], self.mask)
            feats = trace.inputs[pos]
            out.append(feats.reshape(feats.shape[0], -1))
        return np.concatenate(out)


@dataclass
class Committee:
    members: list

    def __post_init__(self):
        if not self.members:
            raise ValueError("a committee needs at least one member")

    def __len__(self):
        return len(self.members)

    def votes(self, x) -> np.ndarray:
        """(n_members, n_samples) predicted labels."""
        return np.stack([m.predict(x) for m in self.members])


def dropout_sampling(net: Network, p_d: float, n: int, rng) -> Committee:
    if not 0.0 <= p_d < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p_d}")
    if n < 1:
        raise ValueError(f"committee size must be >= 1, got {n}")
    w, b = net.last_layer()
    return Committee([CommitteeMember(net, DropoutMask.sample(net, p_d, rng), w.copy(), b.copy())
                      for _ in range(n)])


def _dense_step(w, b, feats, y):
    """Cross-entropy gradients of a softmax-regression layer on fixed features."""
    logits = feats @ w + b
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(y)), y] -= 1
    p /= len(y)
    return feats.T @ p, p.sum(axis=0)


def retrain_last_layer(member: CommitteeMember, x, y, val_x, val_y, opts: TrainOptions,
                       rng, learning_rate=0.001, decay=0.9, epsilon=1e-8) -> CommitteeMember:
    """Fit the member's private last layer by RMSProp on cross-entropy over ``(x, y)``.

    Earlier layers are frozen, so their masked activations are computed once.
    Early stopping watches validation loss; the best layer is kept.
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("labeled pool is empty")
    feats, val_feats = member.features(x), member.features(val_x)
    w, b = member.weight, member.bias
    state = RmsPropState.zeros_like([w, b], learning_rate, decay, epsilon)
    best = softmax_cross_entropy(val_feats @ w + b, val_y)
    best_wb, since = (w.copy(), b.copy()), 0
    for _ in range(opts.max_epochs):
        order = rng.permutation(len(y))
        for i in range(0, len(y), opts.batch_size):
            idx = order[i:i + opts.batch_size]
            rmsprop_step([w, b], _dense_step(w, b, feats[idx], y[idx]), state)
        loss = softmax_cross_entropy(val_feats @ w + b, val_y)
        if loss < best:
            best, best_wb, since = loss, (w.copy(), b.copy()), 0
        elif since + 1 > opts.patience:
            break
        else:
            since += 1
    w[...], b[...] = best_wb
    return member


def disagreement_score(votes) -> int:
    """Members disagreeing with the plurality vote (ties go to the lowest label)."""
    votes = np.asarray(votes)
    if votes.size == 0:
        raise ValueError("empty committee")
    counts = np.bincount(votes)
    return int(len(votes) - counts[np.argmax(counts)])


def plurality(votes) -> int:
    return int(np.argmax(np.bincount(np.asarray(votes))))


def score_votes(votes: np.ndarray) -> np.ndarray:
    """Vectorized :func:`disagreement_score` over the columns of a vote matrix."""
    n, m = votes.shape
    classes = int(votes.max()) + 1 if votes.size else 1
    counts = np.zeros((m, classes), dtype=np.int64)
    for row in votes:
        counts[np.arange(m), row] += 1
    return n - counts.max(axis=1)


def score_candidates(committee: Committee, x, indices) -> list[tuple[int, int]]:
    """``(index, score)`` for each candidate, in the given order."""
    indices = np.asarray(indices)
    if len(indices) == 0:
        raise ValueError("empty candidate set")
    scores = score_votes(committee.votes(x))
    return [(int(i), int(s)) for i, s in zip(indices, scores)]
