"""Pool-based active learning: QBDC rounds and the random-selection baseline."""
from __future__ import annotations

from dataclasses import dataclass, field
import logging
import time

import numpy as np

from . import committee as cm
from .nn import Network
from .trainer import RmsPropState, TrainOptions, evaluate, train_until_early_stop

log = logging.getLogger(__name__)

STRATEGIES = ("qbdc", "random")


class PoolExhausted(Exception):
    """Raised when a candidate draw finds no unlabeled samples left."""


class Pools:
    """Disjoint labeled/unlabeled index sets over one training pool."""

    def __init__(self, size: int):
        self.size = size
        self.labeled = np.zeros(0, dtype=np.intp)
        self.unlabeled = np.arange(size, dtype=np.intp)

    def move(self, indices):
        indices = np.asarray(indices, dtype=np.intp)
        taken = np.isin(self.unlabeled, indices)
        if taken.sum() != len(np.unique(indices)) or len(np.unique(indices)) != len(indices):
            raise ValueError("can only label distinct indices that are currently unlabeled")
        self.unlabeled = self.unlabeled[~taken]
        self.labeled = np.concatenate([self.labeled, indices])

    def check(self):
        """Raise if the pools overlap or lost/gained samples."""
        if np.intersect1d(self.labeled, self.unlabeled).size:
            raise AssertionError("labeled and unlabeled pools overlap")
        if len(self.labeled) + len(self.unlabeled) != self.size or \
                len(np.union1d(self.labeled, self.unlabeled)) != self.size:
            raise AssertionError("pool union changed")


class Oracle:
    """Simulated annotator backed by held-back ground-truth labels."""

    def __init__(self, labels):
        self._labels = np.asarray(labels)
        self._revealed: set[int] = set()

    @property
    def revealed(self) -> int:
        return len(self._revealed)

    def query(self, indices) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.intp)
        self._revealed.update(indices.tolist())
        return self._labels[indices]


@dataclass
class ActiveConfig:
    committee_size: int = 3
    dropout: float = 0.5
    candidates: int | None = None  # K; None means 10 * batch_size
    batch_size: int = 200
    init_minibatches: int = 10
    budget: float = 0.3
    strategy: str = "qbdc"
    seed: int = 1
    warm_start: bool = True
    member_max_epochs: int = 20
    member_patience: int = 2

    def __post_init__(self):
        if self.candidates is None:
            self.candidates = 10 * self.batch_size
        if self.committee_size < 1:
            raise ValueError("committee_size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.candidates < self.batch_size:
            raise ValueError("candidates (K) must be >= batch_size")
        if self.init_minibatches < 0:
            raise ValueError("init_minibatches must be >= 0")
        if not 0.0 < self.budget <= 1.0:
            raise ValueError("budget must be a fraction in (0, 1]")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    def budget_count(self, pool_size: int) -> int:
        return int(round(self.budget * pool_size))


@dataclass
class RoundRecord:
    round: int
    labeled: int
    val_error: float
    test_error: float
    seconds: float


@dataclass
class Splits:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def init_labeled(pools: Pools, oracle: Oracle, count: int, rng) -> Pools:
    if count > len(pools.unlabeled):
        raise ValueError(f"cannot label {count} samples from a pool of {len(pools.unlabeled)}")
    chosen = rng.choice(pools.unlabeled, size=count, replace=False)
    oracle.query(chosen)
    pools.move(chosen)
    return pools


def draw_candidates(pools: Pools, k: int, rng) -> np.ndarray:
    if len(pools.unlabeled) == 0:
        raise PoolExhausted("no unlabeled samples left")
    return rng.choice(pools.unlabeled, size=min(k, len(pools.unlabeled)), replace=False)


def select_batch(scored, batch_size: int, rng) -> np.ndarray:
    """Indices of the ``batch_size`` highest scores; cutoff ties broken at random."""
    if len(scored) < batch_size:
        raise ValueError(f"{len(scored)} candidates for a batch of {batch_size}")
    idx = np.array([i for i, _ in scored], dtype=np.intp)
    scores = np.array([s for _, s in scored])
    perm = rng.permutation(len(idx))
    order = perm[np.argsort(-scores[perm], kind="stable")]
    return idx[order[:batch_size]]


@dataclass
class ActiveRun:
    """Mutable state of one experiment run."""
    net: Network
    config: ActiveConfig
    train_opts: TrainOptions
    splits: Splits
    optimizer: RmsPropState
    pools: Pools
    oracle: Oracle
    rngs: dict
    layers: list = field(default_factory=list)
    committees_built: int = 0
    selections: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def labeled_data(self):
        idx = self.pools.labeled
        return self.splits.train_x[idx], self.oracle.query(idx)

    def fit(self):
        """Train the full network on the labeled set and record the errors."""
        start = time.perf_counter()
        if not self.config.warm_start and self.records:
            self.net = Network.build(self.layers, self.net.input_shape, self.rngs["init"],
                                     self.net.dtype)
            self.optimizer = RmsPropState.zeros_like(
                self.net, self.optimizer.learning_rate, self.optimizer.decay,
                self.optimizer.epsilon)
        s = self.splits
        if len(self.pools.labeled):
            x, y = self.labeled_data()
            train_until_early_stop(self.net, x, y, s.val_x, s.val_y, self.train_opts,
                                   self.optimizer, self.rngs["train"])
        rec = RoundRecord(len(self.records), len(self.pools.labeled),
                          evaluate(self.net, s.val_x, s.val_y),
                          evaluate(self.net, s.test_x, s.test_y),
                          time.perf_counter() - start)
        self.records.append(rec)
        log.info("round %d: %d labeled, val %.4f, test %.4f", rec.round, rec.labeled,
                 rec.val_error, rec.test_error)
        return rec


def input_shape_of(x) -> tuple:
    """Grayscale image batches ``(N, H, W)`` gain a channel axis."""
    return (1,) + x.shape[1:] if x.ndim == 3 else x.shape[1:]


def make_run(config: ActiveConfig, splits: Splits, layers, train_opts: TrainOptions,
             learning_rate=0.001, decay=0.9, epsilon=1e-8, dtype=np.float32) -> ActiveRun:
    # independent streams so the random baseline never shares draws with committee code
    names = ("init", "pool", "train", "committee")
    rngs = {name: np.random.default_rng(s) for name, s in
            zip(names, np.random.SeedSequence(config.seed).spawn(len(names)))}
    net = Network.build(layers, input_shape_of(splits.train_x), rngs["init"], dtype)
    return ActiveRun(net=net, config=config, train_opts=train_opts, splits=splits,
                     optimizer=RmsPropState.zeros_like(net, learning_rate, decay, epsilon),
                     pools=Pools(len(splits.train_y)), oracle=Oracle(splits.train_y),
                     rngs=rngs, layers=list(layers))


def run_round(run: ActiveRun) -> RoundRecord:
    """One selection round: score candidates, label the best batch, retrain."""
    cfg, s = run.config, run.splits
    prng = run.rngs["pool"]
    if run.pools.labeled.size + cfg.batch_size > cfg.budget_count(run.pools.size):
        raise ValueError("label budget exhausted")
    cand = draw_candidates(run.pools, cfg.candidates, prng)
    if len(cand) < cfg.batch_size:
        raise PoolExhausted(f"only {len(cand)} unlabeled samples left")
    if cfg.strategy == "qbdc":
        crng = run.rngs["committee"]
        committee = cm.dropout_sampling(run.net, cfg.dropout, cfg.committee_size, crng)
        run.committees_built += 1
        x, y = run.labeled_data()
        member_opts = TrainOptions(run.train_opts.batch_size, cfg.member_max_epochs,
                                   cfg.member_patience)
        for member in committee.members if len(y) else ():
            cm.retrain_last_layer(member, x, y, s.val_x, s.val_y, member_opts, crng,
                                  run.optimizer.learning_rate, run.optimizer.decay,
                                  run.optimizer.epsilon)
        scored = cm.score_candidates(committee, s.train_x[cand], cand)
    else:
        scored = [(int(i), 0) for i in cand]
    chosen = select_batch(scored, cfg.batch_size, prng)
    run.oracle.query(chosen)
    run.pools.move(chosen)
    run.selections.append(chosen)
    return run.fit()


def run_experiment(config: ActiveConfig, splits: Splits, layers, train_opts: TrainOptions,
                   learning_rate=0.001, decay=0.9, epsilon=1e-8, dtype=np.float32,
                   check_pools: bool = False):
    """Initial random labeling then selection rounds until the budget is spent.

    Returns ``(records, net, run)``.
    """
    pool_size = len(splits.train_y)
    init = config.init_minibatches * config.batch_size
    budget = config.budget_count(pool_size)
    if init > pool_size:
        raise ValueError(f"initial labeled set ({init}) exceeds the pool ({pool_size})")
    if init > budget:
        raise ValueError(f"initial labeled set ({init}) exceeds the budget ({budget})")
    run = make_run(config, splits, layers, train_opts, learning_rate, decay, epsilon, dtype)
    init_labeled(run.pools, run.oracle, init, run.rngs["pool"])
    run.fit()
    while len(run.pools.labeled) + config.batch_size <= budget and \
            len(run.pools.unlabeled) >= config.batch_size:
        run_round(run)
        if check_pools:
            run.pools.check()
    return run.records, run.net, run


def train_full(config: ActiveConfig, splits: Splits, layers, train_opts: TrainOptions,
               learning_rate=0.001, decay=0.9, epsilon=1e-8, dtype=np.float32):
    """Baseline: label the whole pool and train once. Returns ``(records, net, run)``."""
    run = make_run(config, splits, layers, train_opts, learning_rate, decay, epsilon, dtype)
    init_labeled(run.pools, run.oracle, run.pools.size, run.rngs["pool"])
    run.fit()
    return run.records, run.net, run
