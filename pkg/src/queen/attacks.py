"""Model-extraction harness.

Every attack follows the same skeleton: spend a query budget against an
oracle (a plain callable from input vector to confidence vector, defended
or not), turn the replies into a training set, and fit a piracy model on
it. The oracle is treated as a black box; if it exposes a
`last_condition` attribute the per-query dispatch label is logged too,
which is how defended runs report their condition mix.

Attack kinds:
  direct      query raw points, train on the full confidence vectors
  label_only  query raw points, train on one-hot argmax labels
  s4l         average replies over several noise-augmented copies
  smoothing   average replies over several coordinate-scaled copies
  jbda_tr     grow a small seed set by stepping along the piracy
              model's input gradient, querying each synthetic point

Desk-scale inputs are feature vectors, so the image augmentations the
averaging attacks normally use are replaced by additive Gaussian noise
(s4l) and random per-coordinate scaling (smoothing); both preserve the
recover-by-averaging mechanism that defeats naive output noising.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset
from .util import derive_rng, derive_seed

log = logging.getLogger(__name__)

ATTACK_KINDS = ("direct", "label_only", "s4l", "smoothing", "jbda_tr")
AUGMENT_KINDS = ("noise", "affine1d")


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    budget: int
    piracy_spec: nn.NetworkSpec
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 32
    loss_kind: str = "ce"
    n_augments: int = 4
    noise_scale: float = 0.05
    affine_scale: float = 0.1
    fgsm_eta: float = 0.1
    jbda_rounds: int = 3
    seed_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.loss_kind not in nn.LOSSES:
            raise ValueError(f"unknown loss {self.loss_kind!r}")
        if self.kind in ("s4l", "smoothing") and self.n_augments < 2:
            raise ValueError("averaging attacks need n_augments >= 2")
        if self.kind == "jbda_tr" and self.seed_size < 1:
            raise ValueError("jbda_tr needs seed_size >= 1")
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("bad training hyperparameters")


@dataclass
class QueryLog:
    """Every oracle call in order: query, reply, dispatch label if any."""

    queries: list = field(default_factory=list)
    answers: list = field(default_factory=list)
    conditions: list = field(default_factory=list)

    def record(self, x, answer, condition=None):
        self.queries.append(np.asarray(x, dtype=np.float64).copy())
        self.answers.append(np.asarray(answer, dtype=np.float64).copy())
        self.conditions.append(condition)

    def __len__(self):
        return len(self.queries)

    def as_arrays(self):
        return np.array(self.queries), np.array(self.answers)


def augment(x, kind: str, rng: np.random.Generator, magnitude: float) -> np.ndarray:
    """Bounded input jitter; magnitude 0 reproduces x exactly."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "noise":
        return x + magnitude * rng.standard_normal(x.shape)
    if kind == "affine1d":
        return x * rng.uniform(1.0 - magnitude, 1.0 + magnitude, x.shape)
    raise ValueError(f"unknown augmentation {kind!r}")


def _call(oracle, x, logbook: QueryLog) -> np.ndarray:
    answer = np.asarray(oracle(x), dtype=np.float64)
    cond = getattr(oracle, "last_condition", None)
    logbook.record(x, answer, None if cond is None else str(cond))
    return answer


def _train_piracy(cfg: AttackConfig, X, T) -> nn.Network:
    result = nn.sgd_train(
        cfg.piracy_spec,
        nn.Batch(np.asarray(X), np.asarray(T)),
        epochs=cfg.epochs,
        lr=cfg.lr,
        seed=derive_seed(cfg.seed, "piracy-train"),
        batch_size=cfg.batch_size,
        loss=cfg.loss_kind,
    )
    return nn.Network(cfg.piracy_spec, result.params)


def _averaging_attack(oracle, aux_X, cfg, logbook, augment_kind, magnitude):
    """One target per base point: the mean reply over augmented copies.

    The budget counts every augmented call. A trailing base point that
    cannot afford all its copies keeps the partial mean (logged).
    """
    rng = derive_rng(cfg.seed, "augment")
    inputs, targets = [], []
    spent = 0
    i = 0
    while spent < cfg.budget:
        x = aux_X[i % len(aux_X)]
        i += 1
        copies = min(cfg.n_augments, cfg.budget - spent)
        answers = []
        for _ in range(copies):
            answers.append(_call(oracle, augment(x, augment_kind, rng, magnitude), logbook))
            spent += 1
        if copies < cfg.n_augments:
            log.info("budget truncated the last base point to %d copies", copies)
        inputs.append(x)
        targets.append(np.mean(answers, axis=0))
    return np.array(inputs), np.array(targets)


def run_attack(oracle, aux: Dataset, cfg: AttackConfig) -> tuple[nn.Network, QueryLog]:
    """Spend the budget against the oracle and train the piracy model."""
    logbook = QueryLog()
    order = derive_rng(cfg.seed, "query-order").permutation(len(aux))
    aux_X = aux.X[order]

    if cfg.kind in ("direct", "label_only"):
        X, T = [], []
        for i in range(cfg.budget):
            x = aux_X[i % len(aux_X)]
            answer = _call(oracle, x, logbook)
            if cfg.kind == "label_only":
                hard = np.zeros_like(answer)
                hard[int(np.argmax(answer))] = 1.0
                answer = hard
            X.append(x)
            T.append(answer)
        pirate = _train_piracy(cfg, X, T)

    elif cfg.kind in ("s4l", "smoothing"):
        if cfg.kind == "s4l":
            magnitude = cfg.noise_scale * float(np.std(aux.X))
            X, T = _averaging_attack(oracle, aux_X, cfg, logbook, "noise", magnitude)
        else:
            X, T = _averaging_attack(oracle, aux_X, cfg, logbook, "affine1d", cfg.affine_scale)
        pirate = _train_piracy(cfg, X, T)

    else:  # jbda_tr
        pool, targets = [], []
        for i in range(min(cfg.seed_size, cfg.budget)):
            x = aux_X[i % len(aux_X)]
            pool.append(x)
            targets.append(_call(oracle, x, logbook))
        if cfg.seed_size > cfg.budget:
            log.info("budget truncated the seed set to %d points", len(pool))
        pirate = _train_piracy(cfg, pool, targets)
        for _ in range(cfg.jbda_rounds):
            if len(logbook) >= cfg.budget:
                break
            for j in range(len(pool)):
                if len(logbook) >= cfg.budget:
                    log.info("budget exhausted mid-round at %d queries", len(logbook))
                    break
                g = nn.input_grad(
                    pirate.spec,
                    pirate.params,
                    pool[j][None, :],
                    targets[j][None, :],
                    cfg.loss_kind,
                )[0]
                x_new = pool[j] - cfg.fgsm_eta * g
                pool.append(x_new)
                targets.append(_call(oracle, x_new, logbook))
            pirate = _train_piracy(cfg, pool, targets)

    return pirate, logbook


def evaluate_piracy(piracy: nn.Network, protectee: nn.Network, test: Dataset):
    """Accuracy against true labels and argmax agreement with the owner."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = piracy.predict(test.X)
    accuracy = float(np.mean(pred == test.y))
    agreement = float(np.mean(pred == protectee.predict(test.X)))
    return accuracy, agreement
