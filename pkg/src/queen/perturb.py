"""Answer falsification: confidence reversal and feature-space nudging.

Two falsified-answer paths exist. For queries that have collectively
probed a class past its budget, the honest confidence vector is pushed
in the opposite direction of what the extractor's training gradient
wants: a shadow ensemble stands in for the half-trained pirate model,
and the answer becomes the valid confidence vector closest in angle to
twice the ensemble estimate minus the honest answer. For queries outside
the sensitive region, the feature vector is walked toward the most
distant class center and re-scored just before the predicted label would
flip, which keeps the top-1 label while shaving the margin to nearly
nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset
from .util import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PerturbationConfig:
    """Knobs for both falsification paths.

    fp_step None means a scale-aware step: 1% of the initial distance to
    the target center, chosen per query.
    """

    fp_step: float | None = None
    fp_max_iters: int = 1000
    opt_iters: int = 200
    opt_lr: float = 0.1
    opt_tol: float = 1e-9
    draw_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.fp_step is not None and not (self.fp_step > 0):
            raise ValueError("fp_step must be positive when set")
        if self.fp_max_iters < 1 or self.opt_iters < 1:
            raise ValueError("iteration caps must be >= 1")
        if not (self.opt_lr > 0) or not (self.opt_tol > 0):
            raise ValueError("optimizer step and tolerance must be positive")
        if self.draw_size < 1:
            raise ValueError("draw_size must be >= 1")


# ------------------------------------------------------- simplex geometry


def simplex_project(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex.

    Sort-and-threshold: find the largest prefix of the descending sort
    whose shifted values stay positive, subtract the matching constant,
    clip the rest to zero.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("need a 1-dimensional vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    j = np.arange(1, v.size + 1)
    rho = np.max(np.flatnonzero(u + (1.0 - css) / j > 0)) + 1
    lam = (1.0 - css[rho - 1]) / rho
    return np.maximum(v + lam, 0.0)


def clip_renormalize(v) -> np.ndarray:
    c = np.maximum(np.asarray(v, dtype=np.float64), 0.0)
    s = c.sum()
    if s <= 0:
        return np.full(c.size, 1.0 / c.size)
    return c / s


def _cosine(a, b) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def is_simplex_valid(v, atol: float = 1e-9) -> bool:
    v = np.asarray(v)
    return bool(np.all(v >= 0.0) and abs(float(v.sum()) - 1.0) <= atol)


def optimize_valid_softmax(target, config: PerturbationConfig = PerturbationConfig()) -> np.ndarray:
    """Valid confidence vector with maximal cosine similarity to target.

    Already-valid targets pass through unchanged. Otherwise projected
    gradient ascent runs on the simplex from the better of two cheap
    starting points (clipped renormalization and Euclidean projection),
    so the result is never worse than either. A target with no positive
    direction at all falls back to the uniform vector.
    """
    t = np.asarray(target, dtype=np.float64).copy()
    if t.ndim != 1 or t.size < 2:
        raise ValueError("target must be a vector of at least 2 entries")
    if not np.all(np.isfinite(t)):
        raise ValueError("target must be finite")
    if is_simplex_valid(t):
        return t
    if np.max(t) <= 0.0:
        log.warning("reversal target has no positive direction; answering uniform")
        return np.full(t.size, 1.0 / t.size)

    nt = np.linalg.norm(t)
    cands = [clip_renormalize(t), simplex_project(t)]
    y = max(cands, key=lambda c: _cosine(c, t))
    best = y
    best_cos = _cosine(y, t)
    for _ in range(config.opt_iters):
        ny = np.linalg.norm(y)
        if ny == 0:
            break
        g = t / (ny * nt) - np.dot(y, t) * y / (ny**3 * nt)
        y = simplex_project(y + config.opt_lr * g)
        c = _cosine(y, t)
        if c > best_cos:
            if c - best_cos < config.opt_tol:
                best, best_cos = y, c
                break
            best, best_cos = y, c
    return best


def reverse_target(y_hat, y_prime) -> np.ndarray:
    """Raw reversal target: twice the ensemble estimate minus the honest
    answer. Sums to 1 whenever both inputs do; entries may be negative."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y_prime = np.asarray(y_prime, dtype=np.float64)
    if y_hat.shape != y_prime.shape:
        raise ValueError("confidence vectors must have the same shape")
    return 2.0 * y_prime - y_hat


# ---------------------------------------------------------- shadow models


@dataclass
class ShadowEnsemble:
    """Disjointly trained stand-ins for a half-trained pirate model."""

    members: list[nn.Network]
    splits: list[np.ndarray]
    seed: int = 0

    def __len__(self):
        return len(self.members)


def stratified_disjoint_splits(y, n_classes: int, n_models: int, rng) -> list[np.ndarray]:
    """Shuffle each class and deal it round into n_models disjoint piles."""
    y = np.asarray(y)
    parts = [[] for _ in range(n_models)]
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        if idx.size < n_models:
            raise ValueError(
                f"class {c} has {idx.size} samples, cannot split across "
                f"{n_models} models"
            )
        idx = rng.permutation(idx)
        for k, chunk in enumerate(np.array_split(idx, n_models)):
            parts[k].append(chunk)
    return [np.sort(np.concatenate(p)) for p in parts]


def train_shadows(
    train: Dataset,
    n_models: int,
    spec_template: nn.NetworkSpec,
    epochs: int = 5,
    lr: float = 0.1,
    batch_size: int = 32,
    seed: int = 0,
) -> ShadowEnsemble:
    """Train the ensemble members on disjoint stratified subsets."""
    if n_models < 1:
        raise ValueError("need at least one ensemble member")
    rng = np.random.default_rng(derive_seed(seed, "shadow-split"))
    splits = stratified_disjoint_splits(train.y, train.n_classes, n_models, rng)
    members = []
    onehot = train.one_hot()
    for i, idx in enumerate(splits):
        spec = nn.NetworkSpec(
            spec_template.layer_sizes,
            activation=spec_template.activation,
            seed=derive_seed(seed, "shadow-init", i),
        )
        res = nn.sgd_train(
            spec,
            nn.Batch(train.X[idx], onehot[idx]),
            epochs=epochs,
            lr=lr,
            seed=derive_seed(seed, "shadow-sgd", i),
            batch_size=batch_size,
        )
        members.append(nn.Network(spec, res.params))
    return ShadowEnsemble(members=members, splits=splits, seed=seed)


def estimate_piracy_softmax(
    ensemble: ShadowEnsemble, x, draw_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Mean softmax over a uniformly drawn subset of ensemble members."""
    n = len(ensemble)
    if not (1 <= draw_size <= n):
        raise ValueError(f"draw_size must be in [1, {n}], got {draw_size}")
    picks = rng.choice(n, size=draw_size, replace=False)
    x = np.asarray(x, dtype=np.float64)[None, :]
    acc = np.zeros(ensemble.members[0].spec.output_dim)
    for i in picks:
        acc += ensemble.members[i].confidences(x)[0]
    return acc / draw_size


# ---------------------------------------------------- feature perturbation


@dataclass
class FeaturePerturbResult:
    probs: np.ndarray
    steps: int = 0
    hit_iter_limit: bool = False


def feature_perturb(
    x, network: nn.Network, feature_centers: dict[int, np.ndarray], config: PerturbationConfig
) -> FeaturePerturbResult:
    """Walk the feature vector toward the most distant class center.

    Steps are accepted while the classification head keeps the original
    predicted label; the answer is the head's softmax at the last
    accepted point. The top-1 label therefore never changes, but its
    margin over the runner-up shrinks toward zero.
    """
    u = network.features(np.asarray(x, dtype=np.float64)[None, :])[0]
    y_hat = int(np.argmax(network.head_confidences(u[None, :])[0]))

    labels = sorted(feature_centers)
    dists = {c: float(np.linalg.norm(u - feature_centers[c])) for c in labels}
    target = max(labels, key=lambda c: dists[c])
    dist = dists[target]
    if dist <= 0.0:
        return FeaturePerturbResult(probs=network.head_confidences(u[None, :])[0])

    step = config.fp_step if config.fp_step is not None else 0.01 * dist
    v = (np.asarray(feature_centers[target], dtype=np.float64) - u) / dist

    steps = 0
    hit_limit = True
    for _ in range(config.fp_max_iters):
        candidate = u + step * v
        probs = network.head_confidences(candidate[None, :])[0]
        if int(np.argmax(probs)) != y_hat:
            hit_limit = False
            break
        u = candidate
        steps += 1
    final = network.head_confidences(u[None, :])[0]
    if hit_limit:
        log.warning("feature perturbation hit the iteration cap (%d)", steps)
    return FeaturePerturbResult(probs=final, steps=steps, hit_iter_limit=hit_limit)


# -------------------------------------------------------------- reversal


def reversed_answer(
    x,
    network: nn.Network,
    ensemble: ShadowEnsemble,
    config: PerturbationConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Full reversal path: estimate, reverse, repair to a valid vector."""
    y_hat = network.confidences(np.asarray(x)[None, :])[0]
    y_prime = estimate_piracy_softmax(ensemble, x, config.draw_size, rng)
    return optimize_valid_softmax(reverse_target(y_hat, y_prime), config)


def perturb_output(
    x,
    condition,
    network: nn.Network,
    ensemble: ShadowEnsemble | None,
    feature_centers: dict[int, np.ndarray],
    config: PerturbationConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Answer a query according to its dispatch condition.

    Out-of-region queries get the feature-perturbed answer, over-budget
    queries get the reversed answer, everything else is honest. Registry
    bookkeeping (recording on the record-and-answer condition) is the
    caller's job; this function only computes the outgoing vector.
    """
    from .sensitivity import Condition

    if condition is Condition.A:
        return feature_perturb(x, network, feature_centers, config).probs
    if condition is Condition.B:
        if ensemble is None:
            raise ValueError("reversal requires a shadow ensemble")
        return reversed_answer(x, network, ensemble, config, rng)
    return network.confidences(np.asarray(x)[None, :])[0]


# -------------------------------------------------------------- baselines


def baseline_label_only(probs) -> np.ndarray:
    """Strip everything but the top-1 label."""
    probs = np.asarray(probs, dtype=np.float64)
    out = np.zeros_like(probs)
    out[int(np.argmax(probs))] = 1.0
    return out


def baseline_rounding(probs, decimals: int = 1) -> np.ndarray:
    """Round entries to a coarse precision; pay the residual on the
    largest entry so the vector still sums to one."""
    probs = np.asarray(probs, dtype=np.float64)
    out = np.round(probs, decimals)
    residual = 1.0 - out.sum()
    if abs(residual) > 1e-12:
        out[int(np.argmax(out))] += residual
    return out
