"""Stateful defended serving.

A DefendedServer owns one registry and answers queries one at a time:
predict the label, map the feature to 2D, classify the query's condition
(region, running budget, overlap), apply the registry effects, then
answer through the matching falsification path. The server is itself a
valid oracle for the attack harness (callable, exposes last_condition).

Per-query randomness (the shadow draw for reversals) comes from a
generator derived from (seed, queries served so far), so a server
restored from a snapshot taken mid-stream continues with exactly the
answers the uninterrupted run would have produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import certify, perturb, sensitivity
from .mapper import Mapper
from .nn import Network
from .perturb import PerturbationConfig, ShadowEnsemble
from .sensitivity import Condition, QueryRegistry
from .util import derive_rng

DEFAULT_THRESHOLD = 0.2


@dataclass(frozen=True)
class DefenseConfig:
    """Deployment knobs: budget threshold, record radius, planner inputs.

    radius None delegates to the planner: r = min_radius(t, epsilon,
    delta, d_bar) with d_bar the mean of the per-class region radii.
    threshold may be inf (never reverse) and 0 (reverse every in-region
    query from the first).
    """

    threshold: float = DEFAULT_THRESHOLD
    radius: float | None = None
    epsilon: float = 0.05
    delta: float = 0.05
    n_shadows: int = 10
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    seed: int = 0

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be nonnegative")
        if self.radius is not None and not (self.radius > 0):
            raise ValueError("radius must be positive when given")
        if self.n_shadows < 1:
            raise ValueError("need at least one shadow model")


def planner_radius(config: DefenseConfig, profiles) -> float:
    """The record radius the registry will use under this config.

    Degenerate thresholds (0 and inf) are diagnostic modes where the
    planner formula collapses; the registry then keeps the geometry a
    standard deployment would get, so only the threshold moves.
    """
    if config.radius is not None:
        return config.radius
    t = config.threshold
    if not (0.0 < t < np.inf):
        t = DEFAULT_THRESHOLD
    d_bar = float(np.mean([p.radius for p in profiles.values()]))
    return certify.min_radius(t, config.epsilon, config.delta, d_bar)


class DefendedServer:
    """One serving session: a registry plus the falsification paths."""

    def __init__(
        self,
        network: Network,
        mapper: Mapper,
        profiles: dict[int, sensitivity.ClassProfile],
        ensemble: ShadowEnsemble | None,
        config: DefenseConfig,
        registry: QueryRegistry | None = None,
        n_served: int = 0,
    ):
        self.network = network
        self.mapper = mapper
        self.ensemble = ensemble
        self.config = config
        self.registry = registry if registry is not None else QueryRegistry(
            profiles, planner_radius(config, profiles)
        )
        self.feature_centers = {
            label: profile.feature_center for label, profile in profiles.items()
        }
        self.n_served = n_served
        self.last_condition: str | None = None
        self.condition_counts = {cond: 0 for cond in Condition}

    @property
    def profiles(self):
        return self.registry.profiles

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        rng = derive_rng(self.config.seed, "serve", self.n_served)
        label = int(self.network.predict(x[None, :])[0])
        z = self.mapper.map_feature(self.network.features(x[None, :])[0])
        cond, _ = sensitivity.observe(z, label, self.registry, self.config.threshold)
        answer = perturb.perturb_output(
            x,
            cond,
            self.network,
            self.ensemble,
            self.feature_centers,
            self.config.perturbation,
            rng,
        )
        self.n_served += 1
        self.last_condition = cond.value
        self.condition_counts[cond] += 1
        return answer

    def serve(self, X) -> np.ndarray:
        """Answer a whole stream in order; rows are the answers."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.array([self(x) for x in X])

    def accuracy(self, X, y) -> float:
        """Top-1 accuracy of the defended answers on labeled queries."""
        answers = self.serve(X)
        return float(np.mean(np.argmax(answers, axis=1) == np.asarray(y)))

    def ratios(self) -> dict[str, float]:
        """Fractions of served queries by treatment; sums to 1."""
        total = max(self.n_served, 1)
        return {
            "feature_perturbed": self.condition_counts[Condition.A] / total,
            "reversed": self.condition_counts[Condition.B] / total,
            "honest": (
                self.condition_counts[Condition.C] + self.condition_counts[Condition.D]
            ) / total,
            "recorded": self.registry.counters["recorded"] / total,
        }
