"""Query sensitivity measurement and the per-class query registry.

Every query is routed by its predicted label to that class's 2D profile
(center, mean radius) measured on the training data. A single query's
sensitivity falls off with its distance from the class center through a
complementary-error-function curve; the class accumulates a running
score from the sensitive queries it has answered. The registry keeps the
recorded 2D points so that near-duplicate probes (within the resolution
radius) are not double counted.

Dispatch per query, given the class's running score s and threshold t:

    out of region (distance >= mean radius)      -> A  answer perturbed in
                                                     feature space
    in region, s >= t                            -> B  confidence vector
                                                     reversed
    in region, s < t, no overlapping record      -> C  honest answer, the
                                                     point is recorded
    in region, s < t, overlaps a record          -> D  honest answer, not
                                                     recorded

The threshold comparison is inclusive: with t = 0 every in-region query
is reversed from the first, and nothing is ever recorded; with t = inf
nothing is ever reversed. Once s crosses the threshold, recording for
that class stops for good, so B covers every later in-region query no
matter whether it overlaps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import Dataset
from .mapper import Mapper
from .nn import Network

REGISTRY_SCHEMA = 1


class DegenerateClassError(ValueError):
    """A class's features collapsed to one point; no usable geometry."""


class Condition(str, Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"


def erfc(z: float) -> float:
    """Complementary error function, 2/sqrt(pi) * integral_z^inf e^(-t^2)."""
    return math.erfc(z)


@dataclass(frozen=True)
class ClassProfile:
    """Per-class geometry measured on training data.

    center: mean of the class's 2D points. radius: mean distance of those
    points from the center (the sensitive-region radius). feature_center:
    mean of the class's high-dimensional feature vectors, the target used
    by answer perturbation in feature space.
    """

    label: int
    center: np.ndarray
    radius: float
    feature_center: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "center", np.asarray(self.center, dtype=np.float64)
        )
        object.__setattr__(
            self, "feature_center", np.asarray(self.feature_center, dtype=np.float64)
        )
        if self.center.shape != (2,):
            raise ValueError("profile center must be a 2D point")
        if not (self.radius > 0):
            raise DegenerateClassError(
                f"class {self.label}: mean radius must be positive, got {self.radius}"
            )


def build_profiles(
    mapper: Mapper, network: Network, train: Dataset
) -> dict[int, ClassProfile]:
    """Measure every class's 2D and feature-space geometry.

    Uses the true training labels for the per-class split. A class whose
    mapped points all coincide has no measurable radius and is rejected.
    """
    feats = network.features(train.X)
    pts = mapper.map_features(feats)
    profiles = {}
    for label in range(train.n_classes):
        idx = train.class_indices(label)
        if idx.size == 0:
            raise ValueError(f"class {label} has no training samples")
        class_pts = pts[idx]
        center = class_pts.mean(axis=0)
        dists = np.linalg.norm(class_pts - center, axis=1)
        radius = float(dists.mean())
        if radius <= 0.0:
            raise DegenerateClassError(
                f"class {label}: all mapped points identical, mean radius is 0"
            )
        profiles[label] = ClassProfile(
            label=label,
            center=center,
            radius=radius,
            feature_center=feats[idx].mean(axis=0),
        )
    return profiles


@dataclass(frozen=True)
class SQSValue:
    """Single-query sensitivity: the score plus where it came from."""

    value: float
    label: int
    distance: float


def sqs(z, profile: ClassProfile) -> SQSValue:
    """Single-query score: erfc((d - radius)/radius) / 2.

    Equal to 1/2 exactly at the region boundary, approaching 1 at the
    center and 0 far outside; never reaching either end.
    """
    z = np.asarray(z, dtype=np.float64)
    d = float(np.linalg.norm(z - profile.center))
    value = 0.5 * erfc((d - profile.radius) / profile.radius)
    return SQSValue(value=value, label=profile.label, distance=d)


class QueryRegistry:
    """Recorded sensitive queries and running scores, per class.

    One global registry serves all traffic; the optional client_id only
    tags snapshots so that an operator running one registry per API key
    can tell the files apart.
    """

    def __init__(
        self,
        profiles: dict[int, ClassProfile],
        radius: float,
        client_id: str | None = None,
    ):
        if not (radius > 0):
            raise ValueError("resolution radius must be positive")
        self.profiles = profiles
        self.radius = radius
        self.client_id = client_id
        self.points: dict[int, list[np.ndarray]] = {c: [] for c in profiles}
        self.scores: dict[int, float] = {c: 0.0 for c in profiles}
        self.counters: dict[str, int] = {
            "seen": 0,
            "recorded": 0,
            "reversed": 0,
            "honest": 0,
        }

    def score(self, label: int) -> float:
        return self.scores[label]

    def record_count(self, label: int) -> int:
        return len(self.points[label])


def overlap_check(z, registry: QueryRegistry, label: int) -> bool:
    """True when some recorded point of the class lies strictly within
    the resolution radius of z. A record at exactly that distance does
    not overlap."""
    recs = registry.points[label]
    if not recs:
        return False
    arr = np.asarray(recs)
    d2 = np.sum((arr - np.asarray(z, dtype=np.float64)) ** 2, axis=1)
    return bool(np.any(d2 < registry.radius**2))


def cqs_update(registry: QueryRegistry, label: int, value: SQSValue, z) -> float:
    """Record z for the class and add its weighted squared score.

    Contribution: (radius / mean_radius)^2 * sqs^2. Only called for
    queries that passed the region and overlap checks and are being
    recorded; returns the new running score.
    """
    profile = registry.profiles[label]
    w = (registry.radius / profile.radius) ** 2
    registry.points[label].append(np.array(z, dtype=np.float64))
    registry.scores[label] += w * value.value**2
    registry.counters["recorded"] += 1
    return registry.scores[label]


def recompute_cqs(registry: QueryRegistry, label: int) -> float:
    """Running score recomputed from scratch over the recorded points."""
    profile = registry.profiles[label]
    w = (registry.radius / profile.radius) ** 2
    return float(
        sum(w * sqs(p, profile).value ** 2 for p in registry.points[label])
    )


def classify_condition(
    z, label: int, registry: QueryRegistry, threshold: float
) -> Condition:
    """Dispatch a mapped query to one of the conditions A-D."""
    profile = registry.profiles[label]
    d = float(np.linalg.norm(np.asarray(z, dtype=np.float64) - profile.center))
    if d >= profile.radius:
        return Condition.A
    if registry.scores[label] >= threshold:
        return Condition.B
    if overlap_check(z, registry, label):
        return Condition.D
    return Condition.C


def observe(
    z, label: int, registry: QueryRegistry, threshold: float
) -> tuple[Condition, SQSValue | None]:
    """Classify one query and apply its registry effects.

    Returns the condition and, for recorded queries, the single-query
    score that went into the running sum. Counter bookkeeping: reversed
    counts condition B, honest counts C and D; out-of-region queries are
    neither (they are answered through feature perturbation).
    """
    cond = classify_condition(z, label, registry, threshold)
    registry.counters["seen"] += 1
    value = None
    if cond is Condition.B:
        registry.counters["reversed"] += 1
    elif cond in (Condition.C, Condition.D):
        registry.counters["honest"] += 1
        if cond is Condition.C:
            value = sqs(z, registry.profiles[label])
            cqs_update(registry, label, value, z)
    return cond, value


def measure_stream(
    queries,
    network: Network,
    mapper: Mapper,
    registry: QueryRegistry,
    threshold: float,
):
    """Run a query stream through the measurement path only.

    Each query is routed by the network's predicted label, mapped to 2D
    and classified; recording and running scores evolve exactly as they
    would during defended serving. Returns the per-query (condition,
    recorded score or None) pairs; final scores live in the registry.
    """
    X = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    labels = network.predict(X)
    pts = mapper.map_features(network.features(X))
    out = []
    for z, label in zip(pts, labels):
        out.append(observe(z, int(label), registry, threshold))
    return out


# ------------------------------------------------------------- snapshots


def registry_to_json(registry: QueryRegistry) -> str:
    payload = {
        "schema": REGISTRY_SCHEMA,
        "client_id": registry.client_id,
        "radius": registry.radius,
        "counters": dict(registry.counters),
        "classes": {
            str(label): {
                "center": list(profile.center),
                "mean_radius": profile.radius,
                "feature_center": list(profile.feature_center),
                "points": [list(p) for p in registry.points[label]],
                "score": registry.scores[label],
            }
            for label, profile in sorted(registry.profiles.items())
        },
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def registry_from_json(text: str) -> QueryRegistry:
    payload = json.loads(text)
    if payload.get("schema") != REGISTRY_SCHEMA:
        raise ValueError(
            f"unsupported registry schema {payload.get('schema')!r}"
        )
    profiles = {}
    for key, cls in payload["classes"].items():
        label = int(key)
        profiles[label] = ClassProfile(
            label=label,
            center=np.array(cls["center"]),
            radius=cls["mean_radius"],
            feature_center=np.array(cls["feature_center"]),
        )
    registry = QueryRegistry(
        profiles, payload["radius"], client_id=payload["client_id"]
    )
    for key, cls in payload["classes"].items():
        label = int(key)
        registry.points[label] = [np.array(p) for p in cls["points"]]
        registry.scores[label] = float(cls["score"])
    registry.counters.update(payload["counters"])
    return registry
