"""Deployment planning and a numeric check of the reversal guarantee.

The planner answers two questions before a defended deployment goes
live: how many sensitive queries can be answered honestly before an
extractor could plausibly learn the class region (a PAC-style count
eta_hat driven by a target error and failure probability), and how
large the per-record radius r must be so that the budget threshold t
trips within that count. The two are tied by an algebraic identity:
the honest-query estimate at the minimum radius equals eta_hat.

The reversal check verifies, on a concrete piracy model, that training
on a reversed answer steps the model away from where training on the
honest answer would take it: with the piracy softmax known exactly, the
two parameter gradients are exact negatives.

A further information-theoretic limit on what any bounded query budget
can reveal exists conceptually, but it bounds rather than prescribes an
algorithm, so nothing here implements it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn


def _check_eps_delta(epsilon: float, delta: float, delta_max_inclusive: bool):
    if not (0.0 < epsilon < 1.0):
        raise ValueError(f"epsilon must be in (0,1), got {epsilon}")
    hi_ok = delta <= 2.0 if delta_max_inclusive else delta < 2.0
    if not (0.0 < delta and hi_ok):
        bound = "(0,2]" if delta_max_inclusive else "(0,2)"
        raise ValueError(f"delta must be in {bound}, got {delta}")


def max_honest_queries(epsilon: float, delta: float) -> float:
    """eta_hat = ln(2/delta) / (2 eps^2), returned unfloored."""
    _check_eps_delta(epsilon, delta, delta_max_inclusive=True)
    return math.log(2.0 / delta) / (2.0 * epsilon * epsilon)


def honest_query_estimate(t: float, r: float, d_bar: float) -> float:
    """Honest records that fit under threshold t: t * d_bar^2 / r^2."""
    if t <= 0 or r <= 0 or d_bar <= 0:
        raise ValueError("t, r and d_bar must all be positive")
    return t * d_bar * d_bar / (r * r)


def min_radius(t: float, epsilon: float, delta: float, d_bar: float) -> float:
    """Smallest record radius that trips the threshold within eta_hat.

    r_min = sqrt(2t / ln(2/delta)) * epsilon * d_bar. At this radius
    honest_query_estimate(t, r_min, d_bar) == max_honest_queries(...).
    """
    _check_eps_delta(epsilon, delta, delta_max_inclusive=False)
    if t <= 0 or d_bar <= 0:
        raise ValueError("t and d_bar must be positive")
    return math.sqrt(2.0 * t / math.log(2.0 / delta)) * epsilon * d_bar


@dataclass(frozen=True)
class PlanParams:
    """Validated planner inputs for a deployment."""

    epsilon: float
    delta: float
    t: float
    r: float
    d_bar: float

    def __post_init__(self):
        _check_eps_delta(self.epsilon, self.delta, delta_max_inclusive=True)
        if self.t <= 0 or self.r <= 0 or self.d_bar <= 0:
            raise ValueError("t, r and d_bar must all be positive")


@dataclass(frozen=True)
class PlanResult:
    epsilon: float
    delta: float
    t: float
    d_bar: float
    eta_hat: float
    r_min: float
    eta_at_r_min: float


def plan(epsilon: float, delta: float, t: float, d_bar: float) -> PlanResult:
    """Full planner table for one (epsilon, delta, t, d_bar) choice."""
    r_min = min_radius(t, epsilon, delta, d_bar)
    return PlanResult(
        epsilon=epsilon,
        delta=delta,
        t=t,
        d_bar=d_bar,
        eta_hat=max_honest_queries(epsilon, delta),
        r_min=r_min,
        eta_at_r_min=honest_query_estimate(t, r_min, d_bar),
    )


@dataclass(frozen=True)
class GradientReverseReport:
    """Angle and magnitude relation between reversed and honest updates."""

    cosine: float
    norm_ratio: float
    degenerate: bool = False


def verify_gradient_reverse(
    h: nn.Network, x, y_hat, y_prime=None
) -> GradientReverseReport:
    """Compare piracy-model gradients under reversed vs honest answers.

    g1 is the gradient of the cross-entropy on the raw reversed target
    2*y_prime - y_hat (used unprojected), g2 the gradient on the honest
    y_hat. With y_prime = softmax(h(x)) (the default, exact simulation)
    g1 = -g2 identically, so cosine is -1 and the norm ratio 1. With an
    external y_prime estimate the relation holds only approximately.

    Both gradients vanishing (honest answer already equals the piracy
    softmax) is reported as degenerate, not as a failure.
    """
    x = np.asarray(x, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_prime is None:
        y_prime = h.confidences(x[None, :])[0]
    y_prime = np.asarray(y_prime, dtype=np.float64)
    raw = 2.0 * y_prime - y_hat

    _, g1 = nn.loss_and_grad(h.spec, h.params, x[None, :], raw[None, :], "ce")
    _, g2 = nn.loss_and_grad(h.spec, h.params, x[None, :], y_hat[None, :], "ce")
    n1 = float(np.linalg.norm(g1))
    n2 = float(np.linalg.norm(g2))
    if n1 < 1e-12 or n2 < 1e-12:
        return GradientReverseReport(cosine=0.0, norm_ratio=0.0, degenerate=True)
    return GradientReverseReport(
        cosine=float(np.dot(g1, g2) / (n1 * n2)),
        norm_ratio=n1 / n2,
    )
