"""Two-sample Kolmogorov-Smirnov test over predicted-label samples.

Used to compare the predicted-label distributions of piracy models
trained with and without the defense: a large statistic (small p) means
the defended answers pushed the clone measurably off the undefended
behavior. Labels are categorical; the test is applied to class indices
under the fixed 0..N-1 ordering, which makes the statistic depend on
that ordering. That caveat is inherent to using KS on categories and is
accepted here deliberately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KSResult:
    statistic: float
    p_value: float
    n1: int
    n2: int


def kolmogorov_sf(lam: float) -> float:
    """Survival function of the Kolmogorov distribution.

    Q(lam) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lam^2). The series is
    useless near zero (terms stop shrinking), but there Q is 1 to double
    precision anyway: for lam <= 0.18 the closed form is > 1 - 1e-100.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if lam < 0.2:
        return 1.0
    total = 0.0
    sign = 1.0
    for j in range(1, 101):
        term = sign * math.exp(-2.0 * j * j * lam * lam)
        total += term
        if abs(term) < 1e-16 * max(abs(total), 1.0):
            break
        sign = -sign
    return min(max(2.0 * total, 0.0), 1.0)


def ks_forget_quality(labels_a, labels_b) -> KSResult:
    """KS statistic and asymptotic p-value for two label samples.

    D is the maximum absolute difference between the two empirical CDFs
    of class indices; the p-value uses the asymptotic two-sample scaling
    lam = D * sqrt(n1 n2 / (n1 + n2)). Identical samples give D = 0 and
    p = 1 exactly.
    """
    a = np.sort(np.asarray(labels_a, dtype=np.float64))
    b = np.sort(np.asarray(labels_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("both label samples must be nonempty")

    values = np.union1d(a, b)
    cdf_a = np.searchsorted(a, values, side="right") / a.size
    cdf_b = np.searchsorted(b, values, side="right") / b.size
    d = float(np.max(np.abs(cdf_a - cdf_b)))

    en = a.size * b.size / (a.size + b.size)
    p = kolmogorov_sf(d * math.sqrt(en))
    return KSResult(statistic=d, p_value=p, n1=int(a.size), n2=int(b.size))
