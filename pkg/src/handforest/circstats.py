"""Von Mises statistics for angular regression targets."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import i0e, i1e

KAPPA_MAX = 1e4
_NEWTON_STEPS = 20


@dataclass(frozen=True)
class VonMisesStats:
    mu: float
    kappa: float
    count: int


def bessel_ratio(kappa):
    """``A(κ) = I₁(κ) / I₀(κ)``, evaluated with exponentially scaled Bessels."""
    kappa = np.asarray(kappa, dtype=float)
    return i1e(kappa) / i0e(kappa)


def kappa_from_resultant(rbar):
    """Solve ``A(κ) = R̄`` for the concentration, capped at :data:`KAPPA_MAX`.

    Starts from the Banerjee et al. closed-form approximation and refines with
    Newton steps on ``A(κ) - R̄`` (``A' = 1 - A/κ - A²``).
    """
    r = np.clip(np.asarray(rbar, dtype=float), 0.0, 1.0)
    scalar = r.ndim == 0
    r = np.atleast_1d(r)
    kappa = np.zeros_like(r)
    a_max = bessel_ratio(KAPPA_MAX)
    capped = r >= a_max
    live = (r > 1e-12) & ~capped
    kappa[capped] = KAPPA_MAX
    if np.any(live):
        rl = r[live]
        k = rl * (2.0 - rl * rl) / (1.0 - rl * rl)
        k = np.minimum(k, KAPPA_MAX)
        for _ in range(_NEWTON_STEPS):
            a = bessel_ratio(k)
            deriv = 1.0 - a / k - a * a
            step = (a - rl) / np.maximum(deriv, 1e-300)
            k_new = np.minimum(np.clip(k - step, 0.5 * k, 2.0 * k), KAPPA_MAX)
            done = np.abs(k_new - k) <= 1e-12 * np.maximum(k, 1.0)
            k = k_new
            if np.all(done):
                break
        kappa[live] = k
    return float(kappa[0]) if scalar else kappa


def vm_fit(angles) -> VonMisesStats:
    """Maximum likelihood Von Mises fit of a non-empty set of angles."""
    a = np.asarray(angles, dtype=float).ravel()
    if a.size == 0:
        raise ValueError("vm_fit needs at least one angle")
    C = np.cos(a).sum()
    S = np.sin(a).sum()
    mu = float(np.arctan2(S, C))
    if mu == -np.pi:
        mu = np.pi
    rbar = np.hypot(C, S) / a.size
    return VonMisesStats(mu, kappa_from_resultant(rbar), int(a.size))


def vm_entropy(stats_or_kappa) -> float:
    """Differential entropy ``ln(2π I₀(κ)) − κ I₁(κ)/I₀(κ)``."""
    k = getattr(stats_or_kappa, "kappa", stats_or_kappa)
    k = np.asarray(k, dtype=float)
    # ln I0(k) = ln i0e(k) + k
    h = np.log(2.0 * np.pi) + np.log(i0e(k)) + k - k * bessel_ratio(k)
    return float(h) if h.ndim == 0 else h


def circular_mean(angles, weights=None):
    a = np.asarray(angles, dtype=float)
    if weights is None:
        C, S = np.cos(a).sum(axis=-1), np.sin(a).sum(axis=-1)
    else:
        C, S = (weights * np.cos(a)).sum(axis=-1), (weights * np.sin(a)).sum(axis=-1)
    return np.arctan2(S, C)


ENTROPY_TABLE_SIZE = 4096
ENTROPY_TABLE_SPAN = 12.0


@lru_cache(maxsize=1)
def entropy_table():
    """Entropy of the fitted distribution as a function of the mean resultant
    length, sampled uniformly in ``s = -log(1 - R̄)`` on ``[0, 12]``.

    Returns ``(table, ds)``; used by the compiled split scorer.
    """
    ds = ENTROPY_TABLE_SPAN / (ENTROPY_TABLE_SIZE - 1)
    s = np.arange(ENTROPY_TABLE_SIZE) * ds
    rbar = -np.expm1(-s)
    table = vm_entropy(kappa_from_resultant(rbar))
    return np.ascontiguousarray(table, dtype=float), ds
