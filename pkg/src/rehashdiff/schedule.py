"""Noise schedules and reverse-timeline discretization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .vocab import ContractError

SCHEDULE_KINDS = ("linear", "cosine")
TIMELINE_KINDS = ("linear", "arccos", "square", "cosine")


class DomainError(ArithmeticError):
    """A ratio was requested where its denominator vanishes."""


def _check_time(t):
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"time must lie in [0, 1], got {t!r}")


@dataclass(frozen=True)
class NoiseSchedule:
    """Survival function alpha(t) with alpha(0)=1, alpha(1)=0.

    ``linear`` is the training schedule. ``cosine`` (alpha = cos(pi t / 2)) exists
    to exercise the general time-weighted loss with a non-constant derivative.
    """

    kind: str = "linear"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ContractError(f"unknown schedule kind {self.kind!r}")

    def alpha(self, t: float) -> float:
        _check_time(t)
        if self.kind == "linear":
            return 1.0 - t
        return math.cos(0.5 * math.pi * t)

    def mask_rate(self, t: float) -> float:
        """``1 - alpha(t)`` in closed form (exact for linear: returns ``t``)."""
        _check_time(t)
        if self.kind == "linear":
            return t
        return 1.0 - math.cos(0.5 * math.pi * t)

    def alpha_prime(self, t: float) -> float:
        _check_time(t)
        if self.kind == "linear":
            return -1.0
        return -0.5 * math.pi * math.sin(0.5 * math.pi * t)

    def loss_weight(self, t: float) -> float:
        """Time weight -alpha'(t) / (1 - alpha(t)); equals 1/t for linear."""
        rate = self.mask_rate(t)
        if rate == 0.0:
            raise DomainError("loss weight undefined where alpha(t) = 1")
        return -self.alpha_prime(t) / rate


LINEAR = NoiseSchedule("linear")


def alpha(sched: NoiseSchedule, t: float) -> float:
    return sched.alpha(t)


def fwd_ratio(sched: NoiseSchedule, s: float, t: float) -> float:
    """Forward survival ratio alpha_t / alpha_s for s < t."""
    if not s < t:
        raise ContractError(f"need s < t, got s={s}, t={t}")
    a_t = sched.alpha(t)
    a_s = sched.alpha(s)
    if a_s == 0.0:
        raise DomainError("alpha_s = 0: forward ratio undefined")
    return a_t / a_s


def rev_ratio(sched: NoiseSchedule, s: float, t: float) -> float:
    """Reverse mask-survival ratio (1 - alpha_s) / (1 - alpha_t) for s < t."""
    if not s < t:
        raise ContractError(f"need s < t, got s={s}, t={t}")
    num = sched.mask_rate(s)
    denom = sched.mask_rate(t)
    if denom == 0.0:
        raise DomainError("alpha_t = 1: reverse ratio undefined")
    return num / denom


@dataclass(frozen=True)
class Timeline:
    K: int
    kind: str
    points: tuple

    def steps(self):
        """Yield ``(k, t, s)`` with 1-based step index ``k``."""
        for k in range(self.K):
            yield k + 1, self.points[k], self.points[k + 1]


def timeline_points(K: int, kind: str = "linear") -> Timeline:
    """Reverse timeline T^1 = 1 > T^2 > ... > T^{K+1} = 0.

    With u_k = (k-1)/K: linear 1 - u, cosine cos(pi u / 2), square 1 - u^2,
    arccos (2/pi) arccos(u). Endpoints are pinned to exactly 1 and 0.
    """
    if int(K) != K or K < 1:
        raise ContractError(f"K must be an integer >= 1, got {K!r}")
    if kind not in TIMELINE_KINDS:
        raise ContractError(f"unknown timeline kind {kind!r}")
    u = np.arange(K + 1, dtype=np.float64) / K
    if kind == "linear":
        pts = 1.0 - u
    elif kind == "cosine":
        pts = np.cos(0.5 * np.pi * u)
    elif kind == "square":
        pts = 1.0 - u * u
    else:
        pts = (2.0 / np.pi) * np.arccos(u)
    pts[0], pts[-1] = 1.0, 0.0
    return Timeline(int(K), kind, tuple(float(p) for p in pts))
