"""Confidence bounds for nonconvex scenario optimization with discarding.

A sampled program built from S scenarios, of which R are discarded and
P = S - R remain, certifies each stage-wise chance constraint through the
bound

    C(S, P) * sum_{s=0}^{P-1} C(P, s) * [1 - eps(s)]^(P-s)  <=  beta,

where s is the size of the support subsample observed after solving and
eps(s) is a designable risk-allocation function with eps(P) = 1.  This
module evaluates the bound, inverts it for the sample size, and houses
the uniform allocation used throughout the package: each of the P terms
receives an equal share beta / (P * C(S, P)) of the confidence budget,
which gives the closed form

    eps(s) = 1 - [beta / (P * C(S, P) * C(P, s))]^(1 / (P - s)).

Binomial coefficients of the sizes involved (e.g. C(53050, 50)) overflow
any fixed-width arithmetic, so everything is evaluated in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

__all__ = [
    "RiskProfile",
    "eps_allocation",
    "confidence_of",
    "solve_sample_size",
]

#: No sample size above this is searched for; guards runaway targets.
DEFAULT_SAMPLE_CEILING = 10**7


class RiskArgumentError(ValueError):
    """Raised when bound arguments are outside their valid ranges."""


class RiskNumericError(ArithmeticError):
    """Raised when an allocation cannot be represented in (0, 1]."""


class SampleSizeCapacityError(RuntimeError):
    """Raised when no sample size below the ceiling meets the risk target."""


def _log_comb(n: int, k: int) -> float:
    """log C(n, k) via log-gamma; exact enough for 10+ significant digits."""
    if k < 0 or k > n:
        return float("-inf")
    if k == 0 or k == n:
        return 0.0
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _check_common(S: int, P: int, beta: float) -> None:
    if S < 1 or P < 0 or P > S:
        raise RiskArgumentError(f"need 0 <= P <= S with S >= 1, got S={S}, P={P}")
    if not (0.0 < beta < 1.0):
        raise RiskArgumentError(f"beta must lie in (0, 1), got {beta}")


def eps_allocation(S: int, P: int, s: int, beta: float) -> float:
    """Risk level assigned to support size ``s`` under the uniform budget split.

    Returns eps(s) in (0, 1]; eps(P) = 1 exactly.  The allocation satisfies
    the confidence bound by construction: every term of the sum equals
    beta / P, so ``confidence_of`` returns exactly beta.
    """
    _check_common(S, P, beta)
    if s < 0 or s > P:
        raise RiskArgumentError(f"need 0 <= s <= P, got s={s}, P={P}")
    if s == P:
        return 1.0
    # log of [beta / (P * C(S,P) * C(P,s))]^(1/(P-s)); always negative since
    # beta < 1 and the denominator is >= 1.
    log_base = math.log(beta) - math.log(P) - _log_comb(S, P) - _log_comb(P, s)
    exponent = log_base / (P - s)
    # -expm1 keeps eps strictly positive even when exponent underflows.
    # Round two ulps toward 1 so the realized allocation never overshoots
    # the confidence budget; the nudge is invisible at any usable scale.
    eps = -math.expm1(exponent)
    eps = min(1.0, math.nextafter(math.nextafter(eps, 1.0), 1.0))
    if not (0.0 < eps <= 1.0):
        raise RiskNumericError(
            f"allocation left (0, 1]: eps({s})={eps} for S={S}, P={P}, beta={beta}"
        )
    return eps


def confidence_of(S: int, P: int, eps_fn: Callable[[int], float]) -> float:
    """Evaluate the discarding confidence bound for a given allocation.

    Computes C(S,P) * sum_{s=0}^{P-1} C(P,s) [1 - eps_fn(s)]^(P-s) with
    log-sum-exp accumulation.  With R = 0 (P = S) the leading coefficient
    is 1 and the expression reduces to the plain nonconvex scenario bound.
    """
    if S < 1 or P < 0 or P > S:
        raise RiskArgumentError(f"need 0 <= P <= S with S >= 1, got S={S}, P={P}")
    log_lead = _log_comb(S, P)
    log_terms = []
    for s in range(P):
        eps = eps_fn(s)
        if not (0.0 <= eps <= 1.0):
            raise RiskArgumentError(f"eps_fn({s})={eps} outside [0, 1]")
        if eps >= 1.0:
            continue  # term vanishes
        log_terms.append(_log_comb(P, s) + (P - s) * math.log1p(-eps))
    if not log_terms:
        return 0.0
    m = max(log_terms)
    total = math.fsum(math.exp(t - m) for t in log_terms)
    return math.exp(log_lead + m + math.log(total))


def solve_sample_size(
    eps_target: float,
    beta: float,
    s_bar: int,
    R: int,
    ceiling: int = DEFAULT_SAMPLE_CEILING,
) -> int:
    """Smallest S with eps_allocation(S, S-R, s_bar, beta) <= eps_target.

    The allocation at fixed support bound is monotone decreasing in S, so
    the minimum is found by exponential doubling followed by bisection.
    Deterministic; raises :class:`SampleSizeCapacityError` if no S below
    ``ceiling`` reaches the target.
    """
    if not (0.0 < eps_target < 1.0):
        raise RiskArgumentError(f"eps_target must lie in (0, 1), got {eps_target}")
    if s_bar < 0 or R < 0:
        raise RiskArgumentError(f"need s_bar >= 0 and R >= 0, got {s_bar}, {R}")

    def ok(S: int) -> bool:
        P = S - R
        if P < max(s_bar, 1):
            return False
        if P == s_bar:
            return False  # eps(P) = 1 can never meet a target < 1
        return eps_allocation(S, P, s_bar, beta) <= eps_target

    lo = max(R + s_bar, R + 1, 1)
    hi = lo + 1
    while not ok(hi):
        if hi >= ceiling:
            raise SampleSizeCapacityError(
                f"no S <= {ceiling} meets eps_target={eps_target} "
                f"(beta={beta}, s_bar={s_bar}, R={R})"
            )
        hi = min(2 * hi, ceiling)
    # invariant: not ok(lo), ok(hi)
    if ok(lo):
        return lo
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class RiskProfile:
    """Per-stage risk parameters and the sample size they imply.

    Attributes:
        eps: acceptable per-stage violation probability, in (0, 1).
        beta: confidence parameter, in (0, 1).
        s_bar: upper bound on the support-subsample size.
        discard: number R of outlier scenarios removed after sampling.
        keep: number l of nearest scenarios retained for constraint building.
        samples: sample size S; computed from the bound when omitted.
    """

    eps: float = 1.0 - 0.9889
    beta: float = 1e-6
    s_bar: int = 20
    discard: int = 50
    keep: int = 150
    samples: int = 0

    def __post_init__(self):
        if not (0.0 < self.eps < 1.0):
            raise RiskArgumentError(f"eps must lie in (0, 1), got {self.eps}")
        if not (0.0 < self.beta < 1.0):
            raise RiskArgumentError(f"beta must lie in (0, 1), got {self.beta}")
        if self.s_bar < 1:
            raise RiskArgumentError(f"s_bar must be >= 1, got {self.s_bar}")
        if self.discard < 0 or self.keep < 1:
            raise RiskArgumentError("discard must be >= 0 and keep >= 1")
        if self.samples == 0:
            object.__setattr__(
                self, "samples", solve_sample_size(self.eps, self.beta, self.s_bar, self.discard)
            )
        if self.samples - self.discard < self.s_bar:
            raise RiskArgumentError(
                f"S - R = {self.samples - self.discard} below support bound {self.s_bar}"
            )

    @property
    def selection_size(self) -> int:
        """Scenarios fetched per stage before discarding (l + R)."""
        return self.keep + self.discard

    def allocation_table(self) -> list[tuple[int, float]]:
        """(s, eps(s)) rows for s = 0 .. s_bar at this profile's sample size."""
        P = self.samples - self.discard
        return [(s, eps_allocation(self.samples, P, s, self.beta)) for s in range(self.s_bar + 1)]
