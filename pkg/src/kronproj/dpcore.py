"""Differential-privacy primitives.

A signed geometric grid provides the finite ordered output domain shared
by multiplicative rounding and the private median; accountants for simple
composition, advanced composition, and amplification by subsampling are
pure arithmetic on (epsilon, delta) pairs.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import GridDomainError, ParameterError

_REL_FUZZ = 1e-12


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if self.epsilon < 0 or not 0.0 <= self.delta <= 1.0:
            raise ParameterError(f"invalid privacy budget ({self.epsilon}, {self.delta})")


class SignedGeometricGrid:
    """Ordered domain 0 plus +-(1+alpha)^j covering [1/U, U(1+alpha)].

    Points are strictly increasing and symmetric about zero.  The exponent
    j runs over the integers with 1/U <= (1+alpha)^j <= U*(1+alpha); near
    ties are snapped so exact powers of (1+alpha) are kept on the grid.
    """

    def __init__(self, u_bound, alpha):
        if u_bound <= 1.0:
            raise ParameterError("u_bound must exceed 1")
        # canonical range is (0, 1); alpha = 1 (powers of two) is also valid
        if not 0.0 < alpha <= 1.0:
            raise ParameterError("alpha must lie in (0, 1]")
        t = math.log(u_bound) / math.log1p(alpha)
        if abs(t - round(t)) < 1e-9:
            t = round(t)
        j_lo = -math.floor(t)
        j_hi = math.floor(t) + 1
        self._init_from_exponents(u_bound, alpha, j_lo, j_hi)

    @classmethod
    def from_exponent_range(cls, alpha, j_lo, j_hi):
        """Grid with magnitudes (1+alpha)^j for j in [j_lo, j_hi]."""
        obj = cls.__new__(cls)
        u = (1.0 + alpha) ** max(abs(j_lo), j_hi - 1)
        obj._init_from_exponents(max(u, 1.0 + alpha), alpha, j_lo, j_hi)
        return obj

    def _init_from_exponents(self, u_bound, alpha, j_lo, j_hi):
        if j_hi < j_lo:
            raise ParameterError("empty exponent range")
        self.u_bound = float(u_bound)
        self.alpha = float(alpha)
        self.exponents = np.arange(j_lo, j_hi + 1)
        self.magnitudes = (1.0 + alpha) ** self.exponents.astype(float)
        self.points = np.concatenate([-self.magnitudes[::-1], [0.0], self.magnitudes])

    def __len__(self):
        return self.points.size

    def index_of(self, v):
        """Index of an exact grid point; raises if v is off the grid."""
        i = int(np.searchsorted(self.points, v))
        if i >= self.points.size or self.points[i] != v:
            raise GridDomainError(f"{v!r} is not a grid point")
        return i

    def contains(self, v):
        i = int(np.searchsorted(self.points, v))
        return i < self.points.size and self.points[i] == v

    def to_dict(self):
        return {
            "u_bound": self.u_bound,
            "alpha": self.alpha,
            "points": int(self.points.size),
        }


def round_to_grid(v, grid):
    """Round up in magnitude to the nearest grid power of (1+alpha).

    Zero maps to zero; magnitudes below the smallest grid magnitude are
    clamped up to it (the oblivious estimators may emit tiny nonzero
    values).  Magnitudes beyond u_bound*(1+alpha) are rejected; the sliver
    between the largest grid magnitude and that limit saturates.  The
    result r satisfies |v| <= |r| <= (1+alpha)|v| up to 1e-12 relative.
    """
    v = float(v)
    if v == 0.0:
        return 0.0
    mags = grid.magnitudes
    av = abs(v)
    if av > grid.u_bound * (1.0 + grid.alpha) * (1.0 + _REL_FUZZ):
        raise GridDomainError(f"|{v!r}| exceeds the grid range")
    sign = 1.0 if v > 0 else -1.0
    idx = int(np.searchsorted(mags, av * (1.0 - _REL_FUZZ), side="left"))
    if idx >= mags.size:
        idx = mags.size - 1
    return sign * mags[idx]


def median_rank_error(values, x):
    """How far x falls short of being a median of the multiset."""
    values = np.sort(np.asarray(values, dtype=float))
    half = values.size / 2.0
    ge = values.size - np.searchsorted(values, x, side="left")
    le = np.searchsorted(values, x, side="right")
    return max(0.0, half - ge, half - le)


def private_median(values, grid, epsilon, beta=0.05, seed=0, rng=None):
    """Exponential-mechanism median over a signed geometric grid.

    Samples a grid point with probability proportional to
    exp(-epsilon * u(x) / 2) where u(x) is the rank utility
    max(#{v < x}, #{v > x}) - ceil(|values|/2) clamped at zero; its
    sensitivity to swapping one value is 1, so the output is
    (epsilon, 0)-differentially private.  With probability 1 - beta the
    output misses a true median by at most O(log(|grid|/beta)/epsilon)
    ranks.  Cumulative weights are accumulated in extended precision and
    inverted directly (no Gumbel trick) for reproducibility under seeding.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ParameterError("private_median requires nonempty values")
    if not 0.0 < epsilon <= 1.0:
        raise ParameterError("epsilon must lie in (0, 1]")
    if not 0.0 < beta < 1.0:
        raise ParameterError("beta must lie in (0, 1)")
    pts = grid.points
    sv = np.sort(values)
    # every value must be an exact grid point
    vidx = np.searchsorted(pts, sv)
    if np.any(vidx >= pts.size) or np.any(pts[np.clip(vidx, 0, pts.size - 1)] != sv):
        raise GridDomainError("private_median input contains off-grid values")
    below = np.searchsorted(sv, pts, side="left")
    above = sv.size - np.searchsorted(sv, pts, side="right")
    utility = np.maximum(np.maximum(below, above) - math.ceil(sv.size / 2), 0)
    logw = -0.5 * epsilon * (utility - utility.min())
    weights = np.exp(logw.astype(np.longdouble))
    cum = np.cumsum(weights)
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    r = np.longdouble(rng.random()) * cum[-1]
    return float(pts[int(np.searchsorted(cum, r, side="right"))])


def simple_composition(budgets):
    """Sequential composition of pure-DP budgets: epsilons add."""
    total = 0.0
    for bgt in budgets:
        if bgt.delta != 0.0:
            raise ParameterError("simple_composition requires delta = 0 budgets")
        total += bgt.epsilon
    return PrivacyBudget(epsilon=total, delta=0.0)


def advanced_composition(epsilon, delta, k, delta0):
    """k-fold adaptive composition of (epsilon, delta)-DP mechanisms.

    Returns (sqrt(2 k ln(1/delta0)) * epsilon + 2 k epsilon^2,
    delta0 + k delta).
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ParameterError("epsilon must lie in [0, 1]")
    if not 0.0 < delta0 <= 1.0:
        raise ParameterError("delta0 must lie in (0, 1]")
    if not 0.0 <= delta <= 1.0 or k < 0:
        raise ParameterError("invalid (delta, k)")
    eps_total = math.sqrt(2.0 * k * math.log(1.0 / delta0)) * epsilon + 2.0 * k * epsilon**2
    return PrivacyBudget(epsilon=eps_total, delta=delta0 + k * delta)


def amplification(epsilon, k, n):
    """Privacy amplification from subsampling k of n rows with repetition."""
    if not 0.0 <= epsilon <= 1.0:
        raise ParameterError("epsilon must lie in [0, 1]")
    if k > n / 2:
        raise ParameterError("amplification requires k <= n/2")
    return (6.0 * k / n) * epsilon
