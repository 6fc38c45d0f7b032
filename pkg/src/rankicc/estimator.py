"""Point estimators of the rank ICC.

The two-level estimate is a ratio of weighted sums of centred ridits:

    numerator   = sum_i w_i. * mean over pairs j<j' in cluster i of a_ij a_ij'
    denominator = sum_ij w_ij a_ij^2,      a_ij = F*(x_ij) - mean F*

Pair sums use ``sum_{j<j'} a_j a_j' = ((sum a)^2 - sum a^2) / 2`` so each
cluster costs O(k_i).  The per-cluster summands are kept on the result
because the influence-function standard errors reuse them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ClusteredDataset, RiditTable, ThreeLevelDataset, WeightAssignment, ridit_cdf
from .errors import DegenerateData, DegenerateNumerator, InsufficientPairs

STATUS_OK = "OK"
STATUS_DEGENERATE_NUMERATOR = DegenerateNumerator.code


def _sum_sq_by(index: np.ndarray, a: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    s = np.bincount(index, weights=a, minlength=size)
    q = np.bincount(index, weights=a * a, minlength=size)
    return s, q


@dataclass(frozen=True, eq=False)
class IccEstimate:
    """Two-level rank ICC.

    ``numerator`` and ``denominator`` are the weighted sums whose ratio is
    ``gamma_hat``; ``g`` and ``h`` hold their per-cluster summands.
    """

    gamma_hat: float
    numerator: float
    denominator: float
    scheme: str
    g: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)
    ridits: RiditTable = field(repr=False)
    iterations: int = 0
    gamma_final: float | None = None
    converged: bool = True

    @property
    def n(self) -> int:
        return int(self.g.size)


@dataclass(frozen=True, eq=False)
class ThreeLevelEstimate:
    """Three-level rank ICCs sharing one denominator.

    ``gamma2_hat`` is ``None`` (with ``status2 == "DEGENERATE_NUMERATOR"``) when
    no level-2 unit holds two or more observations.
    """

    gamma2_hat: float | None
    gamma3_hat: float
    numerator2: float
    numerator3: float
    denominator: float
    scheme: str
    g2: np.ndarray = field(repr=False)
    g3: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)
    ridits: RiditTable = field(repr=False)
    status2: str = STATUS_OK

    @property
    def n(self) -> int:
        return int(self.h.size)


def _denominator(values: np.ndarray, index: np.ndarray, w: np.ndarray, a: np.ndarray, size: int):
    # centered ridits of tied data can carry rounding residue, so test the values
    h = np.bincount(index, weights=w * a * a, minlength=size)
    den = math.fsum(h)
    if values.min() == values.max() or not den > 0:
        raise DegenerateData("all observations are tied; the rank ICC is undefined")
    return h, den


def rank_icc(data: ClusteredDataset, weights: WeightAssignment) -> IccEstimate:
    """Two-level rank ICC of ``data`` under ``weights``.

    Raises
    ------
    DegenerateData
        If every observation takes the same value.
    """
    ridits = ridit_cdf(data, weights)
    a = ridits.centered
    ci = data.cluster_index
    k = data.sizes.astype(float)
    s, q = _sum_sq_by(ci, a, data.n)
    wdot = weights.cluster_totals(data)
    g = wdot * (s * s - q) / (k * (k - 1.0))
    h, den = _denominator(data.values, ci, weights.w, a, data.n)
    num = math.fsum(g)
    return IccEstimate(
        num / den, num, den, weights.scheme, g, h, ridits,
        weights.iterations, weights.gamma_final, weights.converged,
    )


def rank_icc_three_level(data: ThreeLevelDataset, weights: WeightAssignment) -> ThreeLevelEstimate:
    """Three-level rank ICCs: pairs within a level-2 unit, and pairs within a
    level-3 unit drawn from different level-2 units.

    Level-2 units with a single observation add nothing to the first
    numerator but stay in the CDF and the denominator.
    """
    ridits = ridit_cdf(data, weights)
    a = ridits.centered
    m = data.sub_sizes.astype(float)
    s, q = _sum_sq_by(data.sub_index, a, data.n_sub)
    pairs2 = m * (m - 1.0)
    c2 = np.divide(2.0 * weights.sub_totals(data), pairs2, out=np.zeros_like(m), where=pairs2 > 0)
    g2 = np.bincount(data.unit_of_sub, weights=c2 * (s * s - q) / 2.0, minlength=data.n)
    t = np.bincount(data.unit_of_sub, weights=s, minlength=data.n)
    ss = np.bincount(data.unit_of_sub, weights=s * s, minlength=data.n)
    g3 = weights.unit_totals(data) / data.pair_counts * (t * t - ss) / 2.0
    h, den = _denominator(data.values, data.unit_index, weights.w, a, data.n)
    num2 = math.fsum(g2)
    num3 = math.fsum(g3)
    if np.any(pairs2 > 0):
        gamma2, status2 = num2 / den, STATUS_OK
    else:
        gamma2, status2 = None, STATUS_DEGENERATE_NUMERATOR
    return ThreeLevelEstimate(
        gamma2, num3 / den, num2, num3, den, weights.scheme, g2, g3, h, ridits, status2
    )


def monte_carlo_rank_icc(
    data: ClusteredDataset, weights: WeightAssignment, n_pairs: int, seed: int
) -> float:
    """Pair-sampling approximation of the rank ICC.

    Draws clusters with probability ``w_i.``, then an ordered pair of distinct
    members uniformly (so orientation is random), and returns the Pearson
    correlation of the two ridit columns.
    """
    if n_pairs < 2:
        raise InsufficientPairs(f"need at least 2 sampled pairs, got {n_pairs}")
    ridits = ridit_cdf(data, weights)
    rng = np.random.default_rng(seed)
    p = weights.cluster_totals(data)
    cl = rng.choice(data.n, size=n_pairs, p=p / p.sum())
    k = data.sizes[cl]
    j1 = np.floor(rng.random(n_pairs) * k).astype(np.int64)
    j2 = np.floor(rng.random(n_pairs) * (k - 1)).astype(np.int64)
    j2 += j2 >= j1
    base = data.offsets[cl]
    first = ridits.fstar[base + j1]
    second = ridits.fstar[base + j2]
    if np.ptp(first) == 0 or np.ptp(second) == 0:
        raise DegenerateData("sampled ridits have zero variance")
    return float(np.corrcoef(first, second)[0, 1])


def fisher_icc_pairwise(data: ClusteredDataset, weights: WeightAssignment) -> float:
    """The same pair-averaged ratio computed on raw values instead of ridits.

    Scale dependent; provided as a baseline against the rank ICC.
    """
    weights.check(data)
    w = weights.w
    x = data.values
    a = x - math.fsum(w * x)
    s, q = _sum_sq_by(data.cluster_index, a, data.n)
    k = data.sizes.astype(float)
    g = weights.cluster_totals(data) * (s * s - q) / (k * (k - 1.0))
    _, den = _denominator(data.values, data.cluster_index, w, a, data.n)
    return math.fsum(g) / den
