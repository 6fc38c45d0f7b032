"""Observation weights for the rank ICC.

Two-level schemes: equal weight per cluster, equal weight per observation,
and two iterative schemes whose weights depend on a working ICC (effective
sample size and a linear combination of the first two).  Three-level data
support equal weighting of level-1, level-2 or level-3 units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClusteredDataset, ThreeLevelDataset, WeightAssignment
from .errors import GammaOutOfRange, InvalidSpec, NonpositiveEffectiveSize

TWO_LEVEL_SCHEMES = ("equal-clusters", "equal-obs", "ess", "combination")
THREE_LEVEL_SCHEMES = ("level1", "level2", "level3")
ITERATIVE_SCHEMES = ("ess", "combination")

DEFAULT_TOL = 1e-5
DEFAULT_MAX_ITER = 50


@dataclass(frozen=True)
class WeightScheme:
    """A weighting scheme tag plus the fixed-point settings of iterative schemes.

    ``initial_gamma`` overrides the default starting value (the estimate under
    equal observation weights).
    """

    tag: str = "equal-clusters"
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    initial_gamma: float | None = None

    def __post_init__(self):
        if self.tag not in TWO_LEVEL_SCHEMES + THREE_LEVEL_SCHEMES:
            raise InvalidSpec(f"unknown weighting scheme {self.tag!r}", "weights")
        if not self.tol > 0:
            raise InvalidSpec("tolerance must be positive", "tol")
        if self.max_iter < 1:
            raise InvalidSpec("max_iter must be at least 1", "max_iter")

    @property
    def iterative(self) -> bool:
        return self.tag in ITERATIVE_SCHEMES

    @property
    def levels(self) -> int:
        return 3 if self.tag in THREE_LEVEL_SCHEMES else 2


def _per_cluster(data: ClusteredDataset, cluster_weight: np.ndarray, scheme: str, **kw):
    w = (cluster_weight / data.sizes)[data.cluster_index]
    return WeightAssignment(w / w.sum(), scheme, **kw)


def equal_cluster_weights(data: ClusteredDataset) -> WeightAssignment:
    """``w_ij = 1 / (n k_i)``."""
    return WeightAssignment(1.0 / (data.n * data.sizes[data.cluster_index]), "equal-clusters")


def equal_obs_weights(data: ClusteredDataset) -> WeightAssignment:
    """``w_ij = 1 / N``."""
    return WeightAssignment(np.full(data.N, 1.0 / data.N), "equal-obs")


def ess_weights(data: ClusteredDataset, gamma: float, **kw) -> WeightAssignment:
    """Weights proportional to each cluster's effective sample size at ``gamma``.

    ``n_i^(e) = k_i / (1 + (k_i - 1) gamma)``, ``w_i. = n_i^(e) / sum_l n_l^(e)``
    and ``w_ij = w_i. / k_i``.

    Raises
    ------
    NonpositiveEffectiveSize
        If ``1 + (k_i - 1) gamma <= 0`` for some cluster.
    """
    if not -1.0 <= gamma <= 1.0:
        raise GammaOutOfRange(f"gamma must lie in [-1, 1], got {gamma!r}")
    k = data.sizes.astype(float)
    denom = 1.0 + (k - 1.0) * gamma
    if np.any(denom <= 0):
        raise NonpositiveEffectiveSize(
            f"1 + (k_i - 1) * gamma <= 0 for gamma={gamma!r} and k_i={int(k[np.argmin(denom)])}"
        )
    if data.is_balanced:
        # weights do not depend on gamma; 1/N exactly keeps schemes bitwise equal
        return WeightAssignment(np.full(data.N, 1.0 / data.N), "ess", **kw)
    ess = k / denom
    return _per_cluster(data, ess / ess.sum(), "ess", **kw)


def combination_weights(data: ClusteredDataset, gamma: float, **kw) -> WeightAssignment:
    """``w_ij = (1 - gamma)/N + gamma/(n k_i)`` for ``gamma`` in [0, 1]."""
    if not 0.0 <= gamma <= 1.0:
        raise GammaOutOfRange(f"gamma must lie in [0, 1], got {gamma!r}")
    if data.is_balanced:
        return WeightAssignment(np.full(data.N, 1.0 / data.N), "combination", **kw)
    k = data.sizes[data.cluster_index].astype(float)
    w = (1.0 - gamma) / data.N + gamma / (data.n * k)
    return WeightAssignment(w / w.sum(), "combination", **kw)


def iterate_weights(
    data: ClusteredDataset,
    scheme: str,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    initial_gamma: float | None = None,
) -> tuple[WeightAssignment, float, int]:
    """Fixed point of an iterative weighting scheme.

    Starting from ``initial_gamma`` (default: the estimate under equal
    observation weights), alternate between computing weights at the working
    ICC and re-estimating the ICC, until successive estimates differ by less
    than ``tol`` or ``max_iter`` updates have been made.  The working ICC is
    clamped to [0, 1] before weights are computed.

    Returns
    -------
    weights : WeightAssignment
        Weights of the last update; ``converged`` records whether ``tol`` was met.
    gamma : float
        Final ICC estimate.
    iterations : int
    """
    from .estimator import rank_icc

    if scheme not in ITERATIVE_SCHEMES:
        raise InvalidSpec(f"{scheme!r} is not an iterative scheme", "weights")
    make = ess_weights if scheme == "ess" else combination_weights
    if initial_gamma is None:
        gamma = rank_icc(data, equal_obs_weights(data)).gamma_hat
    else:
        gamma = float(initial_gamma)
    converged = False
    iterations = 0
    while iterations < max_iter:
        w = make(data, min(max(gamma, 0.0), 1.0))
        new = rank_icc(data, w).gamma_hat
        iterations += 1
        delta = abs(new - gamma)
        gamma = new
        if delta < tol:
            converged = True
            break
    final = WeightAssignment(
        w.w, scheme, iterations=iterations, gamma_final=gamma, converged=converged
    )
    return final, gamma, iterations


def three_level_weights(data: ThreeLevelDataset, scheme: str) -> WeightAssignment:
    """Equal weights for level-1 (``level1``), level-2 (``level2``) or level-3 (``level3``) units."""
    m = data.sub_sizes[data.sub_index].astype(float)
    if scheme == "level1":
        w = np.full(data.N, 1.0 / data.N)
    elif scheme == "level2":
        w = 1.0 / (m * data.n_sub)
    elif scheme == "level3":
        w = 1.0 / (data.n * data.unit_sizes[data.unit_index] * m)
    else:
        raise InvalidSpec(f"unknown three-level scheme {scheme!r}", "weights")
    return WeightAssignment(w, scheme)


def make_weights(
    data: ClusteredDataset | ThreeLevelDataset, scheme: WeightScheme | str
) -> WeightAssignment:
    """Weights for ``data`` under ``scheme``, running the fixed point when needed."""
    if isinstance(scheme, str):
        scheme = WeightScheme(scheme)
    if isinstance(data, ThreeLevelDataset):
        if scheme.levels != 3:
            raise InvalidSpec(f"scheme {scheme.tag!r} does not apply to three-level data", "weights")
        return three_level_weights(data, scheme.tag)
    if scheme.levels != 2:
        raise InvalidSpec(f"scheme {scheme.tag!r} does not apply to two-level data", "weights")
    if scheme.tag == "equal-clusters":
        return equal_cluster_weights(data)
    if scheme.tag == "equal-obs":
        return equal_obs_weights(data)
    w, _, _ = iterate_weights(data, scheme.tag, scheme.tol, scheme.max_iter, scheme.initial_gamma)
    return w
