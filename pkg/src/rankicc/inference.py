"""Standard errors and confidence intervals for the rank ICC.

Plug-in standard errors come from per-cluster influence values ``t_i``; the
standard error is ``sqrt(var(t) / n)``.  Each influence value combines the
cluster's numerator and denominator summands with correction terms for the
estimated CDF (``I``/``II`` and, three-level, ``V``/``VI``), the estimated
mean ridit (``III``/``IV``, ``VII``/``VIII``) and a per-cluster factor ``C``.

The correction terms are double sums over all observation pairs of the form
``sum_o coef[o] * psi(y, x_o)`` with the midpoint kernel
``psi(y, x) = [1(y <= x) + 1(y < x)] / 2``.  They are evaluated with
suffix sums over tie groups of the sorted values (see ``_ranks``), giving
O(N log N) total cost.

Bootstrap replicate ``r`` draws from its own PCG64 stream seeded with
``SeedSequence(seed, spawn_key=(r,))``, so results do not depend on how
replicates are scheduled across worker processes.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from .data import ClusteredDataset, ThreeLevelDataset, WeightAssignment
from .errors import BoundaryEstimate, EstimationError, InsufficientClusters, InvalidSpec, ShapeMismatch
from .estimator import IccEstimate, ThreeLevelEstimate, rank_icc, rank_icc_three_level
from .weighting import WeightScheme, make_weights

CI_METHODS = ("wald", "fisher-z", "boot-percentile", "boot-se")
BOOTSTRAP_SCHEMES = ("cluster", "two-stage", "one-stage")
MAX_REDRAWS = 10
TWO_STAGE_WARNING = (
    "within-cluster resampling duplicates observations inside clusters and "
    "biases replicate estimates upward; percentile intervals can badly undercover"
)


def z_critical(level: float) -> float:
    """Two-sided standard normal critical value for confidence ``level``."""
    if not 0.0 < level < 1.0:
        raise InvalidSpec(f"confidence level must lie in (0, 1), got {level!r}", "level")
    return float(ndtri(0.5 + level / 2.0))


def env_workers() -> int:
    """Worker-process cap from ``RANKICC_THREADS`` (default 1)."""
    raw = os.environ.get("RANKICC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InvalidSpec(f"RANKICC_THREADS must be an integer, got {raw!r}", "RANKICC_THREADS")


# ---------------------------------------------------------------------------
# influence-function standard errors


@dataclass(frozen=True, eq=False)
class InfluenceTable:
    """Per-cluster influence values and their ingredients.

    For two-level data ``t`` holds the influence values and ``components``
    has keys ``g, h, I, II, III, IV, C``.  For three-level data ``t`` and
    ``t3`` hold the two sets of influence values and ``components`` adds
    ``g2, g3, V, VI, VII, VIII``.
    """

    t: np.ndarray
    components: dict = field(repr=False)
    sigma2: float
    t3: np.ndarray | None = None
    sigma2_3: float | None = None

    @property
    def n(self) -> int:
        return int(self.t.size)


def _sample_var(t: np.ndarray) -> float:
    return float(np.var(t, ddof=1))


def _check_pair(data, weights: WeightAssignment, estimate) -> None:
    weights.check(data)
    if data.n < 2:
        raise InsufficientClusters("need at least 2 clusters for a standard error")
    if estimate.n != data.n or estimate.ridits.fstar.size != data.N:
        raise ShapeMismatch("estimate was computed on different data")


def _mean_ridit_factor(ties, w, fstar, index, n):
    """``C_i``: the cluster's weighted ridit sum plus a 1/n kernel term."""
    own = np.bincount(index, weights=w * fstar, minlength=n)
    kern = np.bincount(index, weights=w * ties.above_mid(w), minlength=n)
    return own + kern / n


def asymptotic_se(
    data: ClusteredDataset, weights: WeightAssignment, estimate: IccEstimate
) -> tuple[float, InfluenceTable]:
    """Plug-in standard error of the two-level rank ICC.

    Returns
    -------
    se : float
    table : InfluenceTable
    """
    _check_pair(data, weights, estimate)
    n = data.n
    ci = data.cluster_index
    w = weights.w
    rt = estimate.ridits
    ties, fstar = rt.ties, rt.fstar
    a = rt.centered
    g, h = estimate.g, estimate.h
    A = math.fsum(g) / n
    B = math.fsum(h) / n
    k = data.sizes.astype(float)
    s = np.bincount(ci, weights=a, minlength=n)
    c = 2.0 * weights.cluster_totals(data) / (k * (k - 1.0))

    u = c[ci] * (s[ci] - a)
    comp_i = np.bincount(ci, weights=w * ties.above_mid(u), minlength=n) / B
    we = np.bincount(ci, weights=w * ties.above_mid(2.0 * w * a), minlength=n)
    comp_ii = -A / B**2 * we
    cf = _mean_ridit_factor(ties, w, fstar, ci, n)
    comp_iii = -cf / B * math.fsum(c * (k - 1.0) * s)
    comp_iv = A * cf / B**2 * math.fsum(2.0 * w * a)

    t = g / B - h * A / B**2 + comp_i + comp_ii + comp_iii + comp_iv
    sigma2 = _sample_var(t)
    comps = {"g": g, "h": h, "I": comp_i, "II": comp_ii, "III": comp_iii, "IV": comp_iv, "C": cf}
    return math.sqrt(sigma2 / n), InfluenceTable(t, comps, sigma2)


def asymptotic_se_three_level(
    data: ThreeLevelDataset, weights: WeightAssignment, estimate: ThreeLevelEstimate
) -> tuple[float | None, float, InfluenceTable]:
    """Plug-in standard errors of both three-level rank ICCs.

    The first value is ``None`` when the within-level-2 ICC is undefined.
    """
    _check_pair(data, weights, estimate)
    n = data.n
    ui, si, uos = data.unit_index, data.sub_index, data.unit_of_sub
    w = weights.w
    rt = estimate.ridits
    ties, fstar = rt.ties, rt.fstar
    a = rt.centered
    g2, g3, h = estimate.g2, estimate.g3, estimate.h
    A2 = math.fsum(g2) / n
    A3 = math.fsum(g3) / n
    B = math.fsum(h) / n
    m = data.sub_sizes.astype(float)
    s = np.bincount(si, weights=a, minlength=data.n_sub)
    pairs2 = m * (m - 1.0)
    c2 = np.divide(2.0 * weights.sub_totals(data), pairs2, out=np.zeros_like(m), where=pairs2 > 0)
    r = weights.unit_totals(data) / data.pair_counts
    tot = np.bincount(uos, weights=s, minlength=n)
    big_m = data.unit_totals.astype(float)

    cf = _mean_ridit_factor(ties, w, fstar, ui, n)
    we = np.bincount(ui, weights=w * ties.above_mid(2.0 * w * a), minlength=n)
    sum_2wa = math.fsum(2.0 * w * a)

    u2 = c2[si] * (s[si] - a)
    comp_i = np.bincount(ui, weights=w * ties.above_mid(u2), minlength=n) / B
    comp_ii = -A2 / B**2 * we
    comp_iii = -cf / B * math.fsum(c2 * (m - 1.0) * s)
    comp_iv = A2 * cf / B**2 * sum_2wa

    u3 = r[ui] * (tot[ui] - s[si])
    comp_v = np.bincount(ui, weights=w * ties.above_mid(u3), minlength=n) / B
    comp_vi = -A3 / B**2 * we
    comp_vii = -cf / B * math.fsum(r[uos] * s * (big_m[uos] - m))
    comp_viii = A3 * cf / B**2 * sum_2wa

    t2 = g2 / B - h * A2 / B**2 + comp_i + comp_ii + comp_iii + comp_iv
    t3 = g3 / B - h * A3 / B**2 + comp_v + comp_vi + comp_vii + comp_viii
    sig2, sig3 = _sample_var(t2), _sample_var(t3)
    comps = {
        "g2": g2, "g3": g3, "h": h, "C": cf,
        "I": comp_i, "II": comp_ii, "III": comp_iii, "IV": comp_iv,
        "V": comp_v, "VI": comp_vi, "VII": comp_vii, "VIII": comp_viii,
    }
    se2 = math.sqrt(sig2 / n) if estimate.gamma2_hat is not None else None
    return se2, math.sqrt(sig3 / n), InfluenceTable(t2, comps, sig2, t3, sig3)


# ---------------------------------------------------------------------------
# confidence intervals


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float = 0.95
    method: str = "wald"

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_dict(self) -> dict:
        return {"method": self.method, "level": self.level, "lower": self.lower, "upper": self.upper}


def ci_wald(gamma_hat: float, se: float, level: float = 0.95, method: str = "wald") -> ConfidenceInterval:
    """``gamma_hat +/- z * se`` clipped to [-1, 1]."""
    if not se >= 0:
        raise InvalidSpec(f"standard error must be non-negative, got {se!r}", "se")
    half = z_critical(level) * se
    return ConfidenceInterval(
        max(-1.0, gamma_hat - half), min(1.0, gamma_hat + half), level, method
    )


_INSIDE = float(np.nextafter(1.0, 0.0))


def ci_fisher_z(gamma_hat: float, se: float, level: float = 0.95) -> ConfidenceInterval:
    """Interval built on the Fisher z scale and mapped back with ``tanh``.

    The standard error on the z scale is ``se / (1 - gamma_hat^2)``.

    Raises
    ------
    BoundaryEstimate
        If ``|gamma_hat| >= 1 - 1e-12``.
    """
    if not abs(gamma_hat) < 1.0 - 1e-12:
        raise BoundaryEstimate(f"Fisher z interval undefined at gamma_hat={gamma_hat!r}")
    if not se >= 0:
        raise InvalidSpec(f"standard error must be non-negative, got {se!r}", "se")
    z = math.atanh(gamma_hat)
    half = z_critical(level) * se / (1.0 - gamma_hat * gamma_hat)
    lo = min(max(math.tanh(z - half), -_INSIDE), _INSIDE)
    hi = min(max(math.tanh(z + half), -_INSIDE), _INSIDE)
    return ConfidenceInterval(lo, hi, level, "fisher-z")


# ---------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Successful bootstrap replicates.

    ``replicates`` holds the two-level estimates (or the within-level-2 ICC
    for three-level data, NaN where undefined); ``replicates3`` holds the
    three-level ICC across level-2 units.  Failed replicates are excluded and
    their reasons listed in ``failure_reasons``.
    """

    replicates: np.ndarray
    scheme: str
    B: int
    seed: int
    failures: int = 0
    failure_reasons: tuple = ()
    replicates3: np.ndarray | None = None
    warning: str | None = None

    @staticmethod
    def _finite(x: np.ndarray) -> np.ndarray:
        return x[np.isfinite(x)]

    def _target(self, which: str) -> np.ndarray:
        if which == "gamma3":
            if self.replicates3 is None:
                raise InvalidSpec("no three-level replicates", "which")
            return self._finite(self.replicates3)
        return self._finite(self.replicates)

    def se(self, which: str = "gamma") -> float:
        x = self._target(which)
        return float(np.std(x, ddof=1)) if x.size >= 2 else float("nan")

    def percentile_ci(self, level: float = 0.95, which: str = "gamma") -> ConfidenceInterval:
        """Linearly interpolated (type 7) quantiles of the replicates."""
        z_critical(level)
        x = np.sort(self._target(which))
        if x.size < 2:
            raise EstimationError("fewer than 2 successful bootstrap replicates")
        lo, hi = np.quantile(x, [0.5 - level / 2.0, 0.5 + level / 2.0], method="linear")
        return ConfidenceInterval(float(lo), float(hi), level, "boot-percentile")

    def se_ci(self, gamma_hat: float, level: float = 0.95, which: str = "gamma") -> ConfidenceInterval:
        """``gamma_hat +/- z * bootstrap SE`` clipped to [-1, 1]."""
        se = self.se(which)
        if not math.isfinite(se):
            raise EstimationError("fewer than 2 successful bootstrap replicates")
        return ci_wald(gamma_hat, se, level, method="boot-se")

    @property
    def n_success(self) -> int:
        return int(self.replicates.size)


def replicate_rng(seed: int, r: int) -> np.random.Generator:
    """Independent stream for bootstrap replicate ``r``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(r,))))


def _resample_two_level(data: ClusteredDataset, rng, within: bool) -> ClusteredDataset:
    pick = rng.integers(0, data.n, size=data.n)
    sizes = data.sizes[pick]
    starts = np.repeat(data.offsets[pick], sizes)
    if within:
        pos = np.floor(rng.random(starts.size) * np.repeat(sizes, sizes)).astype(np.int64)
    else:
        pos = np.arange(starts.size) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    return ClusteredDataset(data.values[starts + pos], sizes, tuple(f"r{i}" for i in range(data.n)))


def _resample_three_level(data: ThreeLevelDataset, rng) -> ThreeLevelDataset:
    pick = rng.integers(0, data.n, size=data.n)
    sub_first = np.zeros(data.n, dtype=np.int64)
    np.cumsum(data.unit_sizes[:-1], out=sub_first[1:])
    obs_first = np.zeros(data.n, dtype=np.int64)
    np.cumsum(data.unit_totals[:-1], out=obs_first[1:])
    subs = np.concatenate([np.arange(sub_first[i], sub_first[i] + data.unit_sizes[i]) for i in pick])
    vals = np.concatenate(
        [data.values[obs_first[i]:obs_first[i] + data.unit_totals[i]] for i in pick]
    )
    return ThreeLevelDataset(vals, data.sub_sizes[subs], data.unit_sizes[pick])


@dataclass(frozen=True)
class _Job:
    data: object
    scheme: WeightScheme
    kind: str
    seed: int


def _one_replicate(job: _Job, r: int):
    """Returns ``(gamma, gamma3, attempts_failed, reason)``; gamma is None on failure."""
    rng = replicate_rng(job.seed, r)
    reason = None
    for _ in range(MAX_REDRAWS + 1):
        try:
            if job.kind == "one-stage":
                d = _resample_three_level(job.data, rng)
                e = rank_icc_three_level(d, make_weights(d, job.scheme))
                g2 = e.gamma2_hat if e.gamma2_hat is not None else float("nan")
                return g2, e.gamma3_hat, None
            d = _resample_two_level(job.data, rng, within=job.kind == "two-stage")
            return rank_icc(d, make_weights(d, job.scheme)).gamma_hat, None, None
        except EstimationError as exc:
            reason = exc.code
    return None, None, reason


def _run_chunk(job: _Job, rs: range) -> list:
    return [_one_replicate(job, r) for r in rs]


def _run_bootstrap(data, scheme, B: int, seed: int, kind: str, workers: int | None) -> BootstrapResult:
    if B < 2:
        raise InvalidSpec(f"B must be at least 2, got {B}", "B")
    if isinstance(scheme, str):
        scheme = WeightScheme(scheme)
    if scheme.iterative and scheme.initial_gamma is None:
        start = make_weights(data, scheme).gamma_final
        scheme = replace(scheme, initial_gamma=start)
    job = _Job(data, scheme, kind, int(seed))
    workers = env_workers() if workers is None else max(1, int(workers))
    if workers == 1 or B < 2 * workers:
        out = _run_chunk(job, range(B))
    else:
        bounds = np.linspace(0, B, workers + 1).astype(int)
        chunks = [range(bounds[i], bounds[i + 1]) for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [job] * workers, chunks))
        out = [x for part in parts for x in part]
    ok = [(g, g3) for g, g3, _ in out if g is not None]
    reasons = tuple(f"replicate {r}: {why}" for r, (g, _, why) in enumerate(out) if g is None)
    reps = np.array([g for g, _ in ok], dtype=float)
    reps3 = np.array([g3 for _, g3 in ok], dtype=float) if kind == "one-stage" else None
    return BootstrapResult(
        reps, kind, B, int(seed), len(reasons), reasons, reps3,
        TWO_STAGE_WARNING if kind == "two-stage" else None,
    )


def cluster_bootstrap(
    data: ClusteredDataset, scheme: WeightScheme | str, B: int, seed: int, workers: int | None = None
) -> BootstrapResult:
    """Resample whole clusters with replacement and re-estimate.

    Weights are recomputed on every resample under ``scheme``.  A resample on
    which the ICC is undefined is redrawn (up to ``MAX_REDRAWS`` times) from
    the same replicate stream before being counted as a failure.
    """
    return _run_bootstrap(data, scheme, B, seed, "cluster", workers)


def two_stage_bootstrap(
    data: ClusteredDataset, scheme: WeightScheme | str, B: int, seed: int, workers: int | None = None
) -> BootstrapResult:
    """Cluster bootstrap followed by resampling observations within each drawn cluster.

    Kept for comparison: duplicated observations inflate the replicate
    estimates, so the result carries a standing warning.
    """
    return _run_bootstrap(data, scheme, B, seed, "two-stage", workers)


def one_stage_bootstrap_3level(
    data: ThreeLevelDataset, scheme: WeightScheme | str, B: int, seed: int, workers: int | None = None
) -> BootstrapResult:
    """Resample level-3 units only; replicates of both ICCs are paired."""
    return _run_bootstrap(data, scheme, B, seed, "one-stage", workers)
