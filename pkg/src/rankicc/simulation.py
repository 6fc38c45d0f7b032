"""Simulation scenarios, ground truths and a bias/coverage study runner.

Two-level data follow the additive model ``X_ij = U_i + R_ij`` with
``U_i ~ N(1, 1)`` and ``R_ij ~ N(0, (1 - rho)/rho)``; the supported
variants transform the outcome, skew the cluster means, generate size-2
clusters with negative within-pair correlation, discretize into ordered
categories, or add a middle level.

Random numbers: every (cell, simulation) pair owns a PCG64 stream seeded
with ``SeedSequence(seed, spawn_key=(cell, sim))``, and normal variates are
produced by inverting the normal CDF at 53-bit uniforms.  Reports are
therefore bit-identical for a given seed whatever the worker count.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .csvio import dump_json
from .data import ClusteredDataset, ThreeLevelDataset
from .errors import EstimationError, GammaOutOfRange, InvalidSpec
from .estimator import rank_icc, rank_icc_three_level
from .inference import (
    asymptotic_se,
    asymptotic_se_three_level,
    ci_fisher_z,
    ci_wald,
    cluster_bootstrap,
    one_stage_bootstrap_3level,
    two_stage_bootstrap,
)
from .weighting import WeightScheme, make_weights

SCENARIOS = ("normal", "exp-outcome", "lognormal-means", "negative-pairs", "three-level", "ordinal-k")
ORDINAL_CUTS = {
    3: (1 / 3, 2 / 3),
    5: (0.2, 0.4, 0.6, 0.8),
    10: tuple(i / 10 for i in range(1, 10)),
}
STUDY_METHODS = (
    "wald", "fisher-z",
    "cluster-percentile", "cluster-se",
    "two-stage-percentile", "two-stage-se",
    "one-stage-percentile", "one-stage-se",
)
DEFAULT_TRUTH_M = 1_000_000
TRUTH_SEED = 20_240_101


def normals(rng: np.random.Generator, size) -> np.ndarray:
    """Standard normal variates by CDF inversion of 53-bit uniforms."""
    u = (rng.integers(0, 2**53, size=size, dtype=np.int64) + 0.5) * 2.0**-53
    return ndtri(u)


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True)
class SizeSpec:
    """Cluster sizes: ``fixed`` (all ``a``), ``uniform`` (integers ``a..b``) or
    ``half`` (first half ``a``, the rest ``b``).

    The string forms ``"30"``, ``"2-50"`` and ``"2/30"`` are accepted by
    :meth:`parse`.
    """

    kind: str = "fixed"
    a: int = 30
    b: int | None = None

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "half"):
            raise InvalidSpec(f"unknown size kind {self.kind!r}", "sizes.kind")
        if self.a < 1 or (self.kind != "fixed" and (self.b is None or self.b < self.a)):
            raise InvalidSpec(f"invalid sizes {self.label}", "sizes")

    @classmethod
    def parse(cls, value) -> "SizeSpec":
        if isinstance(value, SizeSpec):
            return value
        if isinstance(value, bool):
            raise InvalidSpec(f"cannot parse cluster sizes from {value!r}", "sizes")
        if isinstance(value, int):
            return cls("fixed", value)
        if isinstance(value, dict):
            try:
                return cls(value.get("kind", "fixed"), int(value["a"]), value.get("b"))
            except (KeyError, TypeError, ValueError) as exc:
                raise InvalidSpec(f"cannot parse cluster sizes from {value!r}", "sizes") from exc
        text = str(value).strip()
        try:
            if "-" in text:
                lo, hi = text.split("-")
                return cls("uniform", int(lo), int(hi))
            if "/" in text:
                lo, hi = text.split("/")
                return cls("half", int(lo), int(hi))
            return cls("fixed", int(text))
        except ValueError as exc:
            raise InvalidSpec(f"cannot parse cluster sizes from {value!r}", "sizes") from exc

    @property
    def label(self) -> str:
        if self.kind == "fixed":
            return str(self.a)
        return f"{self.a}{'-' if self.kind == 'uniform' else '/'}{self.b}"

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "fixed":
            return np.full(n, self.a, dtype=np.int64)
        if self.kind == "uniform":
            return rng.integers(self.a, self.b + 1, size=n, dtype=np.int64)
        out = np.full(n, self.b, dtype=np.int64)
        out[: n // 2] = self.a
        return out


@dataclass(frozen=True)
class ScenarioSpec:
    """One data-generating configuration.

    Parameters
    ----------
    scenario : str
        One of ``SCENARIOS``.
    rho : float
        Within-cluster correlation of the latent normal values.  For
        ``three-level`` use ``rho2`` and ``rho3`` instead.
    n : int
        Number of clusters (level-3 units).
    sizes : SizeSpec
        Cluster sizes; for ``three-level`` the number of level-2 units per
        level-3 unit.
    sub_sizes : SizeSpec
        Observations per level-2 unit (``three-level`` only).
    levels : int
        Category count for ``ordinal-k`` (3, 5 or 10).
    size_variance : (float, float) or None
        Within-cluster variance factors for the small and large clusters of a
        ``half`` size spec.
    seed : int
    """

    scenario: str = "normal"
    rho: float = 0.5
    n: int = 200
    sizes: SizeSpec = field(default_factory=SizeSpec)
    rho2: float | None = None
    rho3: float | None = None
    sub_sizes: SizeSpec = field(default_factory=lambda: SizeSpec("fixed", 2))
    levels: int = 3
    size_variance: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidSpec(f"unknown scenario {self.scenario!r}", "scenario")
        object.__setattr__(self, "sizes", SizeSpec.parse(self.sizes))
        object.__setattr__(self, "sub_sizes", SizeSpec.parse(self.sub_sizes))
        if self.n < 2:
            raise InvalidSpec("n must be at least 2", "n")
        if self.scenario == "three-level":
            if self.rho2 is None or self.rho3 is None:
                raise InvalidSpec("three-level scenario needs rho2 and rho3", "rho2")
            if not 0.0 <= self.rho3 <= self.rho2 <= 1.0:
                raise InvalidSpec("need 0 <= rho3 <= rho2 <= 1", "rho2")
            if self.sizes.a < 2:
                raise InvalidSpec("level-3 units need at least 2 level-2 units", "sizes")
        elif self.scenario == "negative-pairs":
            if not -1.0 <= self.rho <= 1.0:
                raise InvalidSpec("rho must lie in [-1, 1]", "rho")
        else:
            if not 0.0 <= self.rho <= 1.0:
                raise InvalidSpec("rho must lie in [0, 1]", "rho")
            if self.sizes.a < 2:
                raise InvalidSpec("clusters need at least 2 observations", "sizes")
        if self.scenario == "ordinal-k" and self.levels not in ORDINAL_CUTS:
            raise InvalidSpec(f"levels must be one of {sorted(ORDINAL_CUTS)}", "levels")
        if self.size_variance is not None:
            if self.sizes.kind != "half" or len(self.size_variance) != 2:
                raise InvalidSpec("size_variance needs a pair of factors and half/half sizes", "size_variance")
            object.__setattr__(self, "size_variance", tuple(float(c) for c in self.size_variance))

    def with_n(self, n: int) -> "ScenarioSpec":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d["n"] = n
        return ScenarioSpec(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sizes"] = self.sizes.label
        d["sub_sizes"] = self.sub_sizes.label
        if self.size_variance is not None:
            d["size_variance"] = list(self.size_variance)
        return d


def true_gamma_normal(rho: float) -> float:
    """Rank ICC of a bivariate normal pair with correlation ``rho``: ``6 asin(rho/2) / pi``."""
    if not -1.0 <= rho <= 1.0:
        raise GammaOutOfRange(f"rho must lie in [-1, 1], got {rho!r}")
    return 6.0 * math.asin(rho / 2.0) / math.pi


LOGNORMAL_SIGMA2 = math.log(0.5 + math.sqrt(math.exp(-2.0) + 0.25))


def _within_sd(rho: float) -> float:
    return math.sqrt((1.0 - rho) / rho)


def _latent_two_level(spec: ScenarioSpec, rng, sizes: np.ndarray, factors: np.ndarray | None):
    """Latent-normal values (optionally exp-transformed or with skewed means) for clusters of the given sizes."""
    n = sizes.size
    total = int(sizes.sum())
    if spec.rho == 0.0:
        x = 1.0 + normals(rng, total)
        return np.exp(x) if spec.scenario == "exp-outcome" else x
    if spec.scenario == "lognormal-means":
        u = np.exp(1.0 + math.sqrt(LOGNORMAL_SIGMA2) * normals(rng, n))
    else:
        u = 1.0 + normals(rng, n)
    r = normals(rng, total)
    sd = _within_sd(spec.rho)
    scale = sd if factors is None else sd * np.sqrt(np.repeat(factors, sizes))
    x = np.repeat(u, sizes) + scale * r
    if spec.scenario == "exp-outcome":
        x = np.exp(x)
    return x


def _marginal_sd(rho: float) -> float:
    return 1.0 if rho == 0.0 else math.sqrt(1.0 + (1.0 - rho) / rho)


def _ordinal(spec: ScenarioSpec, x: np.ndarray) -> np.ndarray:
    cuts = 1.0 + _marginal_sd(spec.rho) * ndtri(np.asarray(ORDINAL_CUTS[spec.levels]))
    return np.searchsorted(cuts, x, side="left").astype(float)


def _negative_pairs(rho: float, rng, n: int) -> np.ndarray:
    if rho == -1.0:
        u = np.ones(n)
        sd = math.sqrt(20.0)
    else:
        u = 1.0 + normals(rng, n)
        sd = math.sqrt((1.0 - rho) / (1.0 + rho))
    r = sd * normals(rng, n)
    return np.column_stack([u + r, u - r]).ravel()


def _factors(spec: ScenarioSpec, sizes: np.ndarray) -> np.ndarray | None:
    if spec.size_variance is None:
        return None
    small, large = spec.size_variance
    return np.where(sizes == spec.sizes.a, small, large)


def generate_scenario(
    spec: ScenarioSpec, rng: np.random.Generator | None = None
) -> ClusteredDataset | ThreeLevelDataset:
    """Draw one dataset.  Without ``rng`` the stream is seeded from ``spec.seed``."""
    if rng is None:
        rng = stream(spec.seed)
    n = spec.n
    if spec.scenario == "three-level":
        ni = spec.sizes.draw(n, rng)
        m = spec.sub_sizes.draw(int(ni.sum()), rng)
        obs_per_unit = np.bincount(np.repeat(np.arange(n), ni), weights=m, minlength=n).astype(np.int64)
        u = 1.0 + math.sqrt(20.0 * spec.rho3) * normals(rng, n)
        v = math.sqrt(20.0 * (spec.rho2 - spec.rho3)) * normals(rng, m.size)
        r = math.sqrt(20.0 * (1.0 - spec.rho2)) * normals(rng, int(m.sum()))
        x = np.repeat(u, obs_per_unit) + np.repeat(v, m) + r
        return ThreeLevelDataset(x, m, ni)
    if spec.scenario == "negative-pairs":
        return ClusteredDataset(_negative_pairs(spec.rho, rng, n), np.full(n, 2))
    sizes = spec.sizes.draw(n, rng)
    x = _latent_two_level(spec, rng, sizes, _factors(spec, sizes))
    if spec.scenario == "ordinal-k":
        x = _ordinal(spec, x)
    return ClusteredDataset(x, sizes)


def empirical_truth(spec: ScenarioSpec, M: int = DEFAULT_TRUTH_M, seed: int = TRUTH_SEED) -> float:
    """Rank ICC of the scenario's population, estimated from ``M`` size-2 clusters.

    Both members of every pair are ranked jointly (midranks over all ``2M``
    values); the pair is randomly oriented and the Pearson correlation of
    the two rank columns is returned.  With ``size_variance`` set, half the
    pairs use each variance factor.
    """
    if spec.scenario == "three-level":
        raise InvalidSpec("empirical truth is defined for two-level scenarios only", "scenario")
    if M < 2:
        raise InvalidSpec("M must be at least 2", "M")
    rng = stream(seed)
    sizes = np.full(M, 2, dtype=np.int64)
    if spec.scenario == "negative-pairs":
        x = _negative_pairs(spec.rho, rng, M)
    else:
        factors = None
        if spec.size_variance is not None:
            factors = np.where(np.arange(M) < M // 2, *spec.size_variance)
        x = _latent_two_level(spec, rng, sizes, factors)
        if spec.scenario == "ordinal-k":
            x = _ordinal(spec, x)
    ranks = rankdata(x).reshape(M, 2)
    flip = rng.random(M) < 0.5
    ranks[flip] = ranks[flip, ::-1]
    return float(np.corrcoef(ranks[:, 0], ranks[:, 1])[0, 1])


def scenario_truth(spec: ScenarioSpec, M: int = DEFAULT_TRUTH_M) -> tuple:
    """True ICC(s): closed form under normality, otherwise :func:`empirical_truth`."""
    if spec.scenario == "three-level":
        return (true_gamma_normal(spec.rho2), true_gamma_normal(spec.rho3))
    if spec.scenario in ("normal", "exp-outcome", "negative-pairs") and spec.size_variance is None:
        return (true_gamma_normal(spec.rho),)
    return (empirical_truth(spec, M),)


# ---------------------------------------------------------------------------
# study runner


@dataclass(frozen=True)
class StudyCell:
    """A scenario plus the weighting scheme and interval methods evaluated on it."""

    spec: ScenarioSpec
    weights: str = "equal-clusters"
    methods: tuple = ("wald", "fisher-z")
    level: float = 0.95
    truth: tuple | None = None

    def __post_init__(self):
        for i, m in enumerate(self.methods):
            if m not in STUDY_METHODS:
                raise InvalidSpec(f"unknown method {m!r}", f"methods[{i}]")
            boot = m.rsplit("-", 1)[0]
            if boot in _BOOT and (boot == "one-stage") != (self.spec.scenario == "three-level"):
                raise InvalidSpec(f"method {m!r} does not apply to this scenario", f"methods[{i}]")
        WeightScheme(self.weights)
        if (self.spec.scenario == "three-level") != (WeightScheme(self.weights).levels == 3):
            raise InvalidSpec(f"weights {self.weights!r} do not apply to this scenario", "weights")
        if not 0.0 < self.level < 1.0:
            raise InvalidSpec("level must lie in (0, 1)", "level")
        object.__setattr__(self, "methods", tuple(self.methods))

    @property
    def targets(self) -> tuple:
        return ("gamma2", "gamma3") if self.spec.scenario == "three-level" else ("gamma",)


_BOOT = {"cluster": cluster_bootstrap, "two-stage": two_stage_bootstrap, "one-stage": one_stage_bootstrap_3level}


def _intervals(cell: StudyCell, point: float, se: float | None, boots: dict, which: str) -> dict:
    out = {}
    for m in cell.methods:
        try:
            if m == "wald":
                out[m] = ci_wald(point, se, cell.level)
            elif m == "fisher-z":
                out[m] = ci_fisher_z(point, se, cell.level)
            else:
                scheme, kind = m.rsplit("-", 1)
                b = boots[scheme]
                out[m] = (b.percentile_ci(cell.level, which) if kind == "percentile"
                          else b.se_ci(point, cell.level, which))
        except EstimationError:
            out[m] = None
    return out


def _one_sim(cell: StudyCell, B: int, seed: int, c: int, s: int) -> dict:
    """Estimates, SEs and intervals for simulation ``s`` of cell ``c``."""
    rng = stream(seed, c, s)
    data = generate_scenario(cell.spec, rng)
    boot_seed = int(rng.integers(0, 2**63))
    try:
        w = make_weights(data, cell.weights)
        boots = {}
        for m in cell.methods:
            scheme = m.rsplit("-", 1)[0]
            if scheme in _BOOT and scheme not in boots:
                boots[scheme] = _BOOT[scheme](data, cell.weights, B, boot_seed, workers=1)
        if cell.spec.scenario == "three-level":
            est = rank_icc_three_level(data, w)
            se2, se3, _ = asymptotic_se_three_level(data, w, est)
            res = {}
            if est.gamma2_hat is not None:
                res["gamma2"] = (est.gamma2_hat, se2, _intervals(cell, est.gamma2_hat, se2, boots, "gamma"))
            res["gamma3"] = (est.gamma3_hat, se3, _intervals(cell, est.gamma3_hat, se3, boots, "gamma3"))
            return res
        est = rank_icc(data, w)
        se, _ = asymptotic_se(data, w, est)
        return {"gamma": (est.gamma_hat, se, _intervals(cell, est.gamma_hat, se, boots, "gamma"))}
    except EstimationError as exc:
        return {"error": exc.code}


def _run_tasks(cells, B, seed, tasks):
    return [_one_sim(cells[c], B, seed, c, s) for c, s in tasks]


@dataclass
class StudyReport:
    """Aggregated study rows plus the settings needed to reproduce them.

    ``wall_time`` is informational and is left out of the CSV and JSON
    output so that identical seeds give identical files.
    """

    rows: list
    seed: int
    sims: int
    B: int
    wall_time: float = 0.0

    def to_json(self) -> str:
        from . import __version__

        doc = {
            "tool": "rankicc",
            "version": __version__,
            "seed": self.seed,
            "sims": self.sims,
            "B": self.B,
            "rng": "PCG64, SeedSequence(seed, spawn_key=(cell, sim)); normals by CDF inversion",
            "rows": self.rows,
        }
        return dump_json(doc)

    def csv_columns(self) -> list:
        cols = []
        for row in self.rows:
            for key in row:
                if key not in cols:
                    cols.append(key)
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.csv_columns(), lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: ("" if v is None else _csv_value(v)) for k, v in row.items()})
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'cell':>4} {'scenario':<16} {'n':>5} {'target':<7} {'truth':>8} {'mean':>8} "
                 f"{'%bias':>8} {'empSE':>7} {'asySE':>7} {'wald':>6}"]
        for r in self.rows:
            pb = r["percent_bias"]
            wald = r.get("coverage_wald")
            lines.append(
                f"{r['cell']:>4} {r['scenario']:<16} {r['n']:>5} {r['target']:<7} "
                f"{r['truth']:>8.4f} {_fmt(r['mean_estimate'])} "
                f"{_fmt(pb, '8.3f')} {_fmt(r['empirical_se'], '7.4f')} {_fmt(r['mean_asymptotic_se'], '7.4f')} "
                f"{_fmt(wald, '6.3f')}"
            )
        lines.append(f"wall time {self.wall_time:.1f} s")
        return "\n".join(lines)


def _fmt(v, spec="8.4f"):
    width = int(spec.split(".")[0])
    return f"{'NA':>{width}}" if v is None else format(v, spec)


def _csv_value(v):
    return repr(v) if isinstance(v, float) else v


def _nan_to_none(x: float) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)


def _aggregate(c: int, cell: StudyCell, truth: tuple, sims: list) -> list:
    rows = []
    for t_idx, target in enumerate(cell.targets):
        true = truth[t_idx]
        got = [s[target] for s in sims if target in s]
        est = np.array([g[0] for g in got], dtype=float)
        ses = np.array([g[1] for g in got], dtype=float)
        mean_est = math.fsum(est) / est.size if est.size else float("nan")
        bias = mean_est - true
        row = {
            "cell": c,
            "scenario": cell.spec.scenario,
            "rho": cell.spec.rho if cell.spec.scenario != "three-level" else None,
            "rho2": cell.spec.rho2,
            "rho3": cell.spec.rho3,
            "n": cell.spec.n,
            "sizes": cell.spec.sizes.label,
            "sub_sizes": cell.spec.sub_sizes.label if cell.spec.scenario == "three-level" else None,
            "levels": cell.spec.levels if cell.spec.scenario == "ordinal-k" else None,
            "weights": cell.weights,
            "target": target,
            "truth": true,
            "sims": len(sims),
            "failures": len(sims) - est.size,
            "mean_estimate": _nan_to_none(mean_est),
            "bias": _nan_to_none(bias),
            "percent_bias": _nan_to_none(100.0 * bias / true) if true != 0 else None,
            "empirical_se": _nan_to_none(float(np.std(est, ddof=1))) if est.size > 1 else None,
            "mean_asymptotic_se": _nan_to_none(math.fsum(ses) / ses.size) if ses.size else None,
        }
        for m in cell.methods:
            cis = [g[2][m] for g in got if g[2][m] is not None]
            k = len(cis)
            cover = sum(ci.lower <= true <= ci.upper for ci in cis)
            left = sum(true < ci.lower for ci in cis)
            right = sum(true > ci.upper for ci in cis)
            row[f"valid_{m}"] = k
            row[f"coverage_{m}"] = cover / k if k else None
            row[f"left_noncoverage_{m}"] = left / k if k else None
            row[f"right_noncoverage_{m}"] = right / k if k else None
        rows.append(row)
    return rows


def run_study(
    cells: list,
    sims: int = 300,
    B: int = 200,
    seed: int = 0,
    workers: int = 1,
    truth_M: int = DEFAULT_TRUTH_M,
) -> StudyReport:
    """Run ``sims`` generate-estimate-infer cycles for every cell and aggregate.

    Simulations whose estimate is undefined are counted in ``failures``.
    Intervals a method cannot produce for a simulation (for example a
    Fisher z interval at an estimate of 1) are excluded from that method's
    coverage denominator, which is reported as ``valid_<method>``.
    """
    if sims < 1:
        raise InvalidSpec("sims must be at least 1", "sims")
    if B < 2 and any(m not in ("wald", "fisher-z") for cell in cells for m in cell.methods):
        raise InvalidSpec("B must be at least 2", "B")
    start = time.perf_counter()
    truths = [cell.truth if cell.truth is not None else scenario_truth(cell.spec, truth_M) for cell in cells]
    tasks = [(c, s) for c in range(len(cells)) for s in range(sims)]
    workers = max(1, int(workers))
    if workers == 1 or len(tasks) < 2 * workers:
        results = _run_tasks(cells, B, seed, tasks)
    else:
        chunks = [tasks[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_tasks, [cells] * workers, [B] * workers, [seed] * workers, chunks))
        by_task = {}
        for chunk, part in zip(chunks, parts):
            by_task.update(zip(chunk, part))
        results = [by_task[t] for t in tasks]
    rows = []
    for c, cell in enumerate(cells):
        rows.extend(_aggregate(c, cell, truths[c], results[c * sims:(c + 1) * sims]))
    return StudyReport(rows, seed, sims, B, time.perf_counter() - start)
