"""Dataset containers, weight bookkeeping and the weighted midrank CDF.

Observations are stored flat and cluster-contiguous: cluster ``i`` occupies
``values[offsets[i]:offsets[i] + sizes[i]]``.  Three-level data add a second
layer (level-2 units inside level-3 units) with the same layout.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._ranks import TieGroups
from .errors import (
    EmptyInput,
    InsufficientClusters,
    NonFiniteValue,
    ShapeMismatch,
    SingletonCluster,
)

SINGLETON_POLICIES = ("error", "drop")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _check_finite(values: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NonFiniteValue(f"non-finite value at observation {int(bad[0])}", row=int(bad[0]))


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Two-level data: ``n`` clusters of sizes ``k_i``, ``N`` observations.

    Parameters
    ----------
    values : array_like, shape (N,)
        Observations, cluster-contiguous in cluster order.
    sizes : array_like of int, shape (n,)
        Cluster sizes ``k_i``; every size must be at least 2.
    ids : sequence of str, optional
        Opaque cluster identifiers.  Defaults to ``"0", "1", ...``.
    dropped_singletons : int
        Number of singleton clusters removed while building the dataset.
    """

    values: np.ndarray
    sizes: np.ndarray
    ids: tuple = ()
    dropped_singletons: int = 0
    offsets: np.ndarray = field(init=False, repr=False)
    cluster_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        sizes = np.asarray(self.sizes, dtype=np.int64).ravel()
        if values.size == 0:
            raise EmptyInput("dataset has no observations")
        _check_finite(values)
        if sizes.size < 2:
            raise InsufficientClusters(f"need at least 2 clusters, got {sizes.size}")
        if np.any(sizes < 2):
            i = int(np.flatnonzero(sizes < 2)[0])
            raise SingletonCluster(f"cluster {i} has size {int(sizes[i])} (< 2)")
        if int(sizes.sum()) != values.size:
            raise ShapeMismatch(
                f"cluster sizes sum to {int(sizes.sum())} but there are {values.size} values"
            )
        ids = tuple(str(s) for s in self.ids) if len(self.ids) else tuple(
            str(i) for i in range(sizes.size)
        )
        if len(ids) != sizes.size:
            raise ShapeMismatch("number of cluster ids does not match number of clusters")
        offsets = np.zeros(sizes.size, dtype=np.int64)
        np.cumsum(sizes[:-1], out=offsets[1:])
        set_ = object.__setattr__
        set_(self, "values", _readonly(values))
        set_(self, "sizes", _readonly(sizes))
        set_(self, "ids", ids)
        set_(self, "offsets", _readonly(offsets))
        set_(self, "cluster_index", _readonly(np.repeat(np.arange(sizes.size), sizes)))

    @property
    def n(self) -> int:
        return int(self.sizes.size)

    @property
    def N(self) -> int:
        return int(self.values.size)

    @property
    def is_balanced(self) -> bool:
        return bool(np.all(self.sizes == self.sizes[0]))

    def cluster(self, i: int) -> np.ndarray:
        o = self.offsets[i]
        return self.values[o:o + self.sizes[i]]

    def clusters(self) -> list[np.ndarray]:
        return [self.cluster(i) for i in range(self.n)]

    def with_values(self, values: np.ndarray) -> "ClusteredDataset":
        """Same cluster structure, new observation values."""
        return ClusteredDataset(values, self.sizes, self.ids, self.dropped_singletons)

    @classmethod
    def from_clusters(cls, clusters: Sequence[Sequence[float]], ids: Sequence[str] = ()):
        sizes = [len(c) for c in clusters]
        values = np.concatenate([np.asarray(c, dtype=float) for c in clusters]) if clusters else []
        return cls(values, sizes, tuple(ids))


@dataclass(frozen=True, eq=False)
class ThreeLevelDataset:
    """Three-level data: level-3 units ``i``, level-2 units ``j``, observations ``k``.

    Parameters
    ----------
    values : array_like, shape (N,)
        Observations ordered by level-3 unit, then level-2 unit.
    sub_sizes : array_like of int
        ``m_ij`` for every level-2 unit, in storage order.
    unit_sizes : array_like of int, shape (n,)
        ``n_i``, the number of level-2 units in each level-3 unit.
    """

    values: np.ndarray
    sub_sizes: np.ndarray
    unit_sizes: np.ndarray
    unit_ids: tuple = ()
    sub_ids: tuple = ()
    dropped_singletons: int = 0
    sub_index: np.ndarray = field(init=False, repr=False)
    unit_index: np.ndarray = field(init=False, repr=False)
    unit_of_sub: np.ndarray = field(init=False, repr=False)
    unit_totals: np.ndarray = field(init=False, repr=False)
    pair_counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        m = np.asarray(self.sub_sizes, dtype=np.int64).ravel()
        ni = np.asarray(self.unit_sizes, dtype=np.int64).ravel()
        if values.size == 0:
            raise EmptyInput("dataset has no observations")
        _check_finite(values)
        if ni.size < 2:
            raise InsufficientClusters(f"need at least 2 level-3 units, got {ni.size}")
        if np.any(ni < 2):
            i = int(np.flatnonzero(ni < 2)[0])
            raise SingletonCluster(f"level-3 unit {i} has {int(ni[i])} level-2 unit(s) (< 2)")
        if np.any(m < 1):
            raise ShapeMismatch("every level-2 unit needs at least one observation")
        if int(ni.sum()) != m.size or int(m.sum()) != values.size:
            raise ShapeMismatch("level sizes do not match the number of values")
        unit_of_sub = np.repeat(np.arange(ni.size), ni)
        totals = np.bincount(unit_of_sub, weights=m, minlength=ni.size).astype(np.int64)
        sq = np.bincount(unit_of_sub, weights=m * m, minlength=ni.size).astype(np.int64)
        unit_ids = tuple(str(s) for s in self.unit_ids) or tuple(str(i) for i in range(ni.size))
        sub_ids = tuple(str(s) for s in self.sub_ids) or tuple(
            str(j) for n_i in ni for j in range(n_i)
        )
        if len(unit_ids) != ni.size or len(sub_ids) != m.size:
            raise ShapeMismatch("number of ids does not match the level sizes")
        sub_index = np.repeat(np.arange(m.size), m)
        set_ = object.__setattr__
        set_(self, "values", _readonly(values))
        set_(self, "sub_sizes", _readonly(m))
        set_(self, "unit_sizes", _readonly(ni))
        set_(self, "unit_ids", unit_ids)
        set_(self, "sub_ids", sub_ids)
        set_(self, "sub_index", _readonly(sub_index))
        set_(self, "unit_index", _readonly(unit_of_sub[sub_index]))
        set_(self, "unit_of_sub", _readonly(unit_of_sub))
        set_(self, "unit_totals", _readonly(totals))
        set_(self, "pair_counts", _readonly((totals * totals - sq) // 2))

    @property
    def n(self) -> int:
        return int(self.unit_sizes.size)

    @property
    def N(self) -> int:
        return int(self.values.size)

    @property
    def n_sub(self) -> int:
        return int(self.sub_sizes.size)

    def with_values(self, values: np.ndarray) -> "ThreeLevelDataset":
        return ThreeLevelDataset(
            values, self.sub_sizes, self.unit_sizes, self.unit_ids, self.sub_ids,
            self.dropped_singletons,
        )

    @classmethod
    def from_nested(cls, units: Sequence[Sequence[Sequence[float]]]) -> "ThreeLevelDataset":
        """Build from ``units[i][j] = [x_ij1, x_ij2, ...]``."""
        subs = [np.asarray(s, dtype=float) for u in units for s in u]
        values = np.concatenate(subs) if subs else np.array([])
        return cls(values, [s.size for s in subs], [len(u) for u in units])


@dataclass(frozen=True, eq=False)
class WeightAssignment:
    """Per-observation weights summing to one.

    Attributes
    ----------
    w : ndarray, shape (N,)
    scheme : str
        Scheme tag (``equal-clusters``, ``equal-obs``, ``ess``, ``combination``,
        ``level1``, ``level2``, ``level3`` or ``custom``).
    iterations : int
        Fixed-point iterations used (0 for non-iterative schemes).
    gamma_final : float or None
        Working ICC at which an iterative scheme stopped.
    converged : bool
    """

    w: np.ndarray
    scheme: str
    iterations: int = 0
    gamma_final: float | None = None
    converged: bool = True

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).ravel()
        if w.size == 0 or not np.all(np.isfinite(w)):
            raise ShapeMismatch("weights must be a non-empty finite vector")
        if np.any(w <= 0):
            raise ShapeMismatch("weights must be strictly positive")
        total = math.fsum(w)
        if abs(total - 1.0) > 1e-12:
            raise ShapeMismatch(f"weights sum to {total!r}, expected 1")
        object.__setattr__(self, "w", _readonly(w))

    @classmethod
    def normalized(cls, raw: np.ndarray, scheme: str = "custom", **kw) -> "WeightAssignment":
        raw = np.asarray(raw, dtype=float)
        return cls(raw / math.fsum(raw), scheme, **kw)

    def check(self, data: ClusteredDataset | ThreeLevelDataset) -> None:
        if self.w.size != data.N:
            raise ShapeMismatch(f"{self.w.size} weights for {data.N} observations")

    def cluster_totals(self, data: ClusteredDataset) -> np.ndarray:
        """``w_i.`` for two-level data."""
        return np.bincount(data.cluster_index, weights=self.w, minlength=data.n)

    def sub_totals(self, data: ThreeLevelDataset) -> np.ndarray:
        """``w_ij.`` for three-level data, one entry per level-2 unit."""
        return np.bincount(data.sub_index, weights=self.w, minlength=data.n_sub)

    def unit_totals(self, data: ThreeLevelDataset) -> np.ndarray:
        """``w_i..`` for three-level data."""
        return np.bincount(data.unit_index, weights=self.w, minlength=data.n)


@dataclass(frozen=True, eq=False)
class RiditTable:
    """Weighted midrank CDF ``F*(x) = {F(x) + F(x-)}/2`` at every observation."""

    fstar: np.ndarray
    fbar: float
    ties: TieGroups = field(repr=False)

    @property
    def centered(self) -> np.ndarray:
        return self.fstar - self.fbar


def ridit_cdf(data: ClusteredDataset | ThreeLevelDataset, weights: WeightAssignment) -> RiditTable:
    """Weighted midrank CDF of every observation.

    Uses one stable sort and cumulative weight sums over tie groups, so the
    cost is O(N log N).  Only the order of the values matters.
    """
    weights.check(data)
    ties = TieGroups(data.values)
    w = weights.w
    fstar = ties.below_mid(w)
    fbar = math.fsum(w * fstar)
    return RiditTable(_readonly(fstar), fbar, ties)


def _apply_singletons(sizes: dict, policy: str, what: str) -> tuple[set, int]:
    if policy not in SINGLETON_POLICIES:
        raise ValueError(f"singleton policy must be one of {SINGLETON_POLICIES}, got {policy!r}")
    singles = [key for key, size in sizes.items() if size < 2]
    if singles and policy == "error":
        raise SingletonCluster(f"{what} {singles[0]!r} is a singleton")
    if singles:
        warnings.warn(f"dropped {len(singles)} singleton {what}(s)", stacklevel=3)
    return set(singles), len(singles)


def build_dataset(
    records: Iterable[tuple[str, float]], singleton_policy: str = "error"
) -> ClusteredDataset:
    """Group ``(cluster_id, value)`` records into a :class:`ClusteredDataset`.

    Clusters keep their first-appearance order.  With ``singleton_policy="drop"``
    clusters of size one are removed and counted in ``dropped_singletons``.
    """
    data, _ = build_dataset_indexed(records, singleton_policy)
    return data


def build_dataset_indexed(
    records: Iterable[tuple[str, float]], singleton_policy: str = "error"
) -> tuple[ClusteredDataset, np.ndarray]:
    """As :func:`build_dataset`, also returning the record position of every stored value."""
    records = list(records)
    if not records:
        raise EmptyInput("no records")
    vals = np.array([float(r[1]) for r in records])
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise NonFiniteValue(f"non-finite value in record {int(bad[0])}", row=int(bad[0]))
    groups: dict[str, list[int]] = {}
    for pos, rec in enumerate(records):
        groups.setdefault(str(rec[0]), []).append(pos)
    dropped, n_dropped = _apply_singletons(
        {key: len(v) for key, v in groups.items()}, singleton_policy, "cluster"
    )
    kept = [(key, pos) for key, pos in groups.items() if key not in dropped]
    if len(kept) < 2:
        raise InsufficientClusters(f"need at least 2 clusters, got {len(kept)}")
    index = np.concatenate([np.asarray(pos, dtype=np.int64) for _, pos in kept])
    data = ClusteredDataset(
        vals[index], [len(pos) for _, pos in kept], tuple(key for key, _ in kept), n_dropped
    )
    return data, index


def build_three_level_dataset(
    records: Iterable[tuple[str, str, float]], singleton_policy: str = "error"
) -> ThreeLevelDataset:
    """Group ``(unit_id, subunit_id, value)`` records into a :class:`ThreeLevelDataset`."""
    data, _ = build_three_level_indexed(records, singleton_policy)
    return data


def build_three_level_indexed(
    records: Iterable[tuple[str, str, float]], singleton_policy: str = "error"
) -> tuple[ThreeLevelDataset, np.ndarray]:
    """Level-2 units are identified by the (unit, subunit) pair.

    Level-3 units holding a single level-2 unit count as singletons.
    """
    records = list(records)
    if not records:
        raise EmptyInput("no records")
    vals = np.array([float(r[2]) for r in records])
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise NonFiniteValue(f"non-finite value in record {int(bad[0])}", row=int(bad[0]))
    units: dict[str, dict[str, list[int]]] = {}
    for pos, (u, s, _) in enumerate(records):
        units.setdefault(str(u), {}).setdefault(str(s), []).append(pos)
    dropped, n_dropped = _apply_singletons(
        {key: len(subs) for key, subs in units.items()}, singleton_policy, "level-3 unit"
    )
    kept = [(key, subs) for key, subs in units.items() if key not in dropped]
    if len(kept) < 2:
        raise InsufficientClusters(f"need at least 2 level-3 units, got {len(kept)}")
    index = np.concatenate(
        [np.asarray(pos, dtype=np.int64) for _, subs in kept for pos in subs.values()]
    )
    data = ThreeLevelDataset(
        vals[index],
        [len(pos) for _, subs in kept for pos in subs.values()],
        [len(subs) for _, subs in kept],
        tuple(key for key, _ in kept),
        tuple(s for _, subs in kept for s in subs),
        n_dropped,
    )
    return data, index
