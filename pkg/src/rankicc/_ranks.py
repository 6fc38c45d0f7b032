"""Sorted tie-group structure shared by the ridit CDF and the influence terms.

All indicator-weighted double sums in this package have the form

    sum_o coef[o] * psi(y, x[o]),   psi(y, x) = [1(y < x) + 1(y <= x)] / 2

or its mirror image.  After one stable sort of the values these reduce to
prefix/suffix sums over tie groups, which is what :class:`TieGroups` provides.
"""

from __future__ import annotations

import numpy as np


class TieGroups:
    """One stable sort of ``values`` plus the tie-group labelling.

    Parameters
    ----------
    values : ndarray of float, shape (N,)
    """

    __slots__ = ("order", "group_of", "n_groups", "size")

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        size = values.shape[0]
        order = np.argsort(values, kind="stable")
        sorted_vals = values[order]
        starts = np.empty(size, dtype=bool)
        if size:
            starts[0] = True
            np.not_equal(sorted_vals[1:], sorted_vals[:-1], out=starts[1:])
        gid_sorted = np.cumsum(starts) - 1
        group_of = np.empty(size, dtype=np.intp)
        group_of[order] = gid_sorted
        self.order = order
        self.group_of = group_of
        self.n_groups = int(gid_sorted[-1]) + 1 if size else 0
        self.size = size

    def group_sums(self, coef: np.ndarray) -> np.ndarray:
        return np.bincount(self.group_of, weights=coef, minlength=self.n_groups)

    def below_mid(self, coef: np.ndarray) -> np.ndarray:
        """Per observation y: sum of coef over x < y plus half the sum over x == y."""
        gs = self.group_sums(coef)
        before = np.empty_like(gs)
        before[0] = 0.0
        np.cumsum(gs[:-1], out=before[1:])
        return (before + 0.5 * gs)[self.group_of]

    def above_mid(self, coef: np.ndarray) -> np.ndarray:
        """Per observation y: sum of coef over x > y plus half the sum over x == y."""
        gs = self.group_sums(coef)
        after = np.empty_like(gs)
        after[-1] = 0.0
        np.cumsum(gs[:0:-1], out=after[-2::-1])
        return (after + 0.5 * gs)[self.group_of]
