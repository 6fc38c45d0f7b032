"""Exception hierarchy with stable machine-readable codes.

Every error carries a ``code`` string (used in JSON reports) and an
``exit_code`` (used by the command line interface): 2 for problems with the
input data or arguments, 3 for data that are valid but admit no estimate.
"""

from __future__ import annotations


class RankIccError(Exception):
    code = "RANKICC_ERROR"
    exit_code = 2

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self)}


class DataError(RankIccError):
    """Input data violate a dataset invariant."""

    code = "DATA_ERROR"


class EmptyInput(DataError):
    code = "EMPTY_INPUT"


class EmptyFile(DataError):
    code = "EMPTY_FILE"


class SingletonCluster(DataError):
    code = "SINGLETON_CLUSTER"


class InsufficientClusters(DataError):
    code = "INSUFFICIENT_CLUSTERS"


class NonFiniteValue(DataError):
    code = "NON_FINITE_VALUE"

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row

    def to_dict(self) -> dict:
        d = super().to_dict()
        if self.row is not None:
            d["row"] = self.row
        return d


class MissingColumn(DataError):
    code = "MISSING_COLUMN"


class ShapeMismatch(DataError):
    code = "SHAPE_MISMATCH"


class InvalidSpec(RankIccError, ValueError):
    code = "INVALID_SPEC"

    def __init__(self, message: str, path: str | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path

    def to_dict(self) -> dict:
        d = super().to_dict()
        if self.path is not None:
            d["path"] = self.path
        return d


class GammaOutOfRange(RankIccError, ValueError):
    code = "GAMMA_OUT_OF_RANGE"


class NonpositiveEffectiveSize(RankIccError, ValueError):
    code = "NONPOSITIVE_EFFECTIVE_SIZE"


class InsufficientPairs(RankIccError, ValueError):
    code = "INSUFFICIENT_PAIRS"


class EstimationError(RankIccError):
    """The data are valid but the requested quantity is undefined."""

    code = "ESTIMATION_ERROR"
    exit_code = 3


class DegenerateData(EstimationError):
    code = "DEGENERATE_DATA"


class DegenerateNumerator(EstimationError):
    code = "DEGENERATE_NUMERATOR"


class BoundaryEstimate(EstimationError):
    code = "BOUNDARY_ESTIMATE"


class DegenerateReplicate(EstimationError):
    code = "DEGENERATE_REPLICATE"
