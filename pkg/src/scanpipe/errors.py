"""Exception hierarchy shared by every pipeline stage."""


class ScanPipeError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 2


class ManifestError(ScanPipeError):
    """A manifest row failed schema validation."""

    def __init__(self, message, row=None, field=None):
        self.row = row
        self.field = field
        where = []
        if row is not None:
            where.append(f"row {row}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class DanglingReferenceError(ManifestError):
    """A manifest row points at a volume file that does not exist."""


class InfeasibleSplitError(ScanPipeError):
    """Class counts are too small to honour the requested stratification."""


class LeakageReferenceError(ScanPipeError):
    """A split or fold plan names a shoulder/study that is not in the manifest."""


class ShapeError(ScanPipeError):
    """Array shape does not satisfy an operation's contract."""


class CropError(ShapeError):
    pass


class DegenerateStatsError(ScanPipeError):
    """Standardization statistics with zero spread."""


class UnknownSequenceTypeError(ScanPipeError):
    pass


class PartitionLeakError(ScanPipeError):
    """Non-training data offered where only training data is allowed."""


class IncompatibleWeightsError(ScanPipeError):
    pass


class WeightingError(ScanPipeError):
    pass


class ProbabilityDomainError(ScanPipeError):
    pass


class TrainingDivergedError(ScanPipeError):
    exit_code = 4


class NoResultError(ScanPipeError):
    pass


class SizeError(ScanPipeError):
    pass


class KeyMismatchError(ScanPipeError):
    pass


class FoldDegeneracyError(ScanPipeError):
    def __init__(self, fold, message=None):
        self.fold = fold
        super().__init__(message or f"fold {fold}: validation fold contains a single class")


class AggregationError(ScanPipeError):
    pass


class CalibrationError(ScanPipeError):
    pass


class UndefinedMetricError(ScanPipeError):
    pass


class ConfigError(ScanPipeError):
    pass


class SyntheticSpecError(ConfigError):
    pass


class DependencyError(ScanPipeError):
    """A stage was launched before the stage it depends on produced its artifact."""

    exit_code = 3

    def __init__(self, required_stage, missing):
        self.required_stage = required_stage
        self.missing = missing
        super().__init__(f"missing artifact {missing}; run the '{required_stage}' stage first")
