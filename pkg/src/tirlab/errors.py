"""Exception types raised across the package.

Each class corresponds to one contract violation; callers are expected to
catch the specific type, not the base class.
"""


class TirlabError(Exception):
    """Base class for all package errors."""


class ZeroVector(TirlabError):
    """Vector with (near-)zero norm cannot be normalized."""


class DimensionMismatch(TirlabError):
    """Operand shapes are incompatible."""


# several call sites use the shape-oriented name
ShapeMismatch = DimensionMismatch


class NonPositiveTemperature(TirlabError):
    """Softmax temperature must be strictly positive."""


class ConfigInvalid(TirlabError):
    """Dataset or training configuration violates its preconditions."""


class EmptyAttributeSet(TirlabError):
    """Caption generation needs at least one attribute."""


class EmptyImage(TirlabError):
    """Raster operation received an image with no pixels."""


class PatchOutOfBounds(TirlabError):
    """Color patch does not fit inside the image."""


class EmptyQuery(TirlabError):
    """Query has no tokens."""


class SingleClassData(TirlabError):
    """Classifier training needs at least two classes."""


class UntrainedClassifier(TirlabError):
    """Routing fallback requested but no classifier is available."""


class UnknownToken(TirlabError):
    """Token id outside the vocabulary (or empty token list)."""


class StaleCache(TirlabError):
    """Backward pass received caches from a different forward pass."""


class NoInclusionRow(TirlabError):
    """A target row has no inclusion pair and cannot be normalized."""


class NoMaskPresent(TirlabError):
    """Masked-token loss requires exactly one mask token per caption."""


class EmptyBatch(TirlabError):
    """No pairs left after mining; loss undefined."""


class TaskDatasetMismatch(TirlabError):
    """Training task does not match the dataset's task."""


class DivergedLoss(TirlabError):
    """NaN/Inf appeared in a loss or gradient during training."""


class CorruptCheckpoint(TirlabError):
    """Checkpoint failed structural validation or a hash check."""


class DatasetIntegrityError(TirlabError):
    """Dataset files on disk failed a hash or schema check."""


class EmptyGallery(TirlabError):
    """Gallery index cannot be built from zero images."""


class MissingGroundTruth(TirlabError):
    """A query has no ground-truth ids."""


class UnroutedQuery(TirlabError):
    """Result fusion received a query without a routing decision."""


class IncomparableRuns(TirlabError):
    """Ablation runs were produced from different datasets."""
