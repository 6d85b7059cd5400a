"""Exception types shared across the toolkit."""


class AuditError(Exception):
    """Base class for all toolkit errors."""


class DatasetError(AuditError):
    """Dataset cannot be used as requested (too few classes, bad labels)."""


class TrainingDivergedError(AuditError):
    """Loss became non-finite during training."""


class PreprocessError(AuditError):
    """Input images are incompatible with the pinned preprocessing."""


class SelectionError(AuditError):
    """A requested layer id is not part of the model's BN catalog."""


class DimensionError(AuditError):
    """Vector lengths or array shapes do not line up."""


class VarianceUndefinedError(AuditError):
    """Channel variance requested for an activation with no spatial dims."""


class HeadMissingError(AuditError):
    """Operation needs the classification head but the bundle has none."""


class PoolExhaustedError(AuditError):
    """A split or sampling request asks for more ids than are available."""


class DegenerateSamplingError(AuditError):
    """Candidate sampling too small for the fixed selection fractions."""


class DivergedCandidateError(AuditError):
    """Latent optimization produced a non-finite gradient or loss."""


class ArtifactMissingError(AuditError):
    """A required external artifact (checkpoint file) does not exist."""


class ConfigError(AuditError):
    """Experiment configuration failed schema validation."""
