"""Exception taxonomy shared across the package.

Every error carries an ``exit_code`` so the CLI can map failure classes to
machine-readable process exit statuses (0 ok, 2 config, 3 io, 4 backend,
5 numerical divergence).
"""


class VICLError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidConfigError(VICLError):
    """A configuration value violates its invariant. Names the field."""

    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class IngestionError(VICLError):
    """A dataset root, split file, or annotation could not be read."""

    exit_code = 3

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class BackendError(VICLError):
    """A model backend is unavailable or failed during a forward call."""

    exit_code = 4


class NumericalDivergenceError(VICLError):
    """A latent went non-finite mid-episode. Names the step and path."""

    exit_code = 5

    def __init__(self, step: int, path: str):
        self.step = step
        self.path = path
        super().__init__(f"non-finite latent at step {step} on path {path}")


class DimensionError(VICLError):
    """Tensor arguments disagree on a required shape."""


class EmptyPromptError(VICLError):
    """An operation that needs at least one prompt received none."""


class IncompatibleScheduleError(VICLError):
    """Schedule and backend disagree on the base timestep grid."""


class MalformedTrajectoryError(VICLError):
    """A noise trajectory is inconsistent with its schedule."""


class DegenerateStatisticsError(VICLError):
    """A channel with zero spread cannot be re-normalized."""

    def __init__(self, channels):
        self.channels = tuple(int(c) for c in channels)
        super().__init__(f"zero spread in channel(s) {self.channels}")


class IncompatibleEmbeddingsError(VICLError):
    """Embeddings from different encoders cannot be compared."""


class AnnotationError(VICLError):
    """A task annotation violates its bounds or schema."""
