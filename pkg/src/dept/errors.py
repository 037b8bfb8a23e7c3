"""Exception types raised across the package."""


class DeptError(Exception):
    """Base class for every error raised by this package."""


class InvalidSpecError(DeptError, ValueError):
    pass


class InvalidInputError(DeptError, ValueError):
    pass


class InvalidConfigError(DeptError, ValueError):
    pass


class DegenerateFeatureError(DeptError, ValueError):
    """A feature vector has zero norm, so cosine similarity is undefined."""


class MissingDataError(DeptError, LookupError):
    pass


class InsufficientDataError(DeptError, ValueError):
    pass


class CorruptCacheError(DeptError, ValueError):
    """A feature cache file failed validation.

    ``field`` names the header or payload section that was wrong.
    """

    def __init__(self, field, message):
        super().__init__(f"corrupt feature cache ({field}): {message}")
        self.field = field


class CorruptCheckpointError(CorruptCacheError):
    def __init__(self, field, message):
        DeptError.__init__(self, f"corrupt checkpoint ({field}): {message}")
        self.field = field
