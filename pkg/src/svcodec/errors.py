"""Exception hierarchy shared across the codec."""


class SvcodecError(Exception):
    """Base class for all svcodec errors."""


class DuplicateSampleError(SvcodecError):
    """Two samples for the same coordinate carried conflicting values."""

    def __init__(self, coord):
        self.coord = tuple(int(v) for v in coord)
        super().__init__(f"conflicting duplicate sample at coordinate {self.coord}")


class GenerationError(SvcodecError):
    """Invalid procedural generator specification."""


class OutOfCoverageError(SvcodecError):
    """A blend was requested at a point no gate function covers."""


class ConfigError(SvcodecError):
    """Malformed configuration text or invalid hyperparameter value."""


class EncodeError(SvcodecError):
    """Training pipeline failure; carries the failing expert id when known."""

    def __init__(self, message, expert_id=None):
        self.expert_id = expert_id
        if expert_id is not None:
            message = f"expert {expert_id}: {message}"
        super().__init__(message)


class MetricError(SvcodecError):
    """Metric preconditions violated (mismatched grids, empty inputs)."""


class FormatError(SvcodecError):
    """Base class for file format failures."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File carries an unsupported format version."""


class ChecksumError(FormatError):
    """Stored checksum does not match the file contents."""


class TruncationError(FormatError):
    """File ended inside the named section."""

    def __init__(self, section):
        self.section = section
        super().__init__(f"file truncated inside section '{section}'")


class VerificationError(SvcodecError):
    """A requested post-operation verification failed."""
