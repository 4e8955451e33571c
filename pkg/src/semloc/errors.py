"""Exception taxonomy shared across the package.

Every error raised by the library derives from SemlocError so the CLI can
map failure categories onto exit codes in one place.
"""


class SemlocError(Exception):
    pass


class BehindCamera(SemlocError):
    """Point depth at or below the near-plane limit."""


class GimbalLock(SemlocError):
    """Euler pitch too close to +-pi/2 for a stable decomposition."""


class OutOfBounds(SemlocError):
    """Sample location outside the interpolation domain."""


class ParseError(SemlocError):
    """Malformed map or trajectory file."""


class ValidationError(SemlocError):
    """Structurally valid input violating a domain invariant."""


class InvalidSpec(SemlocError):
    """World description that cannot be realized."""


class InsufficientSeparation(SemlocError):
    """GPS fix pair too close together to define a heading."""


class EmptyMapNeighborhood(SemlocError):
    """No landmark near the query point for a ground-height lookup."""


class NoVisiblePoints(SemlocError):
    """No map point projects into any camera."""


class AllCandidatesInvalid(SemlocError):
    """Every grid candidate rejected by the visibility gate."""


class NonMonotonicFrameId(SemlocError):
    """Frame pushed into the window out of order."""


class SolverDiverged(SemlocError):
    """Optimizer finished with a worse objective than it started with."""


class DegenerateNormalEquations(SemlocError):
    """Normal equations rank-deficient beyond what damping can absorb."""


class ConfigError(SemlocError):
    """Missing, unreadable, or inconsistent configuration."""


class SequenceNotFound(SemlocError):
    """Sequence directory missing or incomplete."""


class InitializationFailed(SemlocError):
    """Initialization retry budget exhausted."""


class NoAssociations(SemlocError):
    """No timestamp matches between the two trajectories."""


# CLI exit codes per error category; 1 is the generic failure code.
EXIT_CODES = {
    ConfigError: 2,
    SequenceNotFound: 3,
    InitializationFailed: 4,
    NoAssociations: 5,
    ParseError: 6,
    ValidationError: 6,
    InvalidSpec: 7,
}


def exit_code_for(exc: BaseException) -> int:
    for klass, code in EXIT_CODES.items():
        if isinstance(exc, klass):
            return code
    return 1
