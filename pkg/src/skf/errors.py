"""Error and warning types shared across the library."""


class SkfError(Exception):
    """Base class for library errors."""


class SingularGram(SkfError):
    """Score-matching Gram matrix is rank deficient.

    Signals degenerate or unrealizable moment input (e.g. a density
    supported on a line), not a numerical tolerance issue.
    """


class IllConditioned(UserWarning):
    """Gram condition estimate exceeds the configured cap.

    Warning level: the solve is still returned.
    """


class EmptyTargets(SkfError):
    """Closure requested but there are no unclosed moments (valid no-op)."""


class UnderdeterminedSystem(SkfError):
    """Stein system has more unknown columns than rows."""

    def __init__(self, rows, unknowns, msg=None):
        self.rows = rows
        self.unknowns = unknowns
        super().__init__(msg or f"{rows} rows < {unknowns} unknowns")


class RankDeficient(SkfError):
    """Stein system column rank below the number of unknowns."""

    def __init__(self, rank, unknowns, msg=None):
        self.rank = rank
        self.unknowns = unknowns
        super().__init__(msg or f"column rank {rank} < {unknowns} unknowns")


class DivergedClosure(SkfError):
    """Closed moment ODE produced a non-finite or blown-up moment.

    Carries the time at which the guard tripped. This surfaces a genuine
    singularity of the closed dynamics; it is reported, never damped.
    """

    def __init__(self, t, msg=None):
        self.t = t
        super().__init__(msg or f"moment trajectory diverged at t={t:.6g}")


class DegreeOverflow(SkfError):
    """Measurement degree violates the conjugacy condition 2*d_g <= r."""


class MissingMoment(SkfError, KeyError):
    """A required moment entry is absent from the supplied vector."""
