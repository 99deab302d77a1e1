"""Exception hierarchy shared by every module.

All domain failures derive from :class:`HopfError` so that the CLI can map
them to exit code 3 with a machine-readable payload.
"""


class HopfError(Exception):
    """Base class for domain errors."""

    code = "domain_error"


class GapClosure(HopfError):
    code = "gap_closure"


class PhaseBoundary(HopfError):
    code = "phase_boundary"


class EmptyRange(HopfError):
    code = "empty_range"


class OrthogonalNeighbors(HopfError):
    code = "orthogonal_neighbors"


class BranchAmbiguity(HopfError):
    code = "branch_ambiguity"


class NetFlux(HopfError):
    code = "net_flux"


class ShapeMismatch(HopfError):
    code = "shape_mismatch"


class ZeroVectorSite(HopfError):
    code = "zero_vector_site"


class DegenerateAxis(HopfError):
    code = "degenerate_axis"


class NoTermination(HopfError):
    code = "no_termination"


class OptimFailure(HopfError):
    code = "optim_failure"


class EmptySet(HopfError):
    code = "empty_set"


class FragmentedCurve(HopfError):
    """Raised when a point cloud splits into several loops.

    The separated loops are attached as ``curves``.
    """

    code = "fragmented_curve"

    def __init__(self, message, curves=()):
        super().__init__(message)
        self.curves = list(curves)


class CurvesIntersect(HopfError):
    code = "curves_intersect"


class PoleSingularity(HopfError):
    code = "pole_singularity"


class UnknownArchitecture(HopfError):
    code = "unknown_architecture"
