"""Exception hierarchy shared by every stage of the lab.

Each error carries an ``exit_code`` so the command-line front end can map
failures onto its documented exit statuses without a lookup table.
"""

from __future__ import annotations


class LabError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 3
    kind = "numerical_failure"

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "kind": self.kind, "message": str(self)}


class ConfigError(LabError):
    exit_code = 2
    kind = "config_error"


class InvalidParams(ConfigError):
    pass


class SchemaMismatch(ConfigError):
    pass


class ShapeMismatch(LabError):
    pass


class InvalidSegment(LabError):
    pass


class SingularSystem(LabError):
    pass


class SingularXi(SingularSystem):
    pass


class SingularInnovation(SingularSystem):
    pass


class SingularFoc(SingularSystem):
    pass


class FactorizationFailure(LabError):
    pass


class IllConditioned(LabError):
    pass


class NonConcave(LabError):
    pass


class InfeasibleConstraints(LabError):
    pass


class PatternMismatch(LabError):
    """Scenario equilibria do not share the binding pattern a linear solve needs."""


class DisconnectedLoss(LabError):
    pass


class UnknownNode(LabError):
    pass


class IsolatedNode(LabError):
    pass


class DegenerateCrossSection(LabError):
    pass


class UncalibratedModel(LabError):
    pass


class EmptySplit(ConfigError):
    pass


class DivergedLoss(LabError):
    pass


class NoConvergence(LabError):
    exit_code = 4
    kind = "non_convergence"


class NoFixedPoint(NoConvergence):
    pass
