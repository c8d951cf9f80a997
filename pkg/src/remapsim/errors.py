"""Exception hierarchy shared across the simulator."""


class SimulationError(Exception):
    """Base class for simulator misuse and impossible states."""


class DuplicateMappingError(SimulationError):
    """A guest page was mapped twice during VM construction."""


class UnmappedGpaError(SimulationError):
    """The guest touched a page the hypervisor never mapped."""


class TrackingError(SimulationError):
    """Tracking was closed without being opened."""


class IntegrityFault(Exception):
    """A guest access hit a page whose content/GPA binding no longer verifies."""

    def __init__(self, gpa: int):
        super().__init__(f"integrity fault on gpa {gpa}")
        self.gpa = gpa


class RequestFailed(Exception):
    """A service request could not complete inside the guest."""


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario description."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class CalibrationError(RuntimeError):
    """Requested noise statistics cannot be reached with the given profile."""


class TargetLost(RuntimeError):
    """The true target page dropped out of the refined set (evaluation only)."""


class PlanError(RuntimeError):
    """Not enough ranked candidates to build an extraction plan."""


class ExtractionImpossible(RuntimeError):
    """Remapping is detected by the guest; no data can be extracted."""
