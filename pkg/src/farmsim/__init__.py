"""farmsim: discrete-event simulator, assignment policies and analytic
benchmark for energy-efficient job dispatching in heterogeneous server farms."""

from importlib import resources

__version__ = "0.1.0"


def fixture_path(name: str):
    """Filesystem path of a bundled scenario config (e.g. "case1")."""
    return resources.files(__package__) / "fixtures" / f"{name}.yaml"
