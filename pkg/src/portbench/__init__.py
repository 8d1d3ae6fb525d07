"""Instruction characterization toolkit: generated microbenchmarks infer
latency, throughput, and port usage against a pluggable measurement backend;
the bundled backend is a deterministic port-model simulator with ground
truth, so every inference can be validated exactly."""

from importlib import resources

__version__ = "0.1.0"


def reference_catalog_path():
    """Path of the bundled instruction catalog."""
    return resources.files(__name__) / "data" / "reference_catalog.json"


def reference_machine_path():
    """Path of the bundled 6-port reference machine."""
    return resources.files(__name__) / "data" / "reference_machine.json"
