"""Measurement protocol: per-iteration averages with overhead cancellation.

Every quantity is measured twice, once with a small and once with a large
number of kernel copies; the difference divided by the copy-count difference
yields the per-iteration value.  Fixed per-run costs (serialization, counter
reads, ...) appear in both runs and cancel exactly.  Results are exact
rationals; on the simulator backend repeated measurements are identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from statistics import median
from typing import Protocol, TYPE_CHECKING

from . import machine as machine_mod

if TYPE_CHECKING:
    from .kernel import Kernel


class MeasurementError(Exception):
    pass


@dataclass(frozen=True)
class MeasurementConfig:
    n_small: int = 10
    n_large: int = 110
    repetitions: int = 100
    warm_up: bool = True
    aggregator: str = "mean"  # "mean" | "median"

    def __post_init__(self):
        if self.n_large <= self.n_small:
            raise MeasurementError("n-large must exceed n-small")
        if self.repetitions < 1:
            raise MeasurementError("repetitions must be >= 1")
        if self.aggregator not in ("mean", "median"):
            raise MeasurementError(f"unknown aggregator '{self.aggregator}'")

    def with_overrides(self, **kwargs) -> "MeasurementConfig":
        return replace(self, **kwargs)

    def describe(self) -> str:
        return (
            f"n_small={self.n_small},n_large={self.n_large},"
            f"reps={self.repetitions},warm_up={self.warm_up},agg={self.aggregator}"
        )


@dataclass(frozen=True)
class MeasurementResult:
    cycles_per_iteration: Fraction
    uops_per_port: dict  # port -> Fraction, per iteration
    total_uops_per_iteration: Fraction
    raw_spread: Fraction  # max - min of cycles across repetitions

    def uops_on(self, ports) -> Fraction:
        return sum((self.uops_per_port.get(p, Fraction(0)) for p in ports), Fraction(0))


class Backend(Protocol):
    """Measurement backend: executes a kernel and reads raw counters.

    The capability descriptor consists of ``ports`` (the per-port counters
    available) and the documented functional-unit port combinations.
    ``run`` executes the kernel body replicated ``n`` times (initialization
    happens once) and returns raw, uncorrected counters.  ``describe()``
    identifies the backend in result provenance.
    """

    ports: tuple[int, ...]

    def run(self, kernel: "Kernel", n: int, warm_up: bool = False): ...

    def port_combinations(self) -> list: ...

    def store_unit_combinations(self) -> set: ...

    def describe(self) -> str: ...


@dataclass
class SimulatorBackend:
    """Backend on top of the port-model simulator.

    ``overhead_cycles`` and ``overhead_uops`` emulate the fixed per-run cost
    of the measurement scaffolding on real hardware; the delta protocol must
    cancel them exactly, which is what makes them useful in tests.
    """

    machine: machine_mod.MachineSpec
    overhead_cycles: int = 0
    overhead_uops: dict = field(default_factory=dict)  # port -> count per run

    @property
    def ports(self) -> tuple[int, ...]:
        return self.machine.ports

    def port_combinations(self) -> list:
        return self.machine.port_combinations()

    def store_unit_combinations(self) -> set:
        return self.machine.store_unit_combinations()

    @property
    def spec_hash(self) -> str:
        return self.machine.spec_hash

    def run(self, kernel: "Kernel", n: int, warm_up: bool = False) -> machine_mod.CounterSnapshot:
        snap = machine_mod.execute(self.machine, kernel.repeat(n), warm_up=warm_up)
        if not self.overhead_cycles and not self.overhead_uops:
            return snap
        per_port = dict(snap.uops_per_port)
        extra = 0
        for port, count in self.overhead_uops.items():
            per_port[port] = per_port.get(port, 0) + count
            extra += count
        return machine_mod.CounterSnapshot(
            cycles=snap.cycles + self.overhead_cycles,
            uops_per_port=per_port,
            total_uops=snap.total_uops + extra,
        )

    def describe(self) -> str:
        return f"simulator:{self.machine.name}"


def _aggregate(values, how):
    if how == "median":
        return median(values)
    return sum(values, Fraction(0)) / len(values)


def run_delta(kernel: "Kernel", backend: Backend, config: MeasurementConfig | None = None) -> MeasurementResult:
    """Measure a kernel with the two-size delta protocol.

    Runs the kernel with ``n_small`` and ``n_large`` copies, divides the
    counter differences by ``n_large - n_small``, and aggregates over
    ``repetitions``.  An optional warm-up run precedes the measurements.
    """
    if config is None:
        config = MeasurementConfig()
    if config.warm_up:
        backend.run(kernel, config.n_small, warm_up=True)
    divisor = config.n_large - config.n_small
    cycles = []
    per_port = {p: [] for p in backend.ports}
    totals = []
    discarded = 0
    for _ in range(config.repetitions):
        small = backend.run(kernel, config.n_small)
        large = backend.run(kernel, config.n_large)
        if large.cycles < small.cycles or large.total_uops < small.total_uops:
            # a wrapped counter; drop the repetition
            discarded += 1
            continue
        cycles.append(Fraction(large.cycles - small.cycles, divisor))
        for p in backend.ports:
            delta = large.uops_per_port.get(p, 0) - small.uops_per_port.get(p, 0)
            per_port[p].append(Fraction(delta, divisor))
        totals.append(Fraction(large.total_uops - small.total_uops, divisor))
    if not cycles:
        raise MeasurementError(
            f"all {discarded} repetition(s) discarded (counter overflow?)"
        )
    return MeasurementResult(
        cycles_per_iteration=_aggregate(cycles, config.aggregator),
        uops_per_port={p: _aggregate(v, config.aggregator) for p, v in per_port.items()},
        total_uops_per_iteration=_aggregate(totals, config.aggregator),
        raw_spread=max(cycles) - min(cycles),
    )
