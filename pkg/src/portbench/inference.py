"""Characterization algorithms on top of an abstract measurement backend.

Port usage is inferred by saturating one port combination at a time with
blocking instructions and counting the probed instruction's uops that were
forced onto those ports anyway; combinations are visited smallest-first and
counts already attributed to strict subsets are subtracted.  Latencies come
from dependency chains per operand pair; throughput is both measured over
independent sequences and computed from the inferred port usage via an
exact LP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from . import bench, lp
from . import measure as measure_mod
from .catalog import Catalog, InstructionDesc


class InconsistencyError(Exception):
    """A measurement contradicts the model (bad blocking table, noisy
    backend, or a uop count off the integer grid)."""

    def __init__(self, message, instruction=None, raw=None):
        if instruction is not None:
            message = f"{instruction}: {message}"
        super().__init__(message)
        self.instruction = instruction
        self.raw = raw


@dataclass(frozen=True)
class AnalysisConfig:
    max_latency_cap: int = 32  # blockRep fallback when no pair is chainable
    block_rep_factor: int = 8
    count_tolerance: Fraction = Fraction(1, 10)
    port_threshold: Fraction = Fraction(1, 20)
    # reg->flags chain instructions have no self-chain; their latency is
    # assumed rather than calibrated
    flags_chain_latency: Fraction = Fraction(1)


@dataclass(frozen=True)
class PortUsage:
    """Counts of uops per port combination, canonically ordered."""

    entries: tuple  # ((frozenset, count), ...)

    @staticmethod
    def of(items) -> "PortUsage":
        if isinstance(items, dict):
            items = items.items()
        normalized = tuple(
            sorted(
                ((frozenset(combo), int(count)) for combo, count in items),
                key=lambda e: (len(e[0]), sorted(e[0])),
            )
        )
        combos = [c for c, _ in normalized]
        if len(set(combos)) != len(combos):
            raise ValueError("duplicate port combinations")
        if any(n <= 0 for _, n in normalized):
            raise ValueError("counts must be positive")
        return PortUsage(entries=normalized)

    @property
    def total_uops(self) -> int:
        return sum(n for _, n in self.entries)

    def as_dict(self) -> dict:
        return {combo: n for combo, n in self.entries}

    def __bool__(self) -> bool:
        return bool(self.entries)


@dataclass(frozen=True)
class SameRegisterLatency:
    cycles: Fraction
    kind: str  # "exact" | "zero-idiom-fast-path"


@dataclass(frozen=True)
class PairLatency:
    kind: str  # "exact" | "upper-bound" | "round-trip"
    cycles: Fraction
    chain: str
    value_classes: tuple = ()  # ((class name, cycles), ...) for dividers
    same_register: SameRegisterLatency | None = None


@dataclass
class LatencyResult:
    pairs: dict  # (src, dst) -> PairLatency
    omitted: dict = field(default_factory=dict)  # (src, dst) -> reason

    def max_latency(self) -> Fraction | None:
        values = []
        for pair in self.pairs.values():
            values.append(pair.cycles)
            values.extend(c for _, c in pair.value_classes)
            if pair.same_register is not None:
                values.append(pair.same_register.cycles)
        return max(values) if values else None


@dataclass(frozen=True)
class MeasuredThroughput:
    cycles: Fraction
    sequence: str  # winning variant label
    value_classes: tuple = ()  # ((class name, cycles), ...) for dividers


@dataclass(frozen=True)
class ThroughputResult:
    measured: MeasuredThroughput
    computed: Fraction | None  # None: not computable (divider instruction)
    computed_reason: str | None = None


class ChainCalibrator:
    """Measures chain-instruction latencies once per backend via self-chains.

    Chains without a self-chain (pure flag writers) fall back to the
    configured assumed latency.
    """

    def __init__(self, catalog, backend, mconfig, aconfig=None):
        self.catalog = catalog
        self.backend = backend
        self.mconfig = mconfig
        self.aconfig = aconfig or AnalysisConfig()
        self._cache = {}

    def latency(self, chain_id: str) -> Fraction:
        if chain_id not in self._cache:
            kernel = bench.make_self_chain_kernel(self.catalog.get(chain_id), self.catalog)
            if kernel is None:
                self._cache[chain_id] = self.aconfig.flags_chain_latency
            else:
                result = measure_mod.run_delta(kernel, self.backend, self.mconfig)
                self._cache[chain_id] = result.cycles_per_iteration
        return self._cache[chain_id]


def _round_count(value: Fraction, tolerance: Fraction, context, instruction, raw):
    nearest = int(math.floor(value + Fraction(1, 2)))
    if abs(value - nearest) > tolerance or nearest < 0:
        raise InconsistencyError(
            f"{context}: measured uop count {value} is not a non-negative "
            f"integer within tolerance {tolerance}",
            instruction=instruction,
            raw=raw,
        )
    return nearest


# ---------------------------------------------------------------------------
# Port usage (blocking-instruction probing)


def infer_port_usage(
    instr: InstructionDesc,
    backend,
    table: bench.BlockingTable,
    max_latency,
    catalog: Catalog,
    mconfig=None,
    aconfig=None,
) -> PortUsage:
    """Attribute every uop of ``instr`` to the exact set of ports able to
    execute it.

    Combinations are probed smallest-first; only combinations whose ports
    showed up in an isolation run are visited, and probing stops early once
    all uops are attributed.
    """
    mconfig = mconfig or measure_mod.MeasurementConfig()
    aconfig = aconfig or AnalysisConfig()
    _, iso_ports, _ = bench.measure_isolation(instr, catalog, backend, mconfig)
    executed = sum(iso_ports.values(), Fraction(0))
    total = _round_count(
        executed, aconfig.count_tolerance, "isolation run", instr.id, iso_ports
    )
    observed = {p for p, v in iso_ports.items() if v > aconfig.port_threshold}

    block_rep = aconfig.block_rep_factor * max(
        1, int(math.ceil(max_latency if max_latency is not None else aconfig.max_latency_cap))
    )
    attributed = []
    for pc in backend.port_combinations():
        if not pc <= observed:
            continue
        if sum(n for _, n in attributed) >= total:
            break
        kernel = bench.make_port_probe(instr, pc, block_rep, table, catalog)
        result = measure_mod.run_delta(kernel, backend, mconfig)
        remainder = result.uops_on(pc) - block_rep
        for sub_pc, sub_n in attributed:
            if sub_pc < pc:
                remainder -= sub_n
        count = _round_count(
            remainder,
            aconfig.count_tolerance,
            f"probe of {{{','.join(map(str, sorted(pc)))}}}",
            instr.id,
            result,
        )
        if count > 0:
            attributed.append((pc, count))

    usage = PortUsage.of(attributed)
    if usage.total_uops != total:
        raise InconsistencyError(
            f"attributed {usage.total_uops} uops but isolation shows {total} "
            "(incomplete blocking table?)",
            instruction=instr.id,
            raw=attributed,
        )
    return usage


# ---------------------------------------------------------------------------
# Latency


def infer_latency(
    instr: InstructionDesc,
    backend,
    catalog: Catalog,
    mconfig=None,
    aconfig=None,
    calibrator: ChainCalibrator | None = None,
) -> LatencyResult:
    """Per operand-pair latencies from dependency chains.

    Cross-class pairs are upper bounds (minimum over chain compositions
    minus one); store destinations are reported as store-load round trips;
    divider instructions carry fast/slow value-class results; same-register
    variants are reported alongside since they may legitimately differ.
    """
    mconfig = mconfig or measure_mod.MeasurementConfig()
    aconfig = aconfig or AnalysisConfig()
    if calibrator is None:
        calibrator = ChainCalibrator(catalog, backend, mconfig, aconfig)

    result = LatencyResult(pairs={})
    for sop in instr.operands:
        if not sop.is_read or sop.kind == "immediate":
            continue
        for dop in instr.operands:
            if not dop.is_write:
                continue
            pair = (sop.index, dop.index)
            plan = bench.make_latency_kernels(instr, sop.index, dop.index, catalog)
            if not plan.probes:
                result.omitted[pair] = plan.unchainable or "unchainable pair"
                continue
            exact = {}  # value class (or None) -> (cycles, label)
            uppers = []
            round_trips = []
            same_reg = None
            for probe in plan.probes:
                m = measure_mod.run_delta(probe.kernel, backend, mconfig)
                cycles = m.cycles_per_iteration / probe.occurrences
                for chain_id in probe.subtract:
                    cycles -= calibrator.latency(chain_id)
                if probe.same_register:
                    if same_reg is None or cycles < same_reg[0]:
                        same_reg = (cycles, probe.label)
                elif probe.kind == "round-trip":
                    round_trips.append((cycles, probe.label))
                elif probe.kind == "upper-bound":
                    uppers.append((cycles, probe.label))
                else:
                    key = probe.value_class
                    if key not in exact or cycles < exact[key][0]:
                        exact[key] = (cycles, probe.label)

            entry = None
            if exact:
                classes = {k: v for k, v in exact.items() if k is not None}
                if classes:
                    value_classes = tuple(sorted(
                        (name, cycles) for name, (cycles, _) in classes.items()
                    ))
                    worst = max(classes.values(), key=lambda v: v[0])
                    entry = PairLatency(
                        kind="exact",
                        cycles=worst[0],
                        chain=worst[1],
                        value_classes=value_classes,
                    )
                else:
                    cycles, label = exact[None]
                    entry = PairLatency(kind="exact", cycles=cycles, chain=label)
            elif uppers:
                cycles, label = min(uppers)
                entry = PairLatency(
                    kind="upper-bound", cycles=cycles - 1, chain=label
                )
            elif round_trips:
                cycles, label = min(round_trips)
                entry = PairLatency(kind="round-trip", cycles=cycles, chain=label)

            if entry is None and same_reg is None:
                result.omitted[pair] = plan.unchainable or "no usable probe"
                continue
            if same_reg is not None:
                sr_cycles = same_reg[0]
                # a real dependency costs at least one cycle per link; below
                # that (and below the different-register chain) it is broken
                reference = entry.cycles if entry is not None else None
                broken = sr_cycles < 1 and (reference is None or sr_cycles < reference)
                sr = SameRegisterLatency(
                    cycles=sr_cycles,
                    kind="zero-idiom-fast-path" if broken else "exact",
                )
                if entry is None:
                    entry = PairLatency(
                        kind="exact", cycles=sr_cycles, chain=same_reg[1],
                        same_register=sr,
                    )
                else:
                    entry = PairLatency(
                        kind=entry.kind,
                        cycles=entry.cycles,
                        chain=entry.chain,
                        value_classes=entry.value_classes,
                        same_register=sr,
                    )
            result.pairs[pair] = entry
    return result


# ---------------------------------------------------------------------------
# Throughput


def measure_throughput(
    instr: InstructionDesc, backend, catalog: Catalog, mconfig=None
) -> MeasuredThroughput:
    """Minimum cycles per instruction over all generated sequences (lengths
    1/2/4/8, with and without dependency breakers, per value class for
    divider instructions); longer sequences may legitimately lose."""
    mconfig = mconfig or measure_mod.MeasurementConfig()
    best = {}  # value class (or None) -> (cycles, label)
    for kernel, label, length, value_class in bench.make_throughput_kernels(instr, catalog):
        m = measure_mod.run_delta(kernel, backend, mconfig)
        cycles = m.cycles_per_iteration / length
        if value_class not in best or cycles < best[value_class][0]:
            best[value_class] = (cycles, label)
    classes = {k: v for k, v in best.items() if k is not None}
    if classes:
        value_classes = tuple(sorted((k, v[0]) for k, v in classes.items()))
        overall = min(classes.values())
        return MeasuredThroughput(
            cycles=overall[0], sequence=overall[1], value_classes=value_classes
        )
    cycles, label = best[None]
    return MeasuredThroughput(cycles=cycles, sequence=label)


def compute_throughput(pu: PortUsage, divider: bool = False) -> Fraction | None:
    """Throughput from port usage alone: the optimal value of the load-
    balancing LP.  Not computable for divider instructions (the divider is
    not pipelined, so port pressure does not bound the issue rate)."""
    if divider:
        return None
    if not pu:
        return Fraction(0)
    ports = sorted(set().union(*[combo for combo, _ in pu.entries]))
    return lp.solve(lp.LPInstance(ports=tuple(ports), entries=pu.entries))


# ---------------------------------------------------------------------------
# Zero idioms


def detect_zero_idiom(
    instr: InstructionDesc, backend, catalog: Catalog, mconfig=None, aconfig=None
) -> bool:
    """True when a same-register self-chain runs at its throughput bound
    instead of its latency bound: the instruction breaks the dependency on
    its register operands.

    A dependent chain cannot run faster than one cycle per link, so a
    same-register chain below one cycle per link (and below the measured
    different-register latency) means the dependency is gone.
    """
    by_kind = {}
    for op in instr.register_operands():
        by_kind.setdefault(op.kind, []).append(op)
    group = next((ops for ops in by_kind.values() if len(ops) >= 2), None)
    if group is None:
        raise ValueError(f"{instr.id}: needs two same-class register operands")
    mconfig = mconfig or measure_mod.MeasurementConfig()
    aconfig = aconfig or AnalysisConfig()
    calibrator = ChainCalibrator(catalog, backend, mconfig, aconfig)

    srcs = [op for op in group if op.is_read]
    dsts = [op for op in group if op.is_write]
    if not srcs or not dsts:
        return False
    dst = dsts[0].index
    # a distinct source pair carries the same-register variant
    src = next((op.index for op in srcs if op.index != dst), srcs[0].index)
    plan = bench.make_latency_kernels(instr, src, dst, catalog)
    same_reg = None
    reference = None
    for probe in plan.probes:
        m = measure_mod.run_delta(probe.kernel, backend, mconfig)
        cycles = m.cycles_per_iteration / probe.occurrences
        for chain_id in probe.subtract:
            cycles -= calibrator.latency(chain_id)
        if probe.same_register:
            same_reg = cycles if same_reg is None else min(same_reg, cycles)
        elif probe.kind == "exact":
            reference = cycles if reference is None else min(reference, cycles)
    if same_reg is None:
        return False
    if same_reg >= 1:
        return False
    return reference is None or same_reg < reference
