"""Kernel data model: a concrete straight-line benchmark.

A kernel is an ordered list of instruction instances with fully bound
operands (register names, memory slots, immediates) plus initial value-class
assignments for registers and memory.  Kernels are produced by the benchmark
generators and consumed by measurement backends.
"""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class RegBinding:
    """A register operand binding.  ``family`` is the renaming unit; ``name``
    is the width-specific architectural name used in listings."""

    name: str
    family: str


@dataclass(frozen=True)
class MemBinding:
    """A memory operand binding: an abstract slot addressed via a base
    register plus a constant displacement (no index/scale).  Distinct slots
    have distinct (base, offset) pairs and therefore distinct addresses."""

    slot: str
    base: RegBinding
    offset: int = 0


@dataclass(frozen=True)
class ImmBinding:
    value: int


@dataclass(frozen=True)
class FlagsBinding:
    """Status-flags pseudo-binding; all flags live in one rename location."""


Binding = RegBinding | MemBinding | ImmBinding | FlagsBinding

FLAGS_LOCATION = "FLAGS"


@dataclass(frozen=True)
class Instance:
    instr_id: str
    bindings: tuple[Binding, ...]  # one per operand, in operand order


@dataclass(frozen=True)
class InitEntry:
    """Initial state for a register family or memory slot.

    ``value_class`` is a value-class tag ("fast"/"slow" for divider inputs)
    or a descriptive token such as "own-address" for self-addressing slots.
    """

    location: str
    value_class: str


@dataclass(frozen=True)
class ChainMeta:
    """How to turn measured cycles into a latency: the chain instruction
    closing the dependency cycle (if any), the number of occurrences of the
    instruction under test per kernel body, and the chain instructions whose
    calibrated latencies must be subtracted per link."""

    chain_instruction: str | None
    occurrences: int
    subtract: tuple[str, ...] = ()


@dataclass(frozen=True)
class Kernel:
    instances: tuple[Instance, ...]
    init: tuple[InitEntry, ...] = ()
    chain_meta: ChainMeta | None = None
    notes: tuple[str, ...] = ()  # e.g. register-pressure fallback markers

    def repeat(self, n: int) -> "Kernel":
        """The kernel body concatenated ``n`` times (init stays single)."""
        if n == 1:
            return self
        return replace(self, instances=self.instances * n)

    def __len__(self) -> int:
        return len(self.instances)


def _format_binding(binding: Binding) -> str:
    if isinstance(binding, RegBinding):
        return binding.name
    if isinstance(binding, MemBinding):
        if binding.offset:
            return f"[{binding.base.name}+{binding.offset}]"
        return f"[{binding.base.name}]"
    if isinstance(binding, ImmBinding):
        return str(binding.value)
    raise ValueError(f"cannot format binding {binding!r}")


def format_kernel(kernel: Kernel, catalog) -> str:
    """Assembler-like listing of a kernel (Intel operand order).

    Implicit operands are omitted, as an assembler would.  Initial state is
    listed as comments up front.
    """
    lines = []
    for entry in kernel.init:
        lines.append(f"; init {entry.location} = {entry.value_class}")
    for inst in kernel.instances:
        desc = catalog.get(inst.instr_id)
        rendered = [
            _format_binding(binding)
            for op, binding in zip(desc.operands, inst.bindings)
            if not op.implicit
        ]
        if rendered:
            lines.append(f"{desc.mnemonic} {', '.join(rendered)}")
        else:
            lines.append(desc.mnemonic)
    return "\n".join(lines)
