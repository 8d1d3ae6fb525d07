"""Benchmark kernel generators.

Builds every kind of benchmark the characterization needs: blocking-instruction
tables, port-usage probes, latency dependency chains for each operand-pair
shape, dependency breakers, and throughput sequences.  Generation is pure:
given the same catalog and instruction, the same kernels come out.

Register allocation is a deterministic rotation over each register class.
The last two families of every class are kept out of the rotation: the
second-to-last serves as the shared memory base register, the last as
scratch for dependency breakers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

from .catalog import (
    Catalog,
    InstructionDesc,
    KIND_TO_CLASS,
    OperandSpec,
    REGISTER_KINDS,
    blocking_candidates,
)
from .kernel import (
    ChainMeta,
    FlagsBinding,
    ImmBinding,
    InitEntry,
    Instance,
    Kernel,
    MemBinding,
    RegBinding,
)
from . import measure as measure_mod


class GenerationError(Exception):
    pass


class UncoverableCombinationError(GenerationError):
    """No blocking instruction exists for one or more port combinations."""

    def __init__(self, combos, isa_class):
        self.combos = [tuple(sorted(c)) for c in combos]
        self.isa_class = isa_class
        listing = ", ".join("{" + ",".join(map(str, c)) + "}" for c in self.combos)
        super().__init__(f"uncoverable port combination(s) for {isa_class}: {listing}")


AND_MNEMONICS = {"AND", "PAND", "ANDPS", "ANDPD", "VPAND", "VANDPS", "VANDPD"}
OR_MNEMONICS = {"OR", "POR", "ORPS", "ORPD", "VPOR", "VORPS", "VORPD"}
XOR_MNEMONICS = {"XOR"}

SLOT_STRIDE = 64  # bytes between memory slots; one cache line apart


def _isa_compatible(candidate: InstructionDesc, instr: InstructionDesc) -> bool:
    return candidate.isa_class == "GP" or candidate.isa_class == instr.isa_class


def _fixed_families(catalog: Catalog, *instrs) -> set:
    """Families pinned by implicit fixed-register operands; the allocation
    rotation must never hand these out."""
    families = set()
    for instr in instrs:
        for op in instr.operands:
            if op.fixed_register is not None:
                families.add(catalog.family_of(op.fixed_register))
    return families


def _builder_for(catalog: Catalog, *instrs) -> "KernelBuilder":
    return KernelBuilder(catalog, avoid_families=_fixed_families(catalog, *instrs))


class RegisterPool:
    """Deterministic rotation over the usable families of one class.

    When more registers are requested than exist, the rotation wraps around,
    reusing registers with maximal distance; the kernel is flagged so the
    pressure is visible in its metadata.
    """

    def __init__(self, families, avoid=()):
        self._families = [f.family for f in families if f.family not in avoid]
        self._next = 0
        self.reused = False

    def take(self) -> str:
        if not self._families:
            raise GenerationError("register class exhausted")
        family = self._families[self._next % len(self._families)]
        self._next += 1
        if self._next > len(self._families):
            self.reused = True
        return family

    def reserve(self) -> str:
        """Take a family out of the rotation permanently.  Shared read-only
        sources must never be clobbered when the write rotation wraps."""
        if not self._families:
            raise GenerationError("register class exhausted")
        return self._families.pop(self._next % len(self._families))


class KernelBuilder:
    def __init__(self, catalog: Catalog, avoid_families=()):
        self.catalog = catalog
        self.instances = []
        self.init = {}
        self.notes = set()
        self._pools = {}
        self._avoid = set(avoid_families)
        self._slots = 0

    def pool(self, class_name: str) -> RegisterPool:
        if class_name not in self._pools:
            self._pools[class_name] = RegisterPool(
                self.catalog.usable_families(class_name), avoid=self._avoid
            )
        return self._pools[class_name]

    def take_family(self, op: OperandSpec) -> str:
        return self.pool(KIND_TO_CLASS[op.kind]).take()

    def reg(self, op: OperandSpec, family: str) -> RegBinding:
        return RegBinding(
            name=self.catalog.register_name(op.kind, op.width, family), family=family
        )

    def scratch(self, class_name: str, width: int) -> RegBinding:
        defs = self.catalog.families(class_name)
        if not defs:
            raise GenerationError(f"no registers in class '{class_name}'")
        rdef = defs[-1]
        name = rdef.name_for_width(width)
        if name is None:
            raise GenerationError(f"no {width}-bit scratch register in '{class_name}'")
        return RegBinding(name=name, family=rdef.family)

    def mem_base(self) -> RegBinding:
        defs = self.catalog.families("gp")
        if len(defs) < 2:
            raise GenerationError("need at least two gp families for memory bases")
        rdef = defs[-2]
        return RegBinding(name=rdef.name_for_width(64), family=rdef.family)

    def new_mem(self, base: RegBinding | None = None) -> MemBinding:
        slot = f"mem{self._slots}"
        offset = self._slots * SLOT_STRIDE
        self._slots += 1
        if base is None:
            base = self.mem_base()
        return MemBinding(slot=slot, base=base, offset=offset)

    def bind(self, instr: InstructionDesc, overrides=None) -> Instance:
        """Bind an instance; ``overrides`` maps operand index to a binding or
        to a register family name.  Unlisted register operands get fresh
        (written) or scratch (read-only) registers."""
        overrides = overrides or {}
        bindings = []
        for op in instr.operands:
            if op.index in overrides:
                value = overrides[op.index]
                bindings.append(
                    self.reg(op, value) if isinstance(value, str) else value
                )
                continue
            if op.kind == "flags":
                bindings.append(FlagsBinding())
            elif op.kind == "immediate":
                bindings.append(ImmBinding(1))
            elif op.kind == "memory":
                bindings.append(self.new_mem())
            elif op.fixed_register is not None:
                family = self.catalog.family_of(op.fixed_register)
                bindings.append(self.reg(op, family))
            elif op.is_write:
                bindings.append(self.reg(op, self.take_family(op)))
            else:
                bindings.append(self.scratch(KIND_TO_CLASS[op.kind], op.width))
        inst = Instance(instr_id=instr.id, bindings=tuple(bindings))
        self.instances.append(inst)
        return inst

    def add(self, inst: Instance):
        self.instances.append(inst)

    def set_init(self, location: str, value_class: str):
        self.init[location] = value_class

    def build(self, chain_meta: ChainMeta | None = None) -> Kernel:
        notes = set(self.notes)
        if any(pool.reused for pool in self._pools.values()):
            notes.add("register-pressure: rotation reused registers")
        return Kernel(
            instances=tuple(self.instances),
            init=tuple(
                InitEntry(location=loc, value_class=vc)
                for loc, vc in sorted(self.init.items())
            ),
            chain_meta=chain_meta,
            notes=tuple(sorted(notes)),
        )


# ---------------------------------------------------------------------------
# Structural instruction searches


def _plain_register_move(instr: InstructionDesc, src_kind=None, dst_kind=None):
    """Match `dst <- src` register-to-register shapes usable as chain links:
    one written register, one read register, optionally immediates, nothing
    else (no memory, no flags, no implicit operands)."""
    if instr.attributes & {
        "system",
        "serializing",
        "pause-like",
        "control-flow-on-register",
        "uses-divider",
        "zero-idiom",
        "move-elimination-capable",
        "zero-latency-capable",
    }:
        return None
    dst = None
    src = None
    for op in instr.operands:
        if op.kind == "immediate":
            continue
        if op.implicit or not op.is_register:
            return None
        if op.access == "write" and dst is None:
            dst = op
        elif op.access == "read" and src is None:
            src = op
        else:
            return None
    if dst is None or src is None:
        return None
    if src_kind is not None and src.kind != src_kind:
        return None
    if dst_kind is not None and dst.kind != dst_kind:
        return None
    return (dst, src)


def chain_candidates(
    catalog: Catalog, instr: InstructionDesc, src_op: OperandSpec, dst_op: OperandSpec
) -> list[tuple[InstructionDesc, OperandSpec, OperandSpec]]:
    """Chain instructions closing a cycle from ``dst_op`` back to ``src_op``:
    they read a register of dst's type and write one of src's type."""
    out = []
    for cand in catalog.instructions:
        if not _isa_compatible(cand, instr):
            continue
        shape = _plain_register_move(cand)
        if shape is None:
            continue
        c_dst, c_src = shape
        if KIND_TO_CLASS[c_src.kind] != KIND_TO_CLASS[dst_op.kind]:
            continue
        if KIND_TO_CLASS[c_dst.kind] != KIND_TO_CLASS[src_op.kind]:
            continue
        if c_src.kind != dst_op.kind or c_dst.kind != src_op.kind:
            continue
        # the chain write must cover the register the instruction reads
        if c_dst.kind == "gp-register":
            if c_dst.width < src_op.width:
                continue
        elif c_dst.width != src_op.width:
            continue
        if c_src.kind != "gp-register" and c_src.width != dst_op.width:
            continue
        out.append((cand, c_dst, c_src))
    return out


def _gp_chain(catalog, instr, src_op, dst_op):
    """The sign-extension-style chain for GP pairs: prefer widening moves
    (immune to move elimination and partial-register stalls)."""
    cands = chain_candidates(catalog, instr, src_op, dst_op)
    if not cands:
        return None
    widening = [c for c in cands if c[2].width < c[1].width]
    pool = widening or cands
    return max(pool, key=lambda c: (c[2].width, c[0].id))


def find_mnemonic(catalog, mnemonics, operand_kind, width, isa_class):
    """Read-write `op, src` instructions selected by mnemonic (the AND/OR/XOR
    idioms have semantics structure alone cannot express)."""
    for instr in catalog.instructions:
        if instr.mnemonic not in mnemonics:
            continue
        regs = [op for op in instr.operands if op.is_register]
        if len(regs) < 2:
            continue
        first, second = regs[0], regs[1]
        if first.kind != operand_kind or first.access != "read-write":
            continue
        if second.kind != operand_kind or second.access != "read":
            continue
        if first.width != width:
            continue
        if isa_class == "GP" and instr.isa_class != "GP":
            continue
        if isa_class != "GP" and instr.isa_class not in ("GP", isa_class):
            continue
        return instr
    return None


def find_flags_writer(catalog, isa_class="GP"):
    """TEST-style chain/breaker: reads registers, writes only the flags."""
    best = None
    for instr in catalog.instructions:
        flags = instr.flags_operand
        if flags is None or flags.access != "write":
            continue
        if instr.memory_operand is not None:
            continue
        regs = instr.register_operands()
        if not regs or any(op.access != "read" for op in regs):
            continue
        if any(op.kind != "gp-register" for op in regs):
            continue
        if instr.attributes:
            continue
        if instr.mnemonic == "TEST":
            return instr
        if best is None or instr.id < best.id:
            best = instr
    return best


def find_register_breaker(catalog, kind, isa_class):
    """An instruction that writes a register of ``kind`` without reading it:
    immediate moves preferred, plain register copies otherwise.  Flag-writing
    candidates are rejected so breakers never clobber the flags."""
    best = None
    for instr in catalog.instructions:
        if not _isa_compatible_class(instr, isa_class):
            continue
        if instr.flags_operand is not None or instr.memory_operand is not None:
            continue
        if instr.attributes & {
            "system",
            "serializing",
            "pause-like",
            "control-flow-on-register",
            "uses-divider",
            "zero-idiom",
        }:
            continue
        ops = instr.operands
        if not ops or ops[0].kind != kind or ops[0].access != "write" or ops[0].implicit:
            continue
        rest = ops[1:]
        if any(op.is_write for op in rest):
            continue
        imm_only = all(op.kind == "immediate" for op in rest)
        key = (0 if imm_only else 1, instr.id)
        if best is None or key < best[0]:
            best = (key, instr)
    return best[1] if best else None


def _isa_compatible_class(instr: InstructionDesc, isa_class: str) -> bool:
    return instr.isa_class == "GP" or instr.isa_class == isa_class


def find_store_breaker(catalog):
    for instr in catalog.instructions:
        mem = instr.memory_operand
        if mem is None or mem.access != "write":
            continue
        rest = [op for op in instr.operands if op.kind != "memory"]
        if all(op.kind == "immediate" for op in rest):
            return instr
    return None


def find_load(catalog, reg_kind, reg_width, isa_class):
    """`reg <- mem` loads for the store round trip."""
    for instr in catalog.instructions:
        if not _isa_compatible_class(instr, isa_class):
            continue
        mem = instr.memory_operand
        if mem is None or mem.access != "read":
            continue
        writes = [op for op in instr.operands if op.is_write and op is not mem]
        reads = [op for op in instr.operands if op.is_read and op is not mem]
        if reads or len(writes) != 1:
            continue
        dst = writes[0]
        if dst.kind == reg_kind and dst.width == reg_width and dst.access == "write":
            return instr
    return None


def find_store(catalog, reg_kind, reg_width, isa_class):
    """`mem <- reg` stores (also the blocking instruction for store units)."""
    for instr in catalog.instructions:
        if not _isa_compatible_class(instr, isa_class):
            continue
        mem = instr.memory_operand
        if mem is None or mem.access != "write":
            continue
        others = [op for op in instr.operands if op is not mem and op.kind != "flags"]
        if len(others) != 1:
            continue
        src = others[0]
        if src.kind == reg_kind and src.width == reg_width and src.access == "read":
            return instr
    return None


def validate_breaker_support(catalog: Catalog):
    """Check at startup that the catalog provides the auxiliary instructions
    dependency breaking relies on."""
    missing = []
    if find_register_breaker(catalog, "gp-register", "GP") is None:
        missing.append("gp register breaker (move-immediate)")
    if find_flags_writer(catalog) is None:
        missing.append("flags breaker (TEST-style)")
    if missing:
        raise GenerationError("catalog lacks breaker instructions: " + "; ".join(missing))


# ---------------------------------------------------------------------------
# Dependency breakers


def make_dep_breaker(
    operand: OperandSpec, catalog: Catalog, binding, isa_class: str = "GP"
) -> Instance:
    """An instance that overwrites ``binding`` without reading it."""
    if operand.kind == "flags":
        writer = find_flags_writer(catalog)
        if writer is None:
            raise GenerationError("no flags-breaking instruction in catalog")
        bindings = []
        for op in writer.operands:
            if op.kind == "flags":
                bindings.append(FlagsBinding())
            else:
                defs = catalog.families("gp")
                scratch = defs[-1]
                bindings.append(
                    RegBinding(name=scratch.name_for_width(op.width), family=scratch.family)
                )
        return Instance(instr_id=writer.id, bindings=tuple(bindings))
    if operand.kind == "memory":
        writer = find_store_breaker(catalog)
        if writer is None:
            raise GenerationError("no immediate-store instruction in catalog")
        bindings = [
            binding if op.kind == "memory" else ImmBinding(0)
            for op in writer.operands
        ]
        return Instance(instr_id=writer.id, bindings=tuple(bindings))
    if operand.kind in REGISTER_KINDS:
        writer = find_register_breaker(catalog, operand.kind, isa_class)
        if writer is None:
            raise GenerationError(f"no breaker writes a {operand.kind} operand")
        bindings = []
        for op in writer.operands:
            if op.index == 0:
                name = catalog.register_name(op.kind, op.width, binding.family)
                bindings.append(RegBinding(name=name, family=binding.family))
            elif op.kind == "immediate":
                bindings.append(ImmBinding(0))
            else:
                defs = catalog.families(KIND_TO_CLASS[op.kind])
                scratch = defs[-1]
                bindings.append(
                    RegBinding(name=scratch.name_for_width(op.width), family=scratch.family)
                )
        return Instance(instr_id=writer.id, bindings=tuple(bindings))
    raise GenerationError(f"cannot break dependencies on {operand.kind} operands")


# ---------------------------------------------------------------------------
# Independent sequences (throughput, isolation, blocking-table measurement)


def independent_sequence_kernel(
    instr: InstructionDesc,
    catalog: Catalog,
    length: int,
    with_breakers: bool = False,
    value_class: str | None = None,
) -> Kernel:
    """``length`` instances with pairwise-independent bindings: written
    registers are distinct per instance, read-only registers are shared (a
    value that is never written creates no dependency edges)."""
    builder = _builder_for(catalog, instr)
    shared = {}
    for op in instr.operands:
        if op.is_register and not op.is_write and op.fixed_register is None:
            shared[op.index] = builder.pool(KIND_TO_CLASS[op.kind]).reserve()
    breaker_targets = [
        op for op in instr.operands if op.implicit and op.access == "read-write"
    ]
    for _ in range(length):
        overrides = dict(shared)
        inst = builder.bind(instr, overrides)
        if with_breakers:
            for op in breaker_targets:
                builder.add(
                    make_dep_breaker(
                        op, catalog, inst.bindings[op.index], instr.isa_class
                    )
                )
    if value_class is not None:
        for inst in [i for i in builder.instances if i.instr_id == instr.id]:
            for op in instr.operands:
                if op.is_read and op.is_register:
                    builder.set_init(inst.bindings[op.index].family, value_class)
    return builder.build()


def make_throughput_kernels(instr: InstructionDesc, catalog: Catalog):
    """All throughput sequence variants: lengths 1/2/4/8, with dependency
    breakers when implicit read-write operands force them, and fast/slow
    value classes for divider instructions."""
    has_implicit_rw = any(
        op.implicit and op.access == "read-write" for op in instr.operands
    )
    classes = ["fast", "slow"] if instr.has_attribute("uses-divider") else [None]
    variants = []
    for value_class in classes:
        for with_breakers in ([False, True] if has_implicit_rw else [False]):
            for length in (1, 2, 4, 8):
                label = f"len={length}"
                if with_breakers:
                    label += "+breakers"
                if value_class:
                    label += f",{value_class}"
                variants.append(
                    (
                        independent_sequence_kernel(
                            instr, catalog, length,
                            with_breakers=with_breakers, value_class=value_class,
                        ),
                        label,
                        length,
                        value_class,
                    )
                )
    return variants


# ---------------------------------------------------------------------------
# Blocking tables and port probes


@dataclass(frozen=True)
class BlockingEntry:
    instr_id: str
    two_uop: bool
    cycles_per_instruction: Fraction


@dataclass
class BlockingTable:
    isa_class: str
    entries: dict  # frozenset of ports -> BlockingEntry

    def entry(self, combo: frozenset) -> BlockingEntry:
        try:
            return self.entries[combo]
        except KeyError:
            raise UncoverableCombinationError([combo], self.isa_class) from None


_ISOLATION_LENGTH = 8
_PORT_THRESHOLD = Fraction(1, 20)


def measure_isolation(instr, catalog, backend, config):
    """Per-instance counters of the instruction run on its own."""
    kernel = independent_sequence_kernel(instr, catalog, _ISOLATION_LENGTH)
    result = measure_mod.run_delta(kernel, backend, config)
    n = _ISOLATION_LENGTH
    return (
        result.cycles_per_iteration / n,
        {p: v / n for p, v in result.uops_per_port.items()},
        result.total_uops_per_iteration / n,
    )


def build_blocking_table(
    catalog: Catalog, backend, isa_class: str, config=None
) -> BlockingTable:
    """Group 1-uop candidates by the ports they use in isolation and pick the
    highest-throughput member of each group; store-unit combinations are
    covered by the register-to-memory move (2 uops: store data + address)."""
    config = config or measure_mod.MeasurementConfig()
    groups = {}
    measured = {}
    for cand in blocking_candidates(catalog, isa_class):
        cycles, per_port, total = measure_isolation(cand, catalog, backend, config)
        measured[cand.id] = (cycles, per_port, total)
        if abs(total - 1) > Fraction(1, 10):
            continue
        ports = frozenset(p for p, v in per_port.items() if v > _PORT_THRESHOLD)
        if not ports:
            continue
        groups.setdefault(ports, []).append((cycles, cand.id))

    entries = {}
    uncovered = []
    store_combos = set(getattr(backend, "store_unit_combinations", lambda: set())())
    for combo in backend.port_combinations():
        if combo in groups:
            cycles, instr_id = min(groups[combo])
            entries[combo] = BlockingEntry(
                instr_id=instr_id, two_uop=False, cycles_per_instruction=cycles
            )
            continue
        if combo in store_combos:
            store = None
            for width in (64, 128, 256):
                store = store or find_store(catalog, "gp-register", width, isa_class)
            if store is not None:
                cycles, per_port, total = measured.get(
                    store.id
                ) or measure_isolation(store, catalog, backend, config)
                ports = frozenset(p for p, v in per_port.items() if v > _PORT_THRESHOLD)
                if combo <= ports:
                    entries[combo] = BlockingEntry(
                        instr_id=store.id, two_uop=True, cycles_per_instruction=cycles
                    )
                    continue
        uncovered.append(combo)
    if uncovered:
        raise UncoverableCombinationError(uncovered, isa_class)
    return BlockingTable(isa_class=isa_class, entries=entries)


def make_port_probe(
    instr: InstructionDesc,
    pc: frozenset,
    block_rep: int,
    table: BlockingTable,
    catalog: Catalog,
) -> Kernel:
    """``block_rep`` copies of the blocking instruction followed by one
    instance of ``instr``; blocker operands are independent of the probed
    instruction and of each other."""
    if block_rep < 1:
        raise GenerationError("block_rep must be >= 1")
    entry = table.entry(pc)
    blocker = catalog.get(entry.instr_id)
    # bind the probed instruction first so blockers avoid its registers
    probe_builder = _builder_for(catalog, instr)
    probe_inst = probe_builder.bind(instr)
    used = set()
    for b in probe_inst.bindings:
        if isinstance(b, RegBinding):
            used.add(b.family)
        elif isinstance(b, MemBinding):
            used.add(b.base.family)
    builder = KernelBuilder(catalog, avoid_families=used)
    builder._slots = probe_builder._slots  # keep slot addresses distinct
    builder.init.update(probe_builder.init)
    builder.notes.update(probe_builder.notes)
    shared = {}
    for op in blocker.operands:
        if op.is_register and not op.is_write and op.fixed_register is None:
            shared[op.index] = builder.pool(KIND_TO_CLASS[op.kind]).reserve()
    for _ in range(block_rep):
        builder.bind(blocker, dict(shared))
    builder.add(probe_inst)
    return builder.build()


# ---------------------------------------------------------------------------
# Latency chains


@dataclass(frozen=True)
class LatencyProbe:
    kernel: Kernel
    label: str
    kind: str  # "exact" | "upper-bound" | "round-trip"
    chain_instruction: str | None
    subtract: tuple[str, ...] = ()  # calibrated chain latencies to subtract
    occurrences: int = 1
    same_register: bool = False
    value_class: str | None = None


@dataclass
class LatencyPlan:
    src: int
    dst: int
    probes: list
    unchainable: str | None = None


def _probe(builder, meta_chain, **kw) -> LatencyProbe:
    kernel = builder.build(
        chain_meta=ChainMeta(
            chain_instruction=meta_chain,
            occurrences=kw.get("occurrences", 1),
            subtract=kw.get("subtract", ()),
        )
    )
    return LatencyProbe(kernel=kernel, chain_instruction=meta_chain, **kw)


def _off_path_breakers(builder, instr, catalog, inst, on_path):
    """Breakers for read-write operands off the measured path, plus a flags
    breaker whenever the instruction touches flags off the path."""
    for op in instr.operands:
        if op.index in on_path:
            continue
        if op.kind == "flags":
            builder.add(
                make_dep_breaker(op, catalog, inst.bindings[op.index], instr.isa_class)
            )
        elif op.access == "read-write":
            builder.add(
                make_dep_breaker(op, catalog, inst.bindings[op.index], instr.isa_class)
            )


def _read_side_breaker(builder, instr, catalog, inst, dst):
    """The destination operand is on the path as a target; when it is also
    read, that read would close a shorter parallel cycle, so overwrite it
    after the chain consumed the value."""
    dop = instr.operands[dst]
    if dop.access == "read-write":
        builder.add(
            make_dep_breaker(dop, catalog, inst.bindings[dst], instr.isa_class)
        )


def _bind_chain(builder, chain, c_dst_family, c_src_family):
    instr, c_dst, c_src = chain
    overrides = {c_dst.index: c_dst_family, c_src.index: c_src_family}
    return builder.bind(instr, overrides)


def make_latency_kernels(
    instr: InstructionDesc, src: int, dst: int, catalog: Catalog
) -> LatencyPlan:
    """Dependency-chain kernels for one (source, destination) operand pair.

    The case split follows the operand kinds; pairs with no chain recipe are
    reported unchainable rather than failing.
    """
    sop = instr.operands[src]
    dop = instr.operands[dst]
    if not sop.is_read or not dop.is_write:
        raise GenerationError(f"({src},{dst}) is not a readable/writable pair")
    plan = LatencyPlan(src=src, dst=dst, probes=[])

    divider = instr.has_attribute("uses-divider")
    if divider and src == dst and sop.is_register:
        _divider_chain(plan, instr, src, catalog)
        return plan

    if sop.kind == "flags" and dop.is_register:
        _flags_to_register(plan, instr, src, dst, catalog)
    elif sop.kind == "flags" and dop.kind == "flags":
        _flags_self(plan, instr, src, dst, catalog)
    elif sop.is_register and dop.is_register:
        if KIND_TO_CLASS[sop.kind] == KIND_TO_CLASS[dop.kind]:
            _same_class_chain(plan, instr, src, dst, catalog)
        else:
            _cross_class_chain(plan, instr, src, dst, catalog)
    elif sop.kind == "memory" and dop.is_register:
        _memory_to_register(plan, instr, src, dst, catalog)
    elif sop.is_register and dop.kind == "memory":
        _store_round_trip(plan, instr, src, dst, catalog)
    else:
        plan.unchainable = f"no chain recipe for {sop.kind} -> {dop.kind}"
    if not plan.probes and plan.unchainable is None:
        plan.unchainable = "unchainable pair"
    if divider:
        # chains other than the pinned idiom produce fast-class inputs
        plan.probes = [
            replace(p, value_class="fast") if p.value_class is None else p
            for p in plan.probes
        ]
    return plan


def _same_class_chain(plan, instr, src, dst, catalog):
    sop = instr.operands[src]
    dop = instr.operands[dst]
    if src == dst:
        # read-write operand: instances chain through it directly
        builder = _builder_for(catalog, instr)
        inst = builder.bind(instr)
        _off_path_breakers(builder, instr, catalog, inst, on_path={src})
        plan.probes.append(
            _probe(builder, None, label="self-chain", kind="exact")
        )
        return
    if KIND_TO_CLASS[sop.kind] == "gp":
        chain = _gp_chain(catalog, instr, sop, dop)
        chains = [chain] if chain else []
    else:
        chains = chain_candidates(catalog, instr, sop, dop)
    if not chains:
        plan.unchainable = "no chain instruction for this register type"
    for chain in chains:
        builder = _builder_for(catalog, instr, chain[0])
        s_family = builder.take_family(sop)
        d_family = builder.take_family(dop)
        inst = builder.bind(instr, {src: s_family, dst: d_family})
        _bind_chain(builder, chain, c_dst_family=s_family, c_src_family=d_family)
        _read_side_breaker(builder, instr, catalog, inst, dst)
        _off_path_breakers(builder, instr, catalog, inst, on_path={src, dst})
        plan.probes.append(
            _probe(
                builder,
                chain[0].id,
                label=f"chain via {chain[0].id}",
                kind="exact",
                subtract=(chain[0].id,),
            )
        )
    _same_register_variant(plan, instr, src, dst, catalog)


def _same_register_variant(plan, instr, src, dst, catalog):
    sop = instr.operands[src]
    dop = instr.operands[dst]
    if sop.implicit and dop.implicit:
        return  # no register choice to make
    if sop.fixed_register or dop.fixed_register:
        return
    # bind every register operand of this class to one family
    class_name = KIND_TO_CLASS[sop.kind]
    group = [
        op
        for op in instr.operands
        if op.is_register
        and KIND_TO_CLASS[op.kind] == class_name
        and op.fixed_register is None
    ]
    builder = _builder_for(catalog, instr)
    family = builder.pool(class_name).take()
    overrides = {op.index: family for op in group}
    inst = builder.bind(instr, overrides)
    on_path = {op.index for op in group}
    _off_path_breakers(builder, instr, catalog, inst, on_path=on_path)
    plan.probes.append(
        _probe(builder, None, label="same-register", kind="exact", same_register=True)
    )


def _cross_class_chain(plan, instr, src, dst, catalog):
    sop = instr.operands[src]
    dop = instr.operands[dst]
    chains = chain_candidates(catalog, instr, sop, dop)
    if not chains:
        plan.unchainable = (
            f"no chain instruction maps {dop.kind} back to {sop.kind}"
        )
        return
    for chain in chains:
        builder = _builder_for(catalog, instr, chain[0])
        s_family = builder.take_family(sop)
        d_family = builder.take_family(dop)
        inst = builder.bind(instr, {src: s_family, dst: d_family})
        _bind_chain(builder, chain, c_dst_family=s_family, c_src_family=d_family)
        _read_side_breaker(builder, instr, catalog, inst, dst)
        _off_path_breakers(builder, instr, catalog, inst, on_path={src, dst})
        plan.probes.append(
            _probe(
                builder,
                chain[0].id,
                label=f"composition with {chain[0].id}",
                kind="upper-bound",
            )
        )


def _memory_to_register(plan, instr, src, dst, catalog):
    sop = instr.operands[src]
    dop = instr.operands[dst]
    other_reads = [
        op
        for op in instr.operands
        if op.is_read and op.index != src and op.kind not in ("immediate", "flags")
    ]
    pure_load = (
        dop.kind == "gp-register"
        and dop.width == 64
        and dop.access == "write"
        and not dop.implicit
        and not other_reads
    )
    if pure_load:
        # the loaded value is the next address: MOV RAX, [RAX]
        builder = _builder_for(catalog, instr)
        family = builder.pool("gp").take()
        base = builder.reg(dop, family)
        mem = builder.new_mem(base=base)
        inst = builder.bind(instr, {src: mem, dst: family})
        builder.set_init(mem.slot, "own-address")
        _off_path_breakers(builder, instr, catalog, inst, on_path={src, dst})
        plan.probes.append(
            _probe(builder, None, label="self-addressing load", kind="exact")
        )
        return

    xor = find_mnemonic(catalog, XOR_MNEMONICS, "gp-register", 64, instr.isa_class)
    if xor is None:
        plan.unchainable = "no XOR instruction for the address feedback"
        return
    movsx = None
    if dop.kind == "gp-register" and dop.width < 32:
        # widen 8/16-bit results before the XOR feedback (partial registers)
        widen = [
            c
            for c in chain_candidates(
                catalog,
                instr,
                OperandSpec(index=-1, kind="gp-register", access="write", width=64),
                dop,
            )
            if c[2].width == dop.width and c[1].width >= 32
        ]
        movsx = min(widen, key=lambda c: c[0].id) if widen else None
    to_gp = []
    if dop.kind != "gp-register":
        gp64 = OperandSpec(index=-1, kind="gp-register", access="write", width=64)
        to_gp = chain_candidates(catalog, instr, gp64, dop)
        if not to_gp:
            plan.unchainable = f"no instruction moves {dop.kind} to a gp register"
            return

    for cross in to_gp or [None]:
        builder = _builder_for(catalog, instr)
        addr_family = builder.pool("gp").take()
        base = RegBinding(
            name=catalog.register_name("gp-register", 64, addr_family),
            family=addr_family,
        )
        mem = builder.new_mem(base=base)
        d_family = builder.take_family(dop)
        inst = builder.bind(instr, {src: mem, dst: d_family})
        subtract = []
        chain_id = None
        feedback_family = d_family
        if cross is not None:
            feedback_family = builder.pool("gp").take()
            _bind_chain(builder, cross, c_dst_family=feedback_family, c_src_family=d_family)
            chain_id = cross[0].id
        elif movsx is not None:
            feedback_family = builder.pool("gp").take()
            _bind_chain(builder, movsx, c_dst_family=feedback_family, c_src_family=d_family)
            subtract.append(movsx[0].id)
        fb64 = catalog.register_name("gp-register", 64, feedback_family)
        for _ in range(2):
            builder.bind(
                xor,
                {0: RegBinding(name=base.name, family=addr_family),
                 1: RegBinding(name=fb64, family=feedback_family)},
            )
            subtract.append(xor.id)
        _read_side_breaker(builder, instr, catalog, inst, dst)
        flags_op = instr.flags_operand
        on_path = {src, dst}
        _off_path_breakers(builder, instr, catalog, inst, on_path=on_path)
        if flags_op is None:
            # the XOR feedback writes flags even when the instruction does not
            builder.add(
                make_dep_breaker(
                    OperandSpec(index=-1, kind="flags", access="write"),
                    catalog,
                    FlagsBinding(),
                    instr.isa_class,
                )
            )
        plan.probes.append(
            _probe(
                builder,
                chain_id,
                label="address feedback via double XOR"
                + (f" + {chain_id}" if chain_id else ""),
                kind="exact" if cross is None else "upper-bound",
                subtract=tuple(subtract),
            )
        )


def _flags_to_register(plan, instr, src, dst, catalog):
    dop = instr.operands[dst]
    if dop.kind != "gp-register":
        plan.unchainable = "no instruction reads flags into a non-gp register"
        return
    writer = find_flags_writer(catalog)
    if writer is None:
        plan.unchainable = "no flags-writing chain instruction"
        return
    builder = _builder_for(catalog, instr)
    d_family = builder.take_family(dop)
    inst = builder.bind(instr, {dst: d_family})
    overrides = {}
    for op in writer.operands:
        if op.is_register:
            overrides[op.index] = RegBinding(
                name=catalog.register_name(op.kind, op.width, d_family),
                family=d_family,
            )
    builder.bind(writer, overrides)
    _read_side_breaker(builder, instr, catalog, inst, dst)
    _off_path_breakers(builder, instr, catalog, inst, on_path={src, dst})
    plan.probes.append(
        _probe(
            builder,
            writer.id,
            label=f"flags chain via {writer.id}",
            kind="exact",
            subtract=(writer.id,),
        )
    )


def _flags_self(plan, instr, src, dst, catalog):
    # flags are read and written by one uop; a plain self-chain suffices
    builder = _builder_for(catalog, instr)
    inst = builder.bind(instr)
    _off_path_breakers(builder, instr, catalog, inst, on_path={src, dst})
    plan.probes.append(_probe(builder, None, label="flags self-chain", kind="exact"))


def _store_round_trip(plan, instr, src, dst, catalog):
    sop = instr.operands[src]
    load = find_load(catalog, sop.kind, instr.operands[dst].width, instr.isa_class)
    if load is None:
        plan.unchainable = "no load instruction reads this operand type back"
        return
    builder = _builder_for(catalog, instr, load)
    data_family = builder.take_family(sop)
    mem = builder.new_mem()
    inst = builder.bind(instr, {src: data_family, dst: mem})
    load_dst = next(op for op in load.operands if op.is_write)
    load_mem = load.memory_operand
    builder.bind(load, {load_dst.index: data_family, load_mem.index: mem})
    _off_path_breakers(builder, instr, catalog, inst, on_path={src, dst})
    plan.probes.append(
        _probe(
            builder,
            load.id,
            label=f"store-load round trip via {load.id}",
            kind="round-trip",
        )
    )


def _divider_chain(plan, instr, operand, catalog):
    """Pin the read-write register to a fixed value class with the AND/OR
    idiom; the divider output itself would drift back to a fast value."""
    op = instr.operands[operand]
    and_i = find_mnemonic(catalog, AND_MNEMONICS, op.kind, op.width, instr.isa_class)
    or_i = find_mnemonic(catalog, OR_MNEMONICS, op.kind, op.width, instr.isa_class)
    if and_i is None or or_i is None:
        plan.unchainable = "no AND/OR idiom instructions for this operand type"
        return
    for value_class in ("fast", "slow"):
        builder = _builder_for(catalog, instr)
        if op.fixed_register is not None:
            family = catalog.family_of(op.fixed_register)
        else:
            family = builder.take_family(op)
        const_family = builder.take_family(op)
        inst = builder.bind(instr, {operand: family})
        for aux in (and_i, or_i):
            builder.bind(aux, {0: family, 1: const_family})
        _off_path_breakers(builder, instr, catalog, inst, on_path={operand})
        if instr.flags_operand is None:
            builder.add(
                make_dep_breaker(
                    OperandSpec(index=-1, kind="flags", access="write"),
                    catalog,
                    FlagsBinding(),
                    instr.isa_class,
                )
            )
        builder.set_init(const_family, value_class)
        for o in instr.operands:
            if o.is_read and o.is_register:
                binding = inst.bindings[o.index]
                builder.set_init(binding.family, value_class)
        plan.probes.append(
            _probe(
                builder,
                and_i.id,
                label=f"value-pinned chain ({value_class})",
                kind="exact",
                subtract=(and_i.id, or_i.id),
                value_class=value_class,
            )
        )


# ---------------------------------------------------------------------------
# Chain calibration


def make_self_chain_kernel(chain_instr: InstructionDesc, catalog: Catalog) -> Kernel | None:
    """A kernel measuring the chain instruction's own latency: either through
    a read-write operand or by using one register for source and destination.
    Returns None when no self-chain exists (e.g. pure flag writers)."""
    rw = [op for op in chain_instr.operands if op.is_register and op.access == "read-write"]
    if rw:
        builder = _builder_for(catalog, chain_instr)
        inst = builder.bind(chain_instr, {rw[0].index: builder.take_family(rw[0])})
        _off_path_breakers(builder, chain_instr, catalog, inst, on_path={rw[0].index})
        return builder.build(
            chain_meta=ChainMeta(chain_instruction=None, occurrences=1, subtract=())
        )
    shape = _plain_register_move(chain_instr)
    if shape is None:
        return None
    dst, src_ = shape
    if KIND_TO_CLASS[dst.kind] != KIND_TO_CLASS[src_.kind]:
        return None
    builder = _builder_for(catalog, chain_instr)
    family = builder.pool(KIND_TO_CLASS[dst.kind]).take()
    builder.bind(chain_instr, {dst.index: family, src_.index: family})
    return builder.build(
        chain_meta=ChainMeta(chain_instruction=None, occurrences=1, subtract=())
    )
