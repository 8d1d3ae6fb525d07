"""Deterministic out-of-order port-model simulator with software counters.

The simulator serves as the reference measurement backend: instruction
timing behaviour is fully described by per-instruction ground-truth entries,
so every inference algorithm can be validated against known answers.

Execution model (one kernel run):

* The front end issues up to ``issue_width`` uops per cycle in program
  order into a scheduler of unbounded capacity.
* A uop becomes ready once all the values it reads are available and its
  intra-instruction predecessors have dispatched.
* Each cycle, ready uops are dispatched oldest-first; every port accepts at
  most one uop per cycle.  Among the allowed free ports, the one with the
  least cumulative load is chosen (ties broken by the lowest port index).
* Uops marked ``eliminated`` are executed during issue (by the reorder
  buffer), consume no port, and complete with their declared write latency.
* Divider uops additionally occupy the divider unit of their port for a
  number of cycles given by their occupancy (the divider is not pipelined).
* Loads complete ``load_latency`` cycles after dispatch, or later if the
  value is forwarded from an earlier store (``forward_latency`` after the
  store's uops dispatched).
* A value crossing execution domains (int/fp) picks up the configured
  bypass delay.

Dependency tracking is done per register family (register renaming removes
write-after-write and write-after-read hazards), per memory slot, and for a
single status-flags location.
"""

from __future__ import annotations

import hashlib
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from heapq import heappush, heappop
from pathlib import Path

from .kernel import (
    FLAGS_LOCATION,
    FlagsBinding,
    ImmBinding,
    Kernel,
    MemBinding,
    RegBinding,
)


class MachineError(Exception):
    """Malformed machine description or invalid execution request."""

    def __init__(self, message, entry=None):
        if entry is not None:
            message = f"ground truth for '{entry}': {message}"
        super().__init__(message)
        self.entry = entry


@dataclass(frozen=True)
class WriteRef:
    op: int
    cycles: int


@dataclass(frozen=True)
class ReadRef:
    op: int
    address_only: bool = False


@dataclass(frozen=True)
class Uop:
    ports: tuple[int, ...]
    reads: tuple[ReadRef, ...] = ()
    writes: tuple[WriteRef, ...] = ()
    after: tuple[tuple[int, int], ...] = ()  # (uop index, cycles)
    eliminated: bool = False
    divider_cycles: int = 0
    domain: str | None = None  # "int" | "fp" | None


@dataclass(frozen=True)
class ValueClassTiming:
    latency: int
    occupancy: int


@dataclass(frozen=True)
class GroundTruthEntry:
    uops: tuple[Uop, ...]
    same_reg_operands: tuple[int, ...] = ()
    same_reg_uops: tuple[Uop, ...] = ()
    value_classes: dict | None = None  # class name -> ValueClassTiming
    class_key_operands: tuple[int, ...] = ()
    value_effect: tuple[int, int] | None = None  # (dst op, src op)


@dataclass(frozen=True)
class FractionalElimination:
    """Deterministic stand-in for the probabilistic move elimination seen on
    hardware: every ``period``-th instance of an eliminated uop really is
    eliminated, the others execute on ``ports`` with ``latency``."""

    period: int
    ports: tuple[int, ...]
    latency: int


@dataclass(frozen=True)
class CounterSnapshot:
    cycles: int
    uops_per_port: dict
    total_uops: int

    @property
    def executed_uops(self) -> int:
        return sum(self.uops_per_port.values())


@dataclass
class MachineSpec:
    name: str
    ports: tuple[int, ...]
    issue_width: int
    load_latency: int
    forward_latency: int
    divider_ports: tuple[int, ...]
    functional_units: dict  # unit name -> frozenset of ports
    ground_truth: dict  # instruction id -> GroundTruthEntry
    bypass_delays: dict = field(default_factory=dict)  # (from, to) -> cycles
    fractional_elimination: FractionalElimination | None = None
    document: dict | None = None

    def __post_init__(self):
        if self.issue_width < 1:
            raise MachineError("issue-width must be >= 1")
        if self.load_latency < 1:
            raise MachineError("load-latency must be >= 1")
        port_set = set(self.ports)
        if len(self.ports) != len(port_set):
            raise MachineError("duplicate port ids")
        for unit, combo in self.functional_units.items():
            if not combo <= port_set:
                raise MachineError(f"functional unit '{unit}' references unknown ports")
        if not set(self.divider_ports) <= port_set:
            raise MachineError("divider ports not a subset of ports")
        for instr_id, entry in self.ground_truth.items():
            _check_entry(entry, port_set, set(self.divider_ports), instr_id)

    def port_combinations(self) -> list[frozenset]:
        """Distinct functional-unit port combinations, smallest first."""
        combos = {frozenset(c) for c in self.functional_units.values()}
        return sorted(combos, key=lambda c: (len(c), sorted(c)))

    def store_unit_combinations(self) -> set[frozenset]:
        return {
            frozenset(combo)
            for unit, combo in self.functional_units.items()
            if unit.startswith("store")
        }

    @property
    def spec_hash(self) -> str:
        doc = self.document if self.document is not None else {"name": self.name}
        return hashlib.sha256(
            json.dumps(doc, sort_keys=True).encode()
        ).hexdigest()[:16]

    def bypass(self, source_domain, target_domain) -> int:
        if source_domain is None or target_domain is None:
            return 0
        return self.bypass_delays.get((source_domain, target_domain), 0)

    def entry_for(self, instr_id: str) -> GroundTruthEntry:
        try:
            return self.ground_truth[instr_id]
        except KeyError:
            raise MachineError(f"no ground truth for instruction '{instr_id}'") from None


def _check_uops(uops, port_set, divider_ports, instr_id):
    for idx, uop in enumerate(uops):
        if uop.eliminated:
            if uop.ports:
                raise MachineError(
                    f"uop {idx}: eliminated uops must have an empty port set",
                    entry=instr_id,
                )
        else:
            if not uop.ports:
                raise MachineError(
                    f"uop {idx}: non-eliminated uop without ports", entry=instr_id
                )
            if not set(uop.ports) <= port_set:
                raise MachineError(
                    f"uop {idx}: port set {sorted(uop.ports)} not within machine ports",
                    entry=instr_id,
                )
        if uop.divider_cycles:
            if not set(uop.ports) <= divider_ports:
                raise MachineError(
                    f"uop {idx}: divider uop must run on divider ports", entry=instr_id
                )
        for pred, cycles in uop.after:
            if not 0 <= pred < idx:
                raise MachineError(
                    f"uop {idx}: dependency on uop {pred} is not an earlier uop "
                    "(intra-instruction edges must form a forward DAG)",
                    entry=instr_id,
                )
            if cycles < 1:
                # dependent dispatches are at least one cycle apart
                raise MachineError(
                    f"uop {idx}: intra-instruction edge latency must be >= 1",
                    entry=instr_id,
                )
        for w in uop.writes:
            if w.cycles < 0:
                raise MachineError(f"uop {idx}: negative write latency", entry=instr_id)


def _check_entry(entry, port_set, divider_ports, instr_id):
    _check_uops(entry.uops, port_set, divider_ports, instr_id)
    if entry.same_reg_uops:
        _check_uops(entry.same_reg_uops, port_set, divider_ports, instr_id)
        if len(entry.same_reg_operands) < 2:
            raise MachineError(
                "same-register variant needs at least two operand indices",
                entry=instr_id,
            )
    if entry.value_classes is not None:
        if not any(u.divider_cycles for u in entry.uops):
            raise MachineError(
                "value classes declared but no divider uop", entry=instr_id
            )


# ---------------------------------------------------------------------------
# Loading


def _parse_uop(raw: dict, machine_values: dict, instr_id: str) -> Uop:
    allowed = {
        "ports",
        "reads",
        "writes",
        "after",
        "eliminated",
        "divider-cycles",
        "domain",
    }
    unknown = set(raw) - allowed
    if unknown:
        raise MachineError(f"unknown uop field(s) {sorted(unknown)}", entry=instr_id)
    def resolve_cycles(cycles):
        if isinstance(cycles, str):
            try:
                return machine_values[cycles]
            except KeyError:
                raise MachineError(
                    f"unknown latency token '{cycles}'", entry=instr_id
                ) from None
        return int(cycles)

    reads = []
    for r in raw.get("reads", ()):
        if isinstance(r, dict):
            reads.append(ReadRef(op=r["op"], address_only=bool(r.get("address-only"))))
        else:
            reads.append(ReadRef(op=int(r)))
    writes = [
        WriteRef(op=w["op"], cycles=resolve_cycles(w["cycles"]))
        for w in raw.get("writes", ())
    ]
    after = tuple((a["uop"], resolve_cycles(a["cycles"])) for a in raw.get("after", ()))
    return Uop(
        ports=tuple(raw.get("ports", ())),
        reads=tuple(reads),
        writes=tuple(writes),
        after=after,
        eliminated=bool(raw.get("eliminated", False)),
        divider_cycles=int(raw.get("divider-cycles", 0)),
        domain=raw.get("domain"),
    )


def _parse_entry(raw: dict, machine_values: dict, instr_id: str) -> GroundTruthEntry:
    allowed = {
        "uops",
        "same-reg",
        "value-classes",
        "class-key-operands",
        "value-effect",
    }
    unknown = set(raw) - allowed
    if unknown:
        raise MachineError(f"unknown entry field(s) {sorted(unknown)}", entry=instr_id)
    uops = tuple(_parse_uop(u, machine_values, instr_id) for u in raw.get("uops", ()))
    if not uops:
        raise MachineError("entry without uops", entry=instr_id)
    same_reg_operands = ()
    same_reg_uops = ()
    if "same-reg" in raw:
        sr = raw["same-reg"]
        same_reg_operands = tuple(sr["operands"])
        same_reg_uops = tuple(
            _parse_uop(u, machine_values, instr_id) for u in sr["uops"]
        )
    value_classes = None
    if "value-classes" in raw:
        value_classes = {
            name: ValueClassTiming(latency=int(vc["latency"]), occupancy=int(vc["occupancy"]))
            for name, vc in raw["value-classes"].items()
        }
    value_effect = None
    if "value-effect" in raw:
        ve = raw["value-effect"]
        value_effect = (int(ve["op"]), int(ve["from"]))
    return GroundTruthEntry(
        uops=uops,
        same_reg_operands=same_reg_operands,
        same_reg_uops=same_reg_uops,
        value_classes=value_classes,
        class_key_operands=tuple(raw.get("class-key-operands", ())),
        value_effect=value_effect,
    )


def machine_from_document(doc: dict) -> MachineSpec:
    allowed = {
        "name",
        "ports",
        "issue-width",
        "load-latency",
        "forward-latency",
        "divider-ports",
        "functional-units",
        "bypass-delays",
        "fractional-elimination",
        "ground-truth",
    }
    unknown = set(doc) - allowed
    if unknown:
        raise MachineError(f"unknown machine field(s) {sorted(unknown)}")
    load_latency = int(doc.get("load-latency", 4))
    forward_latency = int(doc.get("forward-latency", 4))
    machine_values = {
        "load-latency": load_latency,
        "forward-latency": forward_latency,
    }
    ground_truth = {
        instr_id: _parse_entry(raw, machine_values, instr_id)
        for instr_id, raw in doc.get("ground-truth", {}).items()
    }
    bypass = {}
    for key, cycles in doc.get("bypass-delays", {}).items():
        source, _, target = key.partition("->")
        bypass[(source.strip(), target.strip())] = int(cycles)
    fractional = None
    if doc.get("fractional-elimination"):
        fe = doc["fractional-elimination"]
        fractional = FractionalElimination(
            period=int(fe["period"]),
            ports=tuple(fe["ports"]),
            latency=int(fe.get("latency", 1)),
        )
    return MachineSpec(
        name=doc.get("name", "machine"),
        ports=tuple(doc.get("ports", ())),
        issue_width=int(doc.get("issue-width", 4)),
        load_latency=load_latency,
        forward_latency=forward_latency,
        divider_ports=tuple(doc.get("divider-ports", ())),
        functional_units={
            unit: frozenset(ports)
            for unit, ports in doc.get("functional-units", {}).items()
        },
        ground_truth=ground_truth,
        bypass_delays=bypass,
        fractional_elimination=fractional,
        document=doc,
    )


def _machine_document_from_xml(root: ET.Element) -> dict:
    if root.tag != "machine":
        raise MachineError(f"expected <machine> root, got <{root.tag}>")
    doc = {"name": root.get("name", "machine")}
    for attr, key in (
        ("issue-width", "issue-width"),
        ("load-latency", "load-latency"),
        ("forward-latency", "forward-latency"),
    ):
        if root.get(attr) is not None:
            doc[key] = int(root.get(attr))

    def int_list(text):
        return [int(x) for x in (text or "").split()]

    for child in root:
        if child.tag == "ports":
            doc["ports"] = int_list(child.text)
        elif child.tag == "divider-ports":
            doc["divider-ports"] = int_list(child.text)
        elif child.tag == "functional-units":
            doc["functional-units"] = {
                u.get("name"): int_list(u.get("ports")) for u in child
            }
        elif child.tag == "bypass-delays":
            doc["bypass-delays"] = {
                f"{d.get('from')}->{d.get('to')}": int(d.get("cycles")) for d in child
            }
        elif child.tag == "fractional-elimination":
            doc["fractional-elimination"] = {
                "period": int(child.get("period")),
                "ports": int_list(child.get("ports")),
                "latency": int(child.get("latency", "1")),
            }
        elif child.tag == "ground-truth":
            doc["ground-truth"] = {
                e.get("id"): _entry_document_from_xml(e) for e in child
            }
        else:
            raise MachineError(f"unexpected element <{child.tag}>")
    return doc


def _uop_document_from_xml(node: ET.Element) -> dict:
    raw = {}
    if node.get("ports"):
        raw["ports"] = [int(p) for p in node.get("ports").split()]
    reads = []
    for r in (node.get("reads") or "").split():
        reads.append(int(r))
    for r in (node.get("address-reads") or "").split():
        reads.append({"op": int(r), "address-only": True})
    if reads:
        raw["reads"] = reads
    if node.get("eliminated") == "true":
        raw["eliminated"] = True
    if node.get("divider-cycles"):
        raw["divider-cycles"] = int(node.get("divider-cycles"))
    if node.get("domain"):
        raw["domain"] = node.get("domain")
    writes = []
    after = []
    for sub in node:
        if sub.tag == "write":
            cycles = sub.get("cycles")
            writes.append(
                {"op": int(sub.get("op")), "cycles": cycles if not cycles.lstrip("-").isdigit() else int(cycles)}
            )
        elif sub.tag == "after":
            after.append({"uop": int(sub.get("uop")), "cycles": int(sub.get("cycles"))})
        else:
            raise MachineError(f"unexpected element <{sub.tag}>")
    if writes:
        raw["writes"] = writes
    if after:
        raw["after"] = after
    return raw


def _entry_document_from_xml(node: ET.Element) -> dict:
    raw = {"uops": []}
    for sub in node:
        if sub.tag == "uop":
            raw["uops"].append(_uop_document_from_xml(sub))
        elif sub.tag == "same-reg":
            raw["same-reg"] = {
                "operands": [int(x) for x in sub.get("operands").split()],
                "uops": [_uop_document_from_xml(u) for u in sub],
            }
        elif sub.tag == "value-class":
            raw.setdefault("value-classes", {})[sub.get("name")] = {
                "latency": int(sub.get("latency")),
                "occupancy": int(sub.get("occupancy")),
            }
        elif sub.tag == "value-effect":
            raw["value-effect"] = {"op": int(sub.get("op")), "from": int(sub.get("from"))}
        else:
            raise MachineError(f"unexpected element <{sub.tag}>")
    if node.get("class-key-operands"):
        raw["class-key-operands"] = [
            int(x) for x in node.get("class-key-operands").split()
        ]
    return raw


def load_machine(path, catalog=None) -> MachineSpec:
    """Load and validate a machine description (JSON or XML).

    Ground-truth entries are checked against ``catalog`` when one is given;
    otherwise they are resolved lazily and only machine-local invariants are
    enforced.
    """
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("<"):
        try:
            doc = _machine_document_from_xml(ET.fromstring(text))
        except ET.ParseError as exc:
            raise MachineError(f"{path}: {exc}") from exc
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MachineError(f"{path}: {exc}") from exc
    machine = machine_from_document(doc)
    if catalog is not None:
        validate_against_catalog(machine, catalog)
    return machine


def validate_against_catalog(machine: MachineSpec, catalog):
    """Cross-check ground-truth entries against the instruction catalog."""
    for instr_id, entry in machine.ground_truth.items():
        if not catalog.has(instr_id):
            raise MachineError("no such instruction in catalog", entry=instr_id)
        instr = catalog.get(instr_id)
        n_ops = len(instr.operands)

        def check_op(idx, what):
            if not 0 <= idx < n_ops:
                raise MachineError(
                    f"{what} references operand {idx}, but the instruction has "
                    f"{n_ops} operands",
                    entry=instr_id,
                )

        for variant in (entry.uops, entry.same_reg_uops):
            for uop in variant:
                for r in uop.reads:
                    check_op(r.op, "read")
                for w in uop.writes:
                    check_op(w.op, "write")
                if w_zero := [w for w in uop.writes if w.cycles == 0]:
                    if not instr.has_attribute("zero-latency-capable"):
                        raise MachineError(
                            f"zero-cycle write to operand {w_zero[0].op} but the "
                            "instruction is not zero-latency-capable",
                            entry=instr_id,
                        )
        for idx in entry.same_reg_operands + entry.class_key_operands:
            check_op(idx, "operand list")
        if entry.value_effect:
            check_op(entry.value_effect[0], "value effect")
            check_op(entry.value_effect[1], "value effect")
        if instr.has_attribute("uses-divider") and entry.value_classes is None:
            raise MachineError(
                "uses-divider instruction without value classes", entry=instr_id
            )
        for src in instr.operands:
            # immediates are always ready; they are not dataflow sources
            if not src.is_read or src.kind == "immediate":
                continue
            for dst in instr.operands:
                if not dst.is_write:
                    continue
                if ground_truth_latency(machine, instr_id, src.index, dst.index) is None:
                    raise MachineError(
                        f"missing latency edge for operand pair "
                        f"({src.index} -> {dst.index})",
                        entry=instr_id,
                    )


# ---------------------------------------------------------------------------
# Ground-truth queries (used by validation suites only)


def ground_truth_port_usage(machine: MachineSpec, instr_id: str) -> dict:
    """Exact port usage of an instruction: {port combination -> uop count}.

    Eliminated uops do not occupy ports and are excluded.
    """
    entry = machine.entry_for(instr_id)
    usage = {}
    for uop in entry.uops:
        if uop.eliminated:
            continue
        combo = frozenset(uop.ports)
        usage[combo] = usage.get(combo, 0) + 1
    return usage


def ground_truth_latency(
    machine: MachineSpec,
    instr_id: str,
    src: int,
    dst: int,
    same_register: bool = False,
    value_class: str | None = None,
) -> int | None:
    """Longest dependency path from source operand to destination operand.

    Returns None when no uop chain connects the pair.  ``value_class``
    substitutes the divider timing of that class; ``same_register`` selects
    the same-register uop variant when the entry defines one.
    """
    entry = machine.entry_for(instr_id)
    uops = entry.uops
    if same_register and entry.same_reg_uops:
        uops = entry.same_reg_uops
    latency = {}
    for u in uops:
        if u.divider_cycles and value_class and entry.value_classes:
            latency[u] = entry.value_classes[value_class].latency
        else:
            latency[u] = None

    start = [None] * len(uops)  # earliest dispatch assuming src ready at 0
    for idx, uop in enumerate(uops):
        t = 0 if any(r.op == src for r in uop.reads) else None
        for pred, cycles in uop.after:
            if start[pred] is not None:
                cand = start[pred] + cycles
                t = cand if t is None else max(t, cand)
        start[idx] = t

    result = None
    for idx, uop in enumerate(uops):
        if start[idx] is None:
            continue
        for w in uop.writes:
            if w.op != dst:
                continue
            cycles = latency[uop] if latency[uop] is not None else w.cycles
            cand = start[idx] + cycles
            result = cand if result is None else max(result, cand)
    return result


def ground_truth_max_latency(machine: MachineSpec, instr_id: str, catalog) -> int:
    instr = catalog.get(instr_id)
    entry = machine.entry_for(instr_id)
    values = [0]
    classes = list(entry.value_classes) if entry.value_classes else [None]
    for src in instr.operands:
        if not src.is_read:
            continue
        for dst in instr.operands:
            if not dst.is_write:
                continue
            for cls in classes:
                lat = ground_truth_latency(
                    machine, instr_id, src.index, dst.index, value_class=cls
                )
                if lat is not None:
                    values.append(lat)
    return max(values)


# ---------------------------------------------------------------------------
# Execution

_DISPATCH_GATE = 0
_CONTENT_GATE = 1


def execute(machine: MachineSpec, kernel: Kernel, warm_up: bool = False, trace=None) -> CounterSnapshot:
    """Run a kernel to completion and return its counter snapshot.

    Pure function of (machine, kernel); ``warm_up`` is accepted for backend
    interface compatibility and has no effect on the simulator (there are no
    caches to warm).  ``trace``, when given a list, receives one
    ``(cycle, port, uop_index, instr_id)`` tuple per dispatched uop.
    """
    del warm_up
    instances = kernel.instances
    if not instances:
        return CounterSnapshot(cycles=0, uops_per_port={p: 0 for p in machine.ports}, total_uops=0)

    issue_width = machine.issue_width
    fractional = machine.fractional_elimination

    # --- static pass: expand instances into uop records and resolve dataflow
    ports_l = []
    div_l = []
    pending_l = []
    floor_l = []
    cpending_l = []
    cfloor_l = []
    has_content_l = []
    write_cycles_l = []
    consumers_l = []  # (consumer, write index, gate, bypass)
    after_out_l = []
    eliminated_l = []
    domain_l = []
    instr_of_l = []

    writers = {}  # location -> list[(uop index, write index, domain)]
    tags = {e.location: e.value_class for e in kernel.init}
    elim_seen = 0

    def location_of(binding):
        if isinstance(binding, RegBinding):
            return binding.family
        if isinstance(binding, FlagsBinding):
            return FLAGS_LOCATION
        if isinstance(binding, MemBinding):
            return binding.slot
        return None

    def binding_of(inst, op_idx):
        try:
            return inst.bindings[op_idx]
        except IndexError:
            raise MachineError(
                f"operand {op_idx} is unbound ({len(inst.bindings)} bindings)",
                entry=inst.instr_id,
            ) from None

    for inst in instances:
        entry = machine.entry_for(inst.instr_id)
        bindings = inst.bindings
        uops = entry.uops
        if entry.same_reg_operands:
            fams = set()
            usable = True
            for op_idx in entry.same_reg_operands:
                b = binding_of(inst, op_idx)
                if isinstance(b, RegBinding):
                    fams.add(b.family)
                else:
                    usable = False
            if usable and len(fams) == 1 and entry.same_reg_uops:
                uops = entry.same_reg_uops

        vclass = None
        if entry.value_classes:
            keys = entry.class_key_operands or tuple(
                r.op for u in uops for r in u.reads
            )
            cls = "fast"
            for op_idx in keys:
                loc = location_of(binding_of(inst, op_idx))
                if loc is not None and tags.get(loc) == "slow":
                    cls = "slow"
            vclass = entry.value_classes.get(cls)

        base = len(ports_l)
        inst_writes = []  # (location, uop index, write index, domain)
        loaded_tag = None
        for template in uops:
            idx = len(ports_l)
            eliminated = template.eliminated
            t_ports = template.ports
            write_cycles = [w.cycles for w in template.writes]
            if eliminated and fractional is not None:
                if elim_seen % fractional.period != 0:
                    eliminated = False
                    t_ports = fractional.ports
                    write_cycles = [fractional.latency] * len(write_cycles)
                elim_seen += 1
            occupancy = template.divider_cycles
            if occupancy and vclass is not None:
                occupancy = vclass.occupancy
                write_cycles = [vclass.latency] * len(write_cycles)

            pending = 0
            has_content = False
            cpending = 0
            for read in template.reads:
                binding = binding_of(inst, read.op)
                if isinstance(binding, ImmBinding):
                    continue
                if isinstance(binding, MemBinding):
                    for p_idx, w_idx, p_domain in writers.get(binding.base.family, ()):
                        consumers_l[p_idx].append(
                            (idx, w_idx, _DISPATCH_GATE,
                             machine.bypass(p_domain, template.domain))
                        )
                        pending += 1
                    if not read.address_only:
                        has_content = True
                        if binding.slot in tags:
                            loaded_tag = tags.get(binding.slot)
                        for p_idx, w_idx, _ in writers.get(binding.slot, ()):
                            consumers_l[p_idx].append(
                                (idx, w_idx, _CONTENT_GATE, 0)
                            )
                            cpending += 1
                else:
                    loc = location_of(binding)
                    for p_idx, w_idx, p_domain in writers.get(loc, ()):
                        consumers_l[p_idx].append(
                            (idx, w_idx, _DISPATCH_GATE,
                             machine.bypass(p_domain, template.domain))
                        )
                        pending += 1
            pending += len(template.after)

            ports_l.append(t_ports if not eliminated else ())
            div_l.append(occupancy)
            pending_l.append(pending)
            floor_l.append(0)
            cpending_l.append(cpending)
            cfloor_l.append(0)
            has_content_l.append(has_content)
            write_cycles_l.append(write_cycles)
            consumers_l.append([])
            after_out_l.append([])
            eliminated_l.append(eliminated)
            domain_l.append(template.domain)
            instr_of_l.append(inst.instr_id)

            for pred, cycles in template.after:
                after_out_l[base + pred].append((idx, cycles))
            for w_idx, w in enumerate(template.writes):
                binding = binding_of(inst, w.op)
                loc = location_of(binding)
                if loc is not None:
                    inst_writes.append(
                        (loc, idx, w_idx, template.domain, isinstance(binding, RegBinding))
                    )

        # commit architectural writes after all reads of the instance
        by_loc = {}
        for loc, idx, w_idx, domain, _ in inst_writes:
            by_loc.setdefault(loc, []).append((idx, w_idx, domain))
        writers.update(by_loc)
        for loc in by_loc:
            tags[loc] = None
        if entry.value_effect is not None:
            dst_loc = location_of(bindings[entry.value_effect[0]])
            src_loc = location_of(bindings[entry.value_effect[1]])
            if dst_loc is not None:
                tags[dst_loc] = tags.get(src_loc) if src_loc is not None else None
        elif loaded_tag is not None:
            # a load propagates the loaded slot's value class to its targets
            for loc, _, _, _, is_reg in inst_writes:
                if is_reg:
                    tags[loc] = loaded_tag

    n_uops = len(ports_l)
    issue_l = [i // issue_width for i in range(n_uops)]
    dispatch_time = [None] * n_uops
    outputs_done = [False] * n_uops
    out_times = [None] * n_uops

    completion = 0
    ready_heap = []
    resolve_stack = []

    counters = {p: 0 for p in machine.ports}
    port_load = {p: 0 for p in machine.ports}
    divider_busy = {p: 0 for p in machine.ports}

    def deliver(consumer, t, gate):
        if gate == _DISPATCH_GATE:
            if t > floor_l[consumer]:
                floor_l[consumer] = t
            pending_l[consumer] -= 1
            if pending_l[consumer] == 0:
                resolve_stack.append(consumer)
        else:
            if t > cfloor_l[consumer]:
                cfloor_l[consumer] = t
            cpending_l[consumer] -= 1
            if cpending_l[consumer] == 0 and dispatch_time[consumer] is not None:
                resolve_outputs(consumer)

    def resolve_outputs(idx):
        nonlocal completion
        if outputs_done[idx]:
            return
        outputs_done[idx] = True
        d = dispatch_time[idx]
        times = [d + c for c in write_cycles_l[idx]]
        if has_content_l[idx]:
            floor = cfloor_l[idx]
            times = [t if t >= floor else floor for t in times]
        out_times[idx] = times
        top = max(times) if times else d + 1
        if top > completion:
            completion = top
        for consumer, w_idx, gate, bypass in consumers_l[idx]:
            deliver(consumer, times[w_idx] + bypass, gate)

    def on_dispatch(idx, cycle):
        dispatch_time[idx] = cycle
        for consumer, cycles in after_out_l[idx]:
            deliver(consumer, cycle + cycles, _DISPATCH_GATE)
        if cpending_l[idx] == 0:
            resolve_outputs(idx)

    def drain_resolved():
        # uops whose inputs are all known: eliminated ones execute at issue,
        # the rest enter the scheduler
        while resolve_stack:
            idx = resolve_stack.pop()
            t = floor_l[idx]
            issue = issue_l[idx]
            if issue > t:
                t = issue
            if eliminated_l[idx]:
                on_dispatch(idx, t)
            else:
                heappush(ready_heap, (t, idx))

    n_dispatchable = sum(1 for e in eliminated_l if not e)
    for idx in range(n_uops):
        if pending_l[idx] == 0:
            resolve_stack.append(idx)
    drain_resolved()

    # --- dispatch loop
    sig_heaps = {}
    sig_of = [None] * n_uops
    queued = 0
    dispatched = 0
    cycle = 0
    ports = machine.ports
    while dispatched < n_dispatchable:
        if queued == 0:
            if not ready_heap:
                raise MachineError("scheduler deadlock (cyclic dependencies?)")
            head = ready_heap[0][0]
            if head > cycle:
                cycle = head
        while ready_heap and ready_heap[0][0] <= cycle:
            _, idx = heappop(ready_heap)
            sig = (ports_l[idx], div_l[idx] > 0)
            heap = sig_heaps.get(sig)
            if heap is None:
                heap = sig_heaps[sig] = []
            heappush(heap, idx)
            queued += 1
        free = set(ports)
        while free and queued:
            best = None
            best_ports = None
            for (sig_ports, is_div), heap in sig_heaps.items():
                if not heap:
                    continue
                cand = heap[0]
                if best is not None and cand > best:
                    continue
                usable = [
                    p
                    for p in sig_ports
                    if p in free and (not is_div or divider_busy[p] <= cycle)
                ]
                if usable:
                    best = cand
                    best_ports = usable
            if best is None:
                break
            sig = (ports_l[best], div_l[best] > 0)
            heappop(sig_heaps[sig])
            queued -= 1
            port = min(best_ports, key=lambda p: (port_load[p], p))
            free.discard(port)
            port_load[port] += 1
            counters[port] += 1
            if div_l[best]:
                divider_busy[port] = cycle + div_l[best]
            if trace is not None:
                trace.append((cycle, port, best, instr_of_l[best]))
            on_dispatch(best, cycle)
            drain_resolved()
            dispatched += 1
        cycle += 1

    return CounterSnapshot(
        cycles=completion,
        uops_per_port=counters,
        total_uops=n_uops,
    )
