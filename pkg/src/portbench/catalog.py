"""Instruction catalog: declarative descriptions of the instructions under test.

A catalog file (JSON or XML, see ``docs`` section of the README for the schema)
lists instruction variants with their explicit and implicit operands, plus the
register classes they draw from.  Implicit operands are declared explicitly,
after the explicit ones.  The catalog is immutable after loading and can be
shared freely between analyses.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

REGISTER_KINDS = {"gp-register", "simd-register", "mmx-register"}
OPERAND_KINDS = REGISTER_KINDS | {"memory", "immediate", "flags", "agen-base"}
ACCESS_MODES = {"read", "write", "read-write"}
REGISTER_WIDTHS = {8, 16, 32, 64, 128, 256, 512}
IMMEDIATE_WIDTHS = {8, 16, 32, 64}
FLAG_NAMES = {"CF", "PF", "AF", "ZF", "SF", "OF"}
ISA_CLASSES = {"GP", "SSE", "AVX"}
ATTRIBUTES = {
    "uses-divider",
    "serializing",
    "system",
    "control-flow-on-register",
    "pause-like",
    "zero-latency-capable",
    "zero-idiom",
    "move-elimination-capable",
}

# Attributes that disqualify an instruction from serving as a blocking
# instruction (they either cannot be measured in a tight loop or do not
# reliably occupy an execution port).
BLOCKING_EXCLUDED = {
    "system",
    "serializing",
    "zero-latency-capable",
    "pause-like",
    "control-flow-on-register",
}

# Operand kind -> register class name used in the register-classes table.
KIND_TO_CLASS = {
    "gp-register": "gp",
    "simd-register": "vec",
    "mmx-register": "mmx",
    "agen-base": "gp",
}

# Number of register families per class kept out of the allocation rotation
# (scratch space for the measurement harness).
RESERVED_FAMILIES = 2


class CatalogError(Exception):
    """Malformed or inconsistent catalog document."""

    def __init__(self, message, instruction=None):
        if instruction is not None:
            message = f"instruction '{instruction}': {message}"
        super().__init__(message)
        self.instruction = instruction


@dataclass(frozen=True)
class OperandSpec:
    """One operand of an instruction variant.

    ``index`` is the ordinal position; implicit operands follow explicit ones.
    ``fixed_register`` names the architectural register of an implicit
    register operand.  ``flag_set`` lists the status flags touched by a
    flags operand.
    """

    index: int
    kind: str
    access: str
    width: int | None = None
    implicit: bool = False
    fixed_register: str | None = None
    flag_set: frozenset[str] = frozenset()

    @property
    def is_read(self) -> bool:
        return self.access in ("read", "read-write")

    @property
    def is_write(self) -> bool:
        return self.access in ("write", "read-write")

    @property
    def is_register(self) -> bool:
        return self.kind in REGISTER_KINDS


@dataclass(frozen=True)
class InstructionDesc:
    """One instruction variant (one assembler form; encodings are collapsed)."""

    id: str
    mnemonic: str
    isa_class: str
    operands: tuple[OperandSpec, ...]
    attributes: frozenset[str] = frozenset()

    def has_attribute(self, name: str) -> bool:
        return name in self.attributes

    @property
    def explicit_operands(self) -> tuple[OperandSpec, ...]:
        return tuple(op for op in self.operands if not op.implicit)

    @property
    def memory_operand(self) -> OperandSpec | None:
        for op in self.operands:
            if op.kind == "memory":
                return op
        return None

    @property
    def flags_operand(self) -> OperandSpec | None:
        for op in self.operands:
            if op.kind == "flags":
                return op
        return None

    def register_operands(self, kind: str | None = None) -> tuple[OperandSpec, ...]:
        return tuple(
            op
            for op in self.operands
            if op.is_register and (kind is None or op.kind == kind)
        )


@dataclass(frozen=True)
class RegisterDef:
    """A register family with its width-specific architectural names.

    All names of a family alias the same physical storage; dependency
    tracking is done per family.  Example: family RAX with names
    {64: RAX, 32: EAX, 16: AX, 8: AL}.
    """

    family: str
    names: tuple[tuple[int, str], ...]

    def name_for_width(self, width: int) -> str | None:
        for w, name in self.names:
            if w == width:
                return name
        return None


@dataclass
class Catalog:
    instructions: tuple[InstructionDesc, ...]
    register_classes: dict[str, tuple[RegisterDef, ...]]
    document: dict | None = None

    def __post_init__(self):
        self._by_id = {i.id: i for i in self.instructions}
        self._family_by_name = {}
        for defs in self.register_classes.values():
            for rdef in defs:
                for _, name in rdef.names:
                    self._family_by_name[name] = rdef.family

    def __iter__(self):
        return iter(self.instructions)

    def get(self, instr_id: str) -> InstructionDesc:
        try:
            return self._by_id[instr_id]
        except KeyError:
            raise CatalogError("unknown instruction id", instruction=instr_id) from None

    def has(self, instr_id: str) -> bool:
        return instr_id in self._by_id

    def family_of(self, register_name: str) -> str:
        try:
            return self._family_by_name[register_name]
        except KeyError:
            raise CatalogError(f"unknown register name '{register_name}'") from None

    def families(self, class_name: str) -> tuple[RegisterDef, ...]:
        return self.register_classes.get(class_name, ())

    def usable_families(self, class_name: str) -> tuple[RegisterDef, ...]:
        """Families available to the register allocator (reserved ones dropped)."""
        defs = self.families(class_name)
        if len(defs) <= RESERVED_FAMILIES:
            return defs
        return defs[: len(defs) - RESERVED_FAMILIES]

    def register_name(self, kind: str, width: int, family: str) -> str:
        class_name = KIND_TO_CLASS[kind]
        for rdef in self.families(class_name):
            if rdef.family == family:
                name = rdef.name_for_width(width)
                if name is None:
                    raise CatalogError(
                        f"family '{family}' has no {width}-bit name"
                    )
                return name
        raise CatalogError(f"no family '{family}' in register class '{class_name}'")


def _require_keys(obj: dict, allowed: set[str], context: str, instruction=None):
    unknown = set(obj) - allowed
    if unknown:
        raise CatalogError(
            f"unknown field(s) {sorted(unknown)} in {context}", instruction=instruction
        )


def _parse_operand(raw: dict, index: int, instr_id: str) -> OperandSpec:
    _require_keys(
        raw,
        {"kind", "access", "width", "implicit", "fixed-register", "flag-set"},
        f"operand {index}",
        instruction=instr_id,
    )
    kind = raw.get("kind")
    if kind not in OPERAND_KINDS:
        raise CatalogError(f"operand {index}: illegal kind '{kind}'", instruction=instr_id)
    access = raw.get("access")
    if access not in ACCESS_MODES:
        raise CatalogError(
            f"operand {index}: illegal access '{access}'", instruction=instr_id
        )
    width = raw.get("width")
    if kind in REGISTER_KINDS or kind in ("memory", "agen-base"):
        if width not in REGISTER_WIDTHS:
            raise CatalogError(
                f"operand {index}: illegal width {width}", instruction=instr_id
            )
    elif kind == "immediate":
        if width not in IMMEDIATE_WIDTHS:
            raise CatalogError(
                f"operand {index}: illegal immediate width {width}",
                instruction=instr_id,
            )
        if access != "read":
            raise CatalogError(
                f"operand {index}: immediates cannot be written", instruction=instr_id
            )
    elif width is not None:
        raise CatalogError(
            f"operand {index}: width not allowed for kind '{kind}'",
            instruction=instr_id,
        )
    implicit = bool(raw.get("implicit", False))
    fixed = raw.get("fixed-register")
    if implicit and fixed is None and kind != "flags":
        raise CatalogError(
            f"operand {index}: implicit operand needs fixed-register or kind=flags",
            instruction=instr_id,
        )
    flag_set = frozenset(raw.get("flag-set", ()))
    if flag_set - FLAG_NAMES:
        raise CatalogError(
            f"operand {index}: unknown flags {sorted(flag_set - FLAG_NAMES)}",
            instruction=instr_id,
        )
    if kind == "flags" and not flag_set:
        flag_set = frozenset(FLAG_NAMES)
    return OperandSpec(
        index=index,
        kind=kind,
        access=access,
        width=width,
        implicit=implicit,
        fixed_register=fixed,
        flag_set=flag_set,
    )


def _parse_instruction(raw: dict) -> InstructionDesc:
    instr_id = raw.get("id")
    if not instr_id or not isinstance(instr_id, str):
        raise CatalogError("instruction without id")
    _require_keys(
        raw,
        {"id", "mnemonic", "isa-class", "operands", "attributes"},
        "instruction",
        instruction=instr_id,
    )
    isa_class = raw.get("isa-class")
    if isa_class not in ISA_CLASSES:
        raise CatalogError(f"illegal isa-class '{isa_class}'", instruction=instr_id)
    attributes = frozenset(raw.get("attributes", ()))
    if attributes - ATTRIBUTES:
        raise CatalogError(
            f"unknown attribute(s) {sorted(attributes - ATTRIBUTES)}",
            instruction=instr_id,
        )
    operands = tuple(
        _parse_operand(op, idx, instr_id)
        for idx, op in enumerate(raw.get("operands", ()))
    )
    if not operands:
        raise CatalogError("instruction without operands", instruction=instr_id)
    explicit_seen_after_implicit = False
    for prev, op in zip(operands, operands[1:]):
        if prev.implicit and not op.implicit:
            explicit_seen_after_implicit = True
    if explicit_seen_after_implicit:
        raise CatalogError(
            "implicit operands must follow explicit operands", instruction=instr_id
        )
    return InstructionDesc(
        id=instr_id,
        mnemonic=raw.get("mnemonic", instr_id.upper()),
        isa_class=isa_class,
        operands=operands,
        attributes=attributes,
    )


def _parse_register_classes(raw: dict) -> dict[str, tuple[RegisterDef, ...]]:
    classes = {}
    for class_name, defs in raw.items():
        parsed = []
        for rdef in defs:
            _require_keys(rdef, {"family", "names"}, f"register class '{class_name}'")
            names = tuple(sorted(((int(w), n) for w, n in rdef["names"].items()), reverse=True))
            parsed.append(RegisterDef(family=rdef["family"], names=names))
        classes[class_name] = tuple(parsed)
    return classes


def _validate(catalog: Catalog):
    seen = set()
    for instr in catalog.instructions:
        if instr.id in seen:
            raise CatalogError("duplicate id", instruction=instr.id)
        seen.add(instr.id)
        if sum(1 for op in instr.operands if op.kind == "memory") > 1:
            raise CatalogError("more than one memory operand", instruction=instr.id)
        if instr.has_attribute("zero-idiom"):
            by_kind = {}
            for op in instr.register_operands():
                by_kind.setdefault(op.kind, []).append(op)
            if not any(len(ops) >= 2 for ops in by_kind.values()):
                raise CatalogError(
                    "zero-idiom requires two register operands of the same class",
                    instruction=instr.id,
                )
        for op in instr.operands:
            if op.fixed_register is not None:
                if op.fixed_register not in catalog._family_by_name:
                    raise CatalogError(
                        f"operand {op.index}: fixed register "
                        f"'{op.fixed_register}' not in register classes",
                        instruction=instr.id,
                    )
            if op.is_register or op.kind == "agen-base":
                class_name = KIND_TO_CLASS[op.kind]
                defs = catalog.families(class_name)
                if not any(r.name_for_width(op.width) for r in defs):
                    raise CatalogError(
                        f"operand {op.index}: no {op.width}-bit register in "
                        f"class '{class_name}'",
                        instruction=instr.id,
                    )


def _document_from_xml(root: ET.Element) -> dict:
    if root.tag != "catalog":
        raise CatalogError(f"expected <catalog> root, got <{root.tag}>")
    doc = {"register-classes": {}, "instructions": []}
    for child in root:
        if child.tag == "register-classes":
            for cls in child:
                if cls.tag != "class":
                    raise CatalogError(f"unexpected element <{cls.tag}>")
                defs = []
                for reg in cls:
                    names = {n.get("width"): (n.text or "").strip() for n in reg}
                    defs.append({"family": reg.get("family"), "names": names})
                doc["register-classes"][cls.get("name")] = defs
        elif child.tag == "instructions":
            for node in child:
                raw = {
                    "id": node.get("id"),
                    "mnemonic": node.get("mnemonic"),
                    "isa-class": node.get("isa-class"),
                    "operands": [],
                }
                if node.get("attributes"):
                    raw["attributes"] = node.get("attributes").split()
                extra = set(node.keys()) - {"id", "mnemonic", "isa-class", "attributes"}
                if extra:
                    raise CatalogError(
                        f"unknown attribute(s) {sorted(extra)}", instruction=raw["id"]
                    )
                for op in node:
                    if op.tag != "operand":
                        raise CatalogError(
                            f"unexpected element <{op.tag}>", instruction=raw["id"]
                        )
                    op_raw = {}
                    for key, value in op.items():
                        if key == "width":
                            op_raw["width"] = int(value)
                        elif key == "implicit":
                            op_raw["implicit"] = value == "true"
                        elif key == "flag-set":
                            op_raw["flag-set"] = value.split()
                        else:
                            op_raw[key] = value
                    raw["operands"].append(op_raw)
                doc["instructions"].append(raw)
        else:
            raise CatalogError(f"unexpected element <{child.tag}>")
    return doc


def load_catalog(path) -> Catalog:
    """Load and validate a catalog from a JSON or XML file."""
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("<"):
        try:
            doc = _document_from_xml(ET.fromstring(text))
        except ET.ParseError as exc:
            raise CatalogError(f"{path}: {exc}") from exc
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CatalogError(f"{path}: {exc}") from exc
    return catalog_from_document(doc)


def catalog_from_document(doc: dict) -> Catalog:
    _require_keys(doc, {"register-classes", "instructions"}, "catalog document")
    register_classes = _parse_register_classes(doc.get("register-classes", {}))
    instructions = tuple(_parse_instruction(raw) for raw in doc.get("instructions", ()))
    catalog = Catalog(
        instructions=instructions, register_classes=register_classes, document=doc
    )
    _validate(catalog)
    return catalog


def blocking_candidates(catalog: Catalog, isa_class: str) -> list[InstructionDesc]:
    """Instructions eligible to serve as blocking instructions.

    Excludes system, serializing, zero-latency, pause-like and
    register-dependent control-flow instructions.  ``isa_class`` selects the
    vector extension that may appear in the result: candidates for SSE
    instructions must not contain AVX instructions and vice versa (mixing the
    two would distort measurements on real hardware).  GP instructions are
    acceptable in either set.
    """
    if isa_class not in ISA_CLASSES:
        raise ValueError(f"unknown isa class '{isa_class}'")
    allowed = {"GP"} if isa_class == "GP" else {"GP", isa_class}
    return [
        instr
        for instr in catalog.instructions
        if instr.isa_class in allowed and not (instr.attributes & BLOCKING_EXCLUDED)
    ]
