"""Result serialization: machine-readable XML/JSON documents plus summaries.

Output is deterministic (stable sort, fixed field order) and round-trips
losslessly: cycles are exact rationals rendered as fraction strings, port
usage uses the compact p-notation (e.g. ``3*p015+1*p23``: three uops on
ports {0,1,5}, one on {2,3}).
"""

from __future__ import annotations

import csv
import json
import string
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .inference import (
    LatencyResult,
    MeasuredThroughput,
    PairLatency,
    PortUsage,
    SameRegisterLatency,
    ThroughputResult,
)


class ReportError(Exception):
    def __init__(self, message, path=None):
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


LATENCY_KINDS = {"exact", "upper-bound", "round-trip"}
SAME_REGISTER_KINDS = {"exact", "zero-idiom-fast-path"}

_PORT_CHARS = string.digits + string.ascii_uppercase


def _port_char(port: int) -> str:
    if not 0 <= port < len(_PORT_CHARS):
        raise ReportError(f"port {port} not representable in p-notation")
    return _PORT_CHARS[port]


def format_port_usage(usage: PortUsage) -> str:
    """Canonical p-notation: strictly increasing port characters within a
    term, terms ordered by their port sequence (3*p015+1*p23).  Empty usage
    (all uops eliminated) renders as the empty string."""
    terms = []
    for combo, count in usage.entries:
        terms.append((tuple(sorted(combo)), count))
    terms.sort()
    return "+".join(
        f"{count}*p{''.join(_port_char(p) for p in ports)}" for ports, count in terms
    )


def parse_port_usage(text: str, path="port-usage") -> PortUsage:
    if text == "":
        return PortUsage.of({})
    entries = []
    for term in text.split("+"):
        count_str, sep, ports_str = term.partition("*p")
        if not sep or not count_str.isdigit():
            raise ReportError(f"malformed p-notation term '{term}'", path=path)
        count = int(count_str)
        if count < 1 or not ports_str:
            raise ReportError(f"malformed p-notation term '{term}'", path=path)
        ports = []
        for ch in ports_str:
            idx = _PORT_CHARS.find(ch)
            if idx < 0:
                raise ReportError(f"illegal port character '{ch}' in '{term}'", path=path)
            ports.append(idx)
        if ports != sorted(set(ports)):
            raise ReportError(
                f"ports must be strictly increasing in '{term}'", path=path
            )
        entries.append((frozenset(ports), count))
    try:
        return PortUsage.of(entries)
    except ValueError as exc:
        raise ReportError(str(exc), path=path) from exc


@dataclass(frozen=True)
class Provenance:
    backend: str
    machine_hash: str
    config: str

    def __post_init__(self):
        if not (self.backend and self.machine_hash and self.config):
            raise ReportError("provenance fields must be non-empty")


@dataclass
class CharacterizationResult:
    instruction: str
    port_usage: PortUsage
    latency: LatencyResult
    throughput: ThroughputResult
    zero_idiom: bool
    provenance: Provenance


def _frac(value: Fraction) -> str:
    return str(Fraction(value))


def _parse_frac(text, path):
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ReportError(f"malformed rational '{text}'", path=path) from exc


# ---------------------------------------------------------------------------
# JSON


def _result_to_obj(result: CharacterizationResult) -> dict:
    latency = []
    for (src, dst), pair in sorted(result.latency.pairs.items()):
        entry = {
            "src": src,
            "dst": dst,
            "kind": pair.kind,
            "cycles": _frac(pair.cycles),
            "chain": pair.chain,
        }
        if pair.value_classes:
            entry["value-classes"] = {name: _frac(c) for name, c in pair.value_classes}
        if pair.same_register is not None:
            entry["same-register"] = {
                "cycles": _frac(pair.same_register.cycles),
                "kind": pair.same_register.kind,
            }
        latency.append(entry)
    omitted = [
        {"src": src, "dst": dst, "reason": reason}
        for (src, dst), reason in sorted(result.latency.omitted.items())
    ]
    throughput = {
        "measured": _frac(result.throughput.measured.cycles),
        "sequence": result.throughput.measured.sequence,
    }
    if result.throughput.measured.value_classes:
        throughput["measured-classes"] = {
            name: _frac(c) for name, c in result.throughput.measured.value_classes
        }
    if result.throughput.computed is None:
        throughput["computed"] = None
        throughput["computed-reason"] = result.throughput.computed_reason or ""
    else:
        throughput["computed"] = _frac(result.throughput.computed)
    return {
        "instruction": result.instruction,
        "port-usage": format_port_usage(result.port_usage),
        "zero-idiom": result.zero_idiom,
        "latency": latency,
        "latency-omitted": omitted,
        "throughput": throughput,
        "provenance": {
            "backend": result.provenance.backend,
            "machine-hash": result.provenance.machine_hash,
            "config": result.provenance.config,
        },
    }


def _pair_from_obj(obj, path) -> PairLatency:
    kind = obj.get("kind")
    if kind not in LATENCY_KINDS:
        raise ReportError(f"unknown latency kind '{kind}'", path=path)
    value_classes = tuple(
        sorted((name, _parse_frac(c, path)) for name, c in obj.get("value-classes", {}).items())
    )
    same_register = None
    if "same-register" in obj:
        sr = obj["same-register"]
        if sr.get("kind") not in SAME_REGISTER_KINDS:
            raise ReportError(
                f"unknown same-register kind '{sr.get('kind')}'", path=path
            )
        same_register = SameRegisterLatency(
            cycles=_parse_frac(sr.get("cycles"), path), kind=sr["kind"]
        )
    return PairLatency(
        kind=kind,
        cycles=_parse_frac(obj.get("cycles"), path),
        chain=obj.get("chain", ""),
        value_classes=value_classes,
        same_register=same_register,
    )


def _result_from_obj(obj, path) -> CharacterizationResult:
    instr = obj.get("instruction")
    if not instr:
        raise ReportError("result without instruction id", path=path)
    where = f"{path}:{instr}"
    pairs = {}
    for entry in obj.get("latency", ()):
        pairs[(entry["src"], entry["dst"])] = _pair_from_obj(entry, where)
    omitted = {
        (entry["src"], entry["dst"]): entry.get("reason", "")
        for entry in obj.get("latency-omitted", ())
    }
    tp = obj.get("throughput", {})
    measured = MeasuredThroughput(
        cycles=_parse_frac(tp.get("measured"), where),
        sequence=tp.get("sequence", ""),
        value_classes=tuple(
            sorted((n, _parse_frac(c, where)) for n, c in tp.get("measured-classes", {}).items())
        ),
    )
    computed = tp.get("computed")
    throughput = ThroughputResult(
        measured=measured,
        computed=None if computed is None else _parse_frac(computed, where),
        computed_reason=tp.get("computed-reason") or None,
    )
    prov = obj.get("provenance", {})
    return CharacterizationResult(
        instruction=instr,
        port_usage=parse_port_usage(obj.get("port-usage", ""), path=where),
        latency=LatencyResult(pairs=pairs, omitted=omitted),
        throughput=throughput,
        zero_idiom=bool(obj.get("zero-idiom", False)),
        provenance=Provenance(
            backend=prov.get("backend", ""),
            machine_hash=prov.get("machine-hash", ""),
            config=prov.get("config", ""),
        ),
    )


# ---------------------------------------------------------------------------
# XML


def _result_to_element(result: CharacterizationResult) -> ET.Element:
    node = ET.Element(
        "instruction",
        attrib={
            "id": result.instruction,
            "port-usage": format_port_usage(result.port_usage),
            "zero-idiom": "true" if result.zero_idiom else "false",
        },
    )
    ET.SubElement(
        node,
        "provenance",
        attrib={
            "backend": result.provenance.backend,
            "machine-hash": result.provenance.machine_hash,
            "config": result.provenance.config,
        },
    )
    for (src, dst), pair in sorted(result.latency.pairs.items()):
        lat = ET.SubElement(
            node,
            "latency",
            src=str(src),
            dst=str(dst),
            kind=pair.kind,
            cycles=_frac(pair.cycles),
            chain=pair.chain,
        )
        for name, cycles in pair.value_classes:
            ET.SubElement(lat, "value-class", name=name, cycles=_frac(cycles))
        if pair.same_register is not None:
            ET.SubElement(
                lat,
                "same-register",
                cycles=_frac(pair.same_register.cycles),
                kind=pair.same_register.kind,
            )
    for (src, dst), reason in sorted(result.latency.omitted.items()):
        ET.SubElement(
            node, "latency-omitted", src=str(src), dst=str(dst), reason=reason
        )
    tp = result.throughput
    attrs = {"measured": _frac(tp.measured.cycles), "sequence": tp.measured.sequence}
    if tp.computed is None:
        attrs["computed"] = "none"
        attrs["computed-reason"] = tp.computed_reason or ""
    else:
        attrs["computed"] = _frac(tp.computed)
    tp_node = ET.SubElement(node, "throughput", attrib=attrs)
    for name, cycles in tp.measured.value_classes:
        ET.SubElement(tp_node, "measured-class", name=name, cycles=_frac(cycles))
    return node


def _result_from_element(node: ET.Element, path) -> CharacterizationResult:
    instr = node.get("id")
    if not instr:
        raise ReportError("instruction element without id", path=path)
    where = f"{path}:{instr}"
    pairs = {}
    omitted = {}
    throughput = None
    provenance = None
    for child in node:
        if child.tag == "latency":
            value_classes = []
            same_register = None
            for sub in child:
                if sub.tag == "value-class":
                    value_classes.append(
                        (sub.get("name"), _parse_frac(sub.get("cycles"), where))
                    )
                elif sub.tag == "same-register":
                    if sub.get("kind") not in SAME_REGISTER_KINDS:
                        raise ReportError(
                            f"unknown same-register kind '{sub.get('kind')}'",
                            path=where,
                        )
                    same_register = SameRegisterLatency(
                        cycles=_parse_frac(sub.get("cycles"), where),
                        kind=sub.get("kind"),
                    )
                else:
                    raise ReportError(f"unexpected element <{sub.tag}>", path=where)
            kind = child.get("kind")
            if kind not in LATENCY_KINDS:
                raise ReportError(f"unknown latency kind '{kind}'", path=where)
            pairs[(int(child.get("src")), int(child.get("dst")))] = PairLatency(
                kind=kind,
                cycles=_parse_frac(child.get("cycles"), where),
                chain=child.get("chain", ""),
                value_classes=tuple(sorted(value_classes)),
                same_register=same_register,
            )
        elif child.tag == "latency-omitted":
            omitted[(int(child.get("src")), int(child.get("dst")))] = child.get(
                "reason", ""
            )
        elif child.tag == "throughput":
            value_classes = tuple(
                sorted(
                    (sub.get("name"), _parse_frac(sub.get("cycles"), where))
                    for sub in child
                    if sub.tag == "measured-class"
                )
            )
            computed_text = child.get("computed")
            throughput = ThroughputResult(
                measured=MeasuredThroughput(
                    cycles=_parse_frac(child.get("measured"), where),
                    sequence=child.get("sequence", ""),
                    value_classes=value_classes,
                ),
                computed=None
                if computed_text == "none"
                else _parse_frac(computed_text, where),
                computed_reason=child.get("computed-reason") or None,
            )
        elif child.tag == "provenance":
            provenance = Provenance(
                backend=child.get("backend", ""),
                machine_hash=child.get("machine-hash", ""),
                config=child.get("config", ""),
            )
        else:
            raise ReportError(f"unexpected element <{child.tag}>", path=where)
    if throughput is None or provenance is None:
        raise ReportError("missing throughput or provenance", path=where)
    return CharacterizationResult(
        instruction=instr,
        port_usage=parse_port_usage(node.get("port-usage", ""), path=where),
        latency=LatencyResult(pairs=pairs, omitted=omitted),
        throughput=throughput,
        zero_idiom=node.get("zero-idiom") == "true",
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Entry points


def write_results(results, fmt: str, path) -> Path:
    """Write characterization results; stable order, stable bytes."""
    path = Path(path)
    ordered = sorted(results, key=lambda r: r.instruction)
    if fmt == "json":
        doc = {"results": [_result_to_obj(r) for r in ordered]}
        path.write_text(json.dumps(doc, indent=1) + "\n")
    elif fmt == "xml":
        root = ET.Element("characterizations")
        for result in ordered:
            root.append(_result_to_element(result))
        ET.indent(root)
        path.write_text(ET.tostring(root, encoding="unicode") + "\n")
    else:
        raise ReportError(f"unknown format '{fmt}'")
    return path


def read_results(path) -> list:
    """Inverse of write_results (format detected from the content)."""
    path = Path(path)
    text = path.read_text()
    if text.lstrip().startswith("<"):
        try:
            root = ET.fromstring(text)
        except ET.ParseError as exc:
            raise ReportError(str(exc), path=str(path)) from exc
        if root.tag != "characterizations":
            raise ReportError(f"expected <characterizations>, got <{root.tag}>", path=str(path))
        return [_result_from_element(node, str(path)) for node in root]
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ReportError(str(exc), path=str(path)) from exc
    return [_result_from_obj(obj, str(path)) for obj in doc.get("results", ())]


def write_summary(results, path) -> Path:
    """Delimited one-line-per-instruction summary (CSV)."""
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            [
                "instruction",
                "uops",
                "port_usage",
                "tp_measured",
                "tp_computed",
                "latency_max",
                "zero_idiom",
            ]
        )
        for result in sorted(results, key=lambda r: r.instruction):
            exact = [
                p.cycles for p in result.latency.pairs.values() if p.kind == "exact"
            ]
            writer.writerow(
                [
                    result.instruction,
                    result.port_usage.total_uops,
                    format_port_usage(result.port_usage),
                    _frac(result.throughput.measured.cycles),
                    "n/a"
                    if result.throughput.computed is None
                    else _frac(result.throughput.computed),
                    _frac(max(exact)) if exact else "n/a",
                    "yes" if result.zero_idiom else "no",
                ]
            )
    return path
