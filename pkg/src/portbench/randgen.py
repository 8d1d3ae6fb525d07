"""Seeded generator of synthetic ground-truth instructions.

Produces arbitrary-but-valid instructions on top of an existing machine:
1 to 4 uops drawn from the machine's functional-unit combinations, chained
linearly with effective operand-pair latencies between 1 and 8.  Used by the
validation driver to mass-produce known-answer instances.
"""

from __future__ import annotations

import random

from .catalog import catalog_from_document
from .machine import machine_from_document


def _random_entry(rng, combos, flags: bool):
    n_uops = rng.randint(1, 4)
    # every chain hop costs at least one cycle; the longest source-to-result
    # path stays within 8 cycles
    total_latency = rng.randint(n_uops, 8)
    segments = [1] * n_uops
    for _ in range(total_latency - n_uops):
        segments[rng.randrange(n_uops)] += 1

    # both sources feed the first uop, so every operand pair sees the whole
    # chain; with one hop per uop the chain is never bound by port pressure
    # and dependency chains observe the declared latency exactly
    uops = []
    for i in range(n_uops):
        uop = {"ports": sorted(rng.choice(combos))}
        if i == 0:
            uop["reads"] = [0, 1]
        else:
            uop["after"] = [{"uop": i - 1, "cycles": segments[i - 1]}]
        if i == n_uops - 1:
            uop["writes"] = [{"op": 0, "cycles": segments[-1]}]
            if flags:
                uop["writes"].append({"op": 2, "cycles": 1})
        uops.append(uop)
    return {"uops": uops}


def _instruction_doc(name, flags: bool):
    operands = [
        {"kind": "gp-register", "access": "read-write", "width": 64},
        {"kind": "gp-register", "access": "read", "width": 64},
    ]
    if flags:
        operands.append(
            {
                "kind": "flags",
                "access": "write",
                "implicit": True,
                "flag-set": ["CF", "PF", "ZF", "SF", "OF"],
            }
        )
    return {
        "id": name,
        "mnemonic": name.upper(),
        "isa-class": "GP",
        "operands": operands,
    }


def extend_with_random_instructions(catalog_doc: dict, machine_doc: dict, count: int, seed: int):
    """Append ``count`` synthetic instructions to copies of the given catalog
    and machine documents; returns (catalog, machine)."""
    rng = random.Random(seed)
    combos = sorted(
        {tuple(sorted(ports)) for ports in machine_doc["functional-units"].values()}
    )
    catalog_doc = {
        "register-classes": catalog_doc["register-classes"],
        "instructions": list(catalog_doc["instructions"]),
    }
    machine_doc = dict(machine_doc)
    machine_doc["ground-truth"] = dict(machine_doc["ground-truth"])
    for i in range(count):
        name = f"rand{i:03d}"
        flags = rng.random() < 0.5
        catalog_doc["instructions"].append(_instruction_doc(name, flags))
        machine_doc["ground-truth"][name] = _random_entry(rng, combos, flags)
    catalog = catalog_from_document(catalog_doc)
    machine = machine_from_document(machine_doc)
    return catalog, machine
