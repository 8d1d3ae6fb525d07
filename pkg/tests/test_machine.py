import json
from collections import Counter

import pytest

from portbench.kernel import FlagsBinding, Instance, Kernel, MemBinding, RegBinding
from portbench.machine import (
    MachineError,
    execute,
    ground_truth_latency,
    ground_truth_port_usage,
    load_machine,
    machine_from_document,
)


def reg(name, family=None):
    return RegBinding(name=name, family=family or name)


def alu_instance(dst="RAX", src="RBX"):
    return Instance("add_r64_r64", (reg(dst), reg(src), FlagsBinding()))


def imul_chain(n):
    return Kernel(instances=tuple(
        Instance("imul_r64_r64", (reg("RAX"), reg("RBX"), FlagsBinding()))
        for _ in range(n)
    ))


def independent_addps(n):
    return Kernel(instances=tuple(
        Instance(
            "addps_x_x",
            (reg(f"XMM{i % 8}"), reg(f"XMM{8 + i % 4}")),
        )
        for i in range(n)
    ))


def test_reference_machine_loads(machine):
    assert machine.ports == (0, 1, 2, 3, 4, 5)
    assert machine.issue_width == 4


def test_unknown_port_rejected(machine):
    doc = json.loads(json.dumps(machine.document))
    doc["ground-truth"]["add_r64_r64"]["uops"][0]["ports"] = [9]
    with pytest.raises(MachineError, match="add_r64_r64"):
        machine_from_document(doc)


def test_missing_latency_edge_rejected(catalog, machine):
    doc = json.loads(json.dumps(machine.document))
    # drop the register write; the (op1 -> op0) pair loses its only path
    doc["ground-truth"]["add_r64_r64"]["uops"][0]["writes"] = [
        {"op": 2, "cycles": 1}
    ]
    with pytest.raises(MachineError, match=r"missing latency edge"):
        m = machine_from_document(doc)
        from portbench.machine import validate_against_catalog

        validate_against_catalog(m, catalog)


def test_eliminated_uop_must_have_no_ports(machine):
    doc = json.loads(json.dumps(machine.document))
    doc["ground-truth"]["mov_r64_r64"]["uops"][0]["ports"] = [0]
    with pytest.raises(MachineError, match="eliminated"):
        machine_from_document(doc)


def test_hundred_independent_uops_two_ports(machine):
    snap = execute(machine, independent_addps(100))
    # 100 uops over two ports: 50 cycles plus pipeline fill
    assert 50 <= snap.cycles <= 55
    assert snap.uops_per_port[0] == 50
    assert snap.uops_per_port[1] == 50


def test_self_dependent_chain(machine):
    k = 50
    snap = execute(machine, imul_chain(k))
    assert 3 * k <= snap.cycles <= 3 * k + 5


def test_empty_kernel(machine):
    snap = execute(machine, Kernel(instances=()))
    assert snap.cycles == 0
    assert snap.total_uops == 0
    assert all(v == 0 for v in snap.uops_per_port.values())


def test_determinism(machine):
    kernel = independent_addps(64)
    a = execute(machine, kernel)
    b = execute(machine, kernel)
    assert a == b


def test_port_capacity_one_uop_per_cycle(machine):
    trace = []
    execute(machine, independent_addps(100), trace=trace)
    per_cycle_port = Counter((c, p) for c, p, _, _ in trace)
    assert all(count == 1 for count in per_cycle_port.values())


def test_counter_conservation(machine):
    # executed port counts plus eliminated uops account for every uop
    movs = Kernel(instances=tuple(
        Instance("mov_r64_r64", (reg("RAX"), reg("RBX"))) for _ in range(10)
    ))
    snap = execute(machine, movs)
    assert snap.total_uops == 10
    assert snap.executed_uops == 0  # all eliminated
    mixed = Kernel(instances=movs.instances + independent_addps(10).instances)
    snap = execute(machine, mixed)
    assert snap.total_uops == 20
    assert snap.executed_uops == 10


@pytest.mark.parametrize(
    "first,second",
    [
        (8, 8),
        (1, 30),
        (17, 3),
    ],
)
def test_concatenation_monotonicity(machine, first, second):
    ka = independent_addps(first)
    kb = imul_chain(second)
    combined = Kernel(instances=ka.instances + kb.instances)
    ca = execute(machine, ka).cycles
    cb = execute(machine, kb).cycles
    cc = execute(machine, combined).cycles
    slack = (first + second + machine.issue_width) // machine.issue_width + 2
    assert cc <= ca + cb + slack
    assert cc >= max(ca, cb)


def test_ground_truth_port_usage(machine):
    # two uops that may each use ports {0,5}
    assert ground_truth_port_usage(machine, "bswap_r64") == {frozenset({0, 5}): 2}
    assert ground_truth_port_usage(machine, "movq2dq_x_m") == {
        frozenset({0}): 1,
        frozenset({0, 1, 5}): 1,
    }
    # eliminated-only entries have no port usage
    assert ground_truth_port_usage(machine, "mov_r64_r64") == {}


def test_ground_truth_latency_paths(machine):
    assert ground_truth_latency(machine, "aesdec_x_x", 0, 0) == 8
    assert ground_truth_latency(machine, "aesdec_x_x", 1, 0) == 1
    assert ground_truth_latency(machine, "div_r64", 1, 1, value_class="slow") == 24
    assert ground_truth_latency(machine, "shld_r64_r64_imm8", 0, 0, same_register=True) == 1
    assert ground_truth_latency(machine, "test_r64_r64", 0, 2) == 1
    # unreachable pair
    assert ground_truth_latency(machine, "mov_r64_m64", 1, 1) is None


def test_store_load_forwarding(machine):
    # store feeding a load through one slot: the loop runs at the forward
    # latency, well below store completion plus a full load
    store = Instance(
        "mov_m64_r64",
        (MemBinding(slot="mem0", base=reg("RBX")), reg("RAX")),
    )
    load = Instance(
        "mov_r64_m64",
        (reg("RAX"), MemBinding(slot="mem0", base=reg("RBX"))),
    )
    n = 40
    kernel = Kernel(instances=(store, load) * n)
    snap = execute(machine, kernel)
    per_round_trip = snap.cycles / n
    assert machine.forward_latency <= per_round_trip <= machine.forward_latency + 2


def test_divider_occupancy_serializes(machine):
    # independent divides still wait for the non-pipelined divider
    insts = tuple(
        Instance(
            "div_r64",
            (reg(f"R{8 + i % 4}"), reg("RAX"), FlagsBinding()),
        )
        for i in range(12)
    )
    snap = execute(machine, Kernel(instances=insts))
    occupancy = machine.ground_truth["div_r64"].value_classes["fast"].occupancy
    assert snap.cycles >= occupancy * 11


def test_fractional_elimination_mode(machine):
    doc = json.loads(json.dumps(machine.document))
    doc["fractional-elimination"] = {"period": 3, "ports": [0, 1, 5], "latency": 1}
    fractional = machine_from_document(doc)
    movs = Kernel(instances=tuple(
        Instance("mov_r64_r64", (reg("RAX"), reg("RBX"))) for _ in range(30)
    ))
    snap = execute(fractional, movs)
    # every third instance is eliminated, the rest execute on real ports
    assert snap.executed_uops == 20
    assert execute(machine, movs).executed_uops == 0


def test_unknown_instruction_rejected(machine):
    kernel = Kernel(instances=(Instance("nope", (reg("RAX"),)),))
    with pytest.raises(MachineError, match="nope"):
        execute(machine, kernel)


def test_xml_machine_document(tmp_path, catalog):
    xml = """
    <machine name="mini" issue-width="4" load-latency="4" forward-latency="4">
      <ports>0 1 2 3 4 5</ports>
      <divider-ports>0</divider-ports>
      <functional-units>
        <unit name="alu" ports="0 1 5"/>
        <unit name="load" ports="2 3"/>
      </functional-units>
      <ground-truth>
        <entry id="add_r64_r64">
          <uop ports="0 1 5" reads="0 1">
            <write op="0" cycles="1"/><write op="2" cycles="1"/>
          </uop>
        </entry>
      </ground-truth>
    </machine>
    """
    path = tmp_path / "machine.xml"
    path.write_text(xml)
    m = load_machine(path)
    assert m.ports == (0, 1, 2, 3, 4, 5)
    assert ground_truth_latency(m, "add_r64_r64", 1, 0) == 1


def test_unbound_operand_rejected(machine):
    kernel = Kernel(instances=(Instance("add_r64_r64", (reg("RAX"),)),))
    with pytest.raises(MachineError, match="unbound"):
        execute(machine, kernel)


def test_xml_entry_features(tmp_path):
    xml = """
    <machine name="mini" issue-width="4" load-latency="4" forward-latency="4">
      <ports>0 1 2 3 4 5</ports>
      <divider-ports>0</divider-ports>
      <functional-units><unit name="alu" ports="0 1 5"/><unit name="div" ports="0"/></functional-units>
      <bypass-delays><delay from="int" to="fp" cycles="1"/></bypass-delays>
      <fractional-elimination period="3" ports="0 1 5" latency="1"/>
      <ground-truth>
        <entry id="twostep">
          <uop ports="0" reads="1" domain="int"/>
          <uop ports="0 1 5" domain="int">
            <after uop="0" cycles="7"/><write op="0" cycles="1"/>
          </uop>
          <same-reg operands="0 1">
            <uop ports="0 1 5" reads="0 1"><write op="0" cycles="1"/></uop>
            <uop ports="0 1 5"/>
          </same-reg>
        </entry>
        <entry id="divlike" class-key-operands="0 1">
          <uop ports="0" reads="0 1" divider-cycles="4"><write op="0" cycles="8"/></uop>
          <value-class name="fast" latency="8" occupancy="4"/>
          <value-class name="slow" latency="24" occupancy="18"/>
          <value-effect op="0" from="1"/>
        </entry>
        <entry id="storish">
          <uop ports="0 1 5" address-reads="0" reads="1">
            <write op="0" cycles="forward-latency"/>
          </uop>
        </entry>
      </ground-truth>
    </machine>
    """
    path = tmp_path / "rich.xml"
    path.write_text(xml)
    m = load_machine(path)
    assert ground_truth_latency(m, "twostep", 1, 0) == 8
    assert ground_truth_latency(m, "twostep", 1, 0, same_register=True) == 1
    assert ground_truth_latency(m, "divlike", 0, 0, value_class="slow") == 24
    entry = m.ground_truth["divlike"]
    assert entry.value_effect == (0, 1)
    assert entry.class_key_operands == (0, 1)
    storish = m.ground_truth["storish"].uops[0]
    assert any(r.address_only for r in storish.reads)
    assert storish.writes[0].cycles == m.forward_latency
    assert m.fractional_elimination.period == 3
    assert m.bypass(("int"), ("fp")) == 1
