import json

import pytest

from portbench import bench
from portbench.catalog import catalog_from_document
from portbench.kernel import (
    FlagsBinding,
    ImmBinding,
    Kernel,
    MemBinding,
    RegBinding,
    format_kernel,
)
from portbench.machine import execute, machine_from_document
from portbench.measure import SimulatorBackend, run_delta


def kernel_registers(kernel):
    regs = set()
    for inst in kernel.instances:
        for b in inst.bindings:
            if isinstance(b, RegBinding):
                regs.add(b.family)
    return regs


def check_bindings(kernel, catalog):
    """Kernel invariants: bindings match operand kinds, memory slots are
    distinct addresses."""
    slots = {}
    for inst in kernel.instances:
        instr = catalog.get(inst.instr_id)
        assert len(inst.bindings) == len(instr.operands)
        for op, binding in zip(instr.operands, inst.bindings):
            if op.kind == "flags":
                assert isinstance(binding, FlagsBinding)
            elif op.kind == "immediate":
                assert isinstance(binding, ImmBinding)
            elif op.kind == "memory":
                assert isinstance(binding, MemBinding)
                key = (binding.base.family, binding.offset)
                assert slots.setdefault(binding.slot, key) == key
            else:
                assert isinstance(binding, RegBinding)
                assert catalog.register_name(op.kind, op.width, binding.family) == binding.name
    addresses = {}
    for slot, key in slots.items():
        assert addresses.setdefault(key, slot) == slot, "slots must not alias"


# ---------------------------------------------------------------------------
# Blocking tables


def test_blocking_table_reference(catalog, backend, fast_config):
    table = bench.build_blocking_table(catalog, backend, "SSE", fast_config)
    combos = {tuple(sorted(c)) for c in table.entries}
    assert combos == {
        (0,), (1,), (4,), (5,), (0, 1), (0, 5), (1, 5), (2, 3), (0, 1, 5),
    }
    store = table.entries[frozenset({4})]
    assert store.instr_id == "mov_m64_r64"
    assert store.two_uop
    for combo, entry in table.entries.items():
        if entry.two_uop:
            continue
        assert not entry.two_uop
        instr = catalog.get(entry.instr_id)
        assert instr.isa_class in ("GP", "SSE")


def test_blocking_table_avx_excludes_sse(catalog, backend, fast_config):
    table = bench.build_blocking_table(catalog, backend, "AVX", fast_config)
    for entry in table.entries.values():
        assert catalog.get(entry.instr_id).isa_class in ("GP", "AVX")
    assert table.entries[frozenset({5})].instr_id == "vmovshdup_y_y"


def test_blocking_table_picks_highest_throughput(catalog, machine, fast_config):
    # an artificially slow candidate on the same group must lose
    doc = json.loads(json.dumps(machine.document))
    cat_doc = json.loads(json.dumps(catalog.document))
    slow = {
        "id": "aaa_slow_alu",
        "mnemonic": "SLOW",
        "isa-class": "GP",
        "operands": [
            {"kind": "gp-register", "access": "read-write", "width": 64},
            {"kind": "gp-register", "access": "read", "width": 64},
            {"kind": "flags", "access": "read-write", "implicit": True},
        ],
    }
    cat_doc["instructions"].append(slow)
    # reads and writes the flags: sequences serialize, throughput is poor
    doc["ground-truth"]["aaa_slow_alu"] = {
        "uops": [{"ports": [0, 1, 5], "reads": [0, 1, 2],
                  "writes": [{"op": 0, "cycles": 1}, {"op": 2, "cycles": 1}]}]
    }
    cat = catalog_from_document(cat_doc)
    mach = machine_from_document(doc)
    table = bench.build_blocking_table(cat, SimulatorBackend(mach), "SSE", fast_config)
    chosen = table.entries[frozenset({0, 1, 5})]
    assert chosen.instr_id != "aaa_slow_alu"


def test_uncoverable_combination(catalog, machine, fast_config):
    # remove every instruction that could block the load ports
    cat_doc = json.loads(json.dumps(catalog.document))
    doc = json.loads(json.dumps(machine.document))
    drop = {
        iid
        for iid, entry in machine.ground_truth.items()
        for uop in entry.uops
        if set(uop.ports) & {2, 3, 4}
    }
    cat_doc["instructions"] = [
        i for i in cat_doc["instructions"] if i["id"] not in drop
    ]
    for iid in drop:
        doc["ground-truth"].pop(iid)
    cat = catalog_from_document(cat_doc)
    mach = machine_from_document(doc)
    with pytest.raises(bench.UncoverableCombinationError) as exc:
        bench.build_blocking_table(cat, SimulatorBackend(mach), "SSE", fast_config)
    assert (2, 3) in exc.value.combos


def test_blockers_stay_on_their_combination(catalog, machine, backend, fast_config):
    # executing blocker-only kernels never records uops outside the
    # entry's combination (store entries also use the store-address ports)
    table = bench.build_blocking_table(catalog, backend, "SSE", fast_config)
    for combo, entry in table.entries.items():
        instr = catalog.get(entry.instr_id)
        kernel = bench.independent_sequence_kernel(instr, catalog, 8)
        snap = execute(machine, kernel.repeat(4))
        used = {p for p, v in snap.uops_per_port.items() if v}
        if entry.two_uop:
            allowed = combo | frozenset({2, 3})
        else:
            allowed = combo
        assert used <= allowed, (entry.instr_id, sorted(used), sorted(combo))


# ---------------------------------------------------------------------------
# Port probes


def test_port_probe_structure(catalog, backend, fast_config):
    table = bench.build_blocking_table(catalog, backend, "SSE", fast_config)
    instr = catalog.get("paddd_x_x")
    pc = frozenset({0, 5})
    kernel = bench.make_port_probe(instr, pc, 24, table, catalog)
    assert len(kernel) == 25
    blocker = table.entries[pc].instr_id
    assert all(inst.instr_id == blocker for inst in kernel.instances[:24])
    assert kernel.instances[24].instr_id == "paddd_x_x"
    check_bindings(kernel, catalog)


def test_port_probe_register_independence(catalog, backend, fast_config):
    table = bench.build_blocking_table(catalog, backend, "SSE", fast_config)
    instr = catalog.get("add_r64_r64")  # blocker and probe share the gp class
    pc = frozenset({0, 1, 5})
    kernel = bench.make_port_probe(instr, pc, 24, table, catalog)
    probe = kernel.instances[-1]
    probe_regs = {b.family for b in probe.bindings if isinstance(b, RegBinding)}
    blocker_regs = set()
    for inst in kernel.instances[:-1]:
        blocker_regs |= {b.family for b in inst.bindings if isinstance(b, RegBinding)}
    assert not (probe_regs & blocker_regs)


# ---------------------------------------------------------------------------
# Latency kernels


def probe_kinds(plan):
    return [(p.label, p.kind, p.same_register, p.value_class) for p in plan.probes]


def test_gp_chain_uses_sign_extension(catalog):
    plan = bench.make_latency_kernels(catalog.get("add_r64_r64"), 1, 0, catalog)
    chain_probe = next(p for p in plan.probes if not p.same_register)
    assert chain_probe.chain_instruction == "movsx_r64_r32"
    assert chain_probe.subtract == ("movsx_r64_r32",)
    # the instruction writes flags: a flags breaker must be in the kernel
    ids = [i.instr_id for i in chain_probe.kernel.instances]
    assert "test_r64_r64" in ids
    # read-write destination: overwrite its read side after the chain
    assert "mov_r64_imm64" in ids
    check_bindings(chain_probe.kernel, catalog)


def test_gp_same_register_variant_emitted(catalog):
    plan = bench.make_latency_kernels(catalog.get("add_r64_r64"), 1, 0, catalog)
    same = [p for p in plan.probes if p.same_register]
    assert len(same) == 1
    inst = same[0].kernel.instances[0]
    assert inst.bindings[0].family == inst.bindings[1].family


def test_simd_pair_has_two_chain_variants(catalog):
    plan = bench.make_latency_kernels(catalog.get("paddd_x_x"), 1, 0, catalog)
    chains = [p.chain_instruction for p in plan.probes if not p.same_register]
    assert sorted(chains) == ["movshdup_x_x", "pshufd_x_x_imm8"]
    assert sum(1 for p in plan.probes if p.same_register) == 1


def test_self_pair_is_plain_chain(catalog):
    plan = bench.make_latency_kernels(catalog.get("add_r64_r64"), 0, 0, catalog)
    assert len(plan.probes) == 1
    probe = plan.probes[0]
    assert probe.chain_instruction is None
    assert probe.subtract == ()


def test_pure_load_self_addressing(catalog):
    plan = bench.make_latency_kernels(catalog.get("mov_r64_m64"), 1, 0, catalog)
    probe = plan.probes[0]
    assert probe.label == "self-addressing load"
    assert probe.subtract == ()
    inst = probe.kernel.instances[0]
    mem = inst.bindings[1]
    assert isinstance(mem, MemBinding)
    assert mem.base.family == inst.bindings[0].family
    assert any(e.value_class == "own-address" for e in probe.kernel.init)


def test_memory_feedback_uses_double_xor(catalog):
    plan = bench.make_latency_kernels(catalog.get("add_r64_m64"), 1, 0, catalog)
    probe = plan.probes[0]
    ids = [i.instr_id for i in probe.kernel.instances]
    assert ids.count("xor_r64_r64") == 2
    assert probe.subtract == ("xor_r64_r64", "xor_r64_r64")
    assert "test_r64_r64" in ids  # flags breaker for the XOR feedback


def test_flags_to_register_chain(catalog):
    plan = bench.make_latency_kernels(catalog.get("cmovc_r64_r64"), 2, 0, catalog)
    probe = plan.probes[0]
    assert probe.chain_instruction == "test_r64_r64"
    test_inst = next(
        i for i in probe.kernel.instances if i.instr_id == "test_r64_r64"
    )
    cmov_inst = probe.kernel.instances[0]
    # the flag writer reads the chained destination register
    assert test_inst.bindings[0].family == cmov_inst.bindings[0].family


def test_store_round_trip(catalog):
    plan = bench.make_latency_kernels(catalog.get("mov_m64_r64"), 1, 0, catalog)
    probe = plan.probes[0]
    assert probe.kind == "round-trip"
    ids = [i.instr_id for i in probe.kernel.instances]
    assert ids == ["mov_m64_r64", "mov_r64_m64"]


def test_divider_value_classes(catalog):
    plan = bench.make_latency_kernels(catalog.get("div_r64"), 1, 1, catalog)
    classes = {p.value_class for p in plan.probes}
    assert classes == {"fast", "slow"}
    probe = plan.probes[0]
    ids = [i.instr_id for i in probe.kernel.instances]
    assert "and_r64_r64" in ids and "or_r64_r64" in ids
    assert probe.subtract == ("and_r64_r64", "or_r64_r64")
    assert any(e.value_class in ("fast", "slow") for e in probe.kernel.init)


def test_unchainable_pair_reports_reason(catalog):
    # register -> flags has no chain recipe in the visible case analysis
    plan = bench.make_latency_kernels(catalog.get("add_r64_r64"), 0, 2, catalog)
    assert plan.probes == []
    assert plan.unchainable


def test_removing_chain_collapses_to_throughput(catalog, machine, backend, fast_config):
    # the latency kernel realizes one dependency cycle: cutting the chain
    # instruction out collapses cycles per link to the throughput bound
    plan = bench.make_latency_kernels(catalog.get("imul_r64_r64"), 1, 0, catalog)
    probe = next(p for p in plan.probes if p.chain_instruction)
    chained = run_delta(probe.kernel, backend, fast_config).cycles_per_iteration
    cut = Kernel(
        instances=tuple(
            i for i in probe.kernel.instances if i.instr_id != probe.chain_instruction
        ),
        init=probe.kernel.init,
    )
    free = run_delta(cut, backend, fast_config).cycles_per_iteration
    assert chained >= 4  # latency 3 plus the chain
    assert free <= 2  # port bound


# ---------------------------------------------------------------------------
# Dependency breakers


def test_gp_breaker_is_immediate_move(catalog):
    op = catalog.get("add_r64_r64").operands[0]
    inst = bench.make_dep_breaker(op, catalog, RegBinding("RCX", "RCX"))
    assert inst.instr_id == "mov_r64_imm64"
    assert inst.bindings[0].family == "RCX"
    assert catalog.get(inst.instr_id).flags_operand is None


def test_flags_breaker_is_test_on_scratch(catalog):
    op = catalog.get("add_r64_r64").operands[2]
    inst = bench.make_dep_breaker(op, catalog, FlagsBinding())
    assert inst.instr_id == "test_r64_r64"
    assert inst.bindings[0].family == "R15"  # scratch family


def test_memory_breaker_is_immediate_store(catalog):
    op = catalog.get("mov_m64_r64").operands[0]
    target = MemBinding(slot="mem0", base=RegBinding("R14", "R14"))
    inst = bench.make_dep_breaker(op, catalog, target)
    assert inst.instr_id == "mov_m64_imm32"
    assert inst.bindings[0] == target


# ---------------------------------------------------------------------------
# Throughput sequences


def test_throughput_kernel_counts(catalog):
    assert len(bench.make_throughput_kernels(catalog.get("paddd_x_x"), catalog)) == 4
    assert len(bench.make_throughput_kernels(catalog.get("adc_r64_r64"), catalog)) == 8
    assert len(bench.make_throughput_kernels(catalog.get("div_r64"), catalog)) == 16


def test_throughput_sequences_are_independent(catalog):
    for kernel, label, length, _ in bench.make_throughput_kernels(
        catalog.get("add_r64_r64"), catalog
    ):
        written = set()
        for inst in kernel.instances:
            instr = catalog.get(inst.instr_id)
            for op, b in zip(instr.operands, inst.bindings):
                if not isinstance(b, RegBinding):
                    continue
                if op.is_read:
                    assert b.family not in written, label
            for op, b in zip(instr.operands, inst.bindings):
                if isinstance(b, RegBinding) and op.is_write:
                    written.add(b.family)
        check_bindings(kernel, catalog)


def test_kernel_listing_golden(catalog):
    plan = bench.make_latency_kernels(catalog.get("mov_r64_m64"), 1, 0, catalog)
    assert format_kernel(plan.probes[0].kernel, catalog) == (
        "; init mem0 = own-address\nMOV RAX, [RAX]"
    )
    plan = bench.make_latency_kernels(catalog.get("shld_r64_r64_imm8"), 1, 0, catalog)
    chain = next(p for p in plan.probes if p.chain_instruction)
    assert format_kernel(chain.kernel, catalog) == (
        "SHLD RBX, RAX, 1\n"
        "MOVSX RAX, EBX\n"
        "MOV RBX, 0\n"
        "TEST R15, R15"
    )


def test_register_pressure_is_flagged(catalog, backend, fast_config):
    # far more blockers than registers: rotation wraps and the kernel says so
    table = bench.build_blocking_table(catalog, backend, "SSE", fast_config)
    kernel = bench.make_port_probe(
        catalog.get("paddd_x_x"), frozenset({0, 1, 5}), 64, table, catalog
    )
    assert any("register-pressure" in note for note in kernel.notes)
