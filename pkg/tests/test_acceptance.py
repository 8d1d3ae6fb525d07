"""Acceptance suite: one test per criterion, each printing a pass line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines; any
failure shows up as an ordinary pytest failure for that criterion.
"""

import itertools
import re
import time
from fractions import Fraction

import pytest

from portbench import bench, inference, lp
from portbench import reference_catalog_path, reference_machine_path
from portbench.cli import Pipeline, main
from portbench.inference import PortUsage, compute_throughput
from portbench.machine import ground_truth_port_usage
from portbench.measure import MeasurementConfig, SimulatorBackend, run_delta
from portbench.randgen import extend_with_random_instructions
from portbench.report import format_port_usage, read_results, write_results

CAT = str(reference_catalog_path())
MACH = str(reference_machine_path())


@pytest.fixture(scope="module")
def pipeline(catalog, machine, fast_config):
    return Pipeline(
        catalog=catalog,
        backend=SimulatorBackend(machine),
        mconfig=fast_config,
        aconfig=inference.AnalysisConfig(),
    )


@pytest.fixture(scope="module")
def full_results(pipeline, catalog):
    return [pipeline.characterize(instr) for instr in catalog.instructions]


def test_criterion_1_port_usage_oracle_equivalence(catalog, machine, fast_config):
    start = time.monotonic()
    rand_catalog, rand_machine = extend_with_random_instructions(
        catalog.document, machine.document, 200, seed=20240601
    )
    pipeline = Pipeline(
        catalog=rand_catalog,
        backend=SimulatorBackend(rand_machine),
        mconfig=fast_config,
        aconfig=inference.AnalysisConfig(),
    )
    instructions = [i for i in rand_catalog.instructions if i.id.startswith("rand")]
    assert len(instructions) == 200
    matches = 0
    for instr in instructions:
        latency = inference.infer_latency(
            instr, pipeline.backend, rand_catalog, fast_config,
            pipeline.aconfig, pipeline.calibrator,
        )
        usage = inference.infer_port_usage(
            instr,
            pipeline.backend,
            pipeline.table_for(instr),
            latency.max_latency() or Fraction(pipeline.aconfig.max_latency_cap),
            rand_catalog,
            fast_config,
            pipeline.aconfig,
        )
        truth = PortUsage.of(ground_truth_port_usage(rand_machine, instr.id))
        assert usage == truth, instr.id
        matches += 1
    elapsed = time.monotonic() - start
    assert matches == 200
    assert elapsed < 120, f"took {elapsed:.1f}s"
    print(
        f"\nPASS criterion 1: port usage matches ground truth on 200/200 "
        f"random instructions in {elapsed:.1f}s (< 120s)"
    )


def test_criterion_2_disambiguation_scenarios(catalog, pipeline):
    # two uops on {0,5} must come out as 2*p05, never 1*p0+1*p5
    result = pipeline.characterize(catalog.get("bswap_r64"))
    assert format_port_usage(result.port_usage) == "2*p05"
    # one uop on {0,5} plus one on {0,1,5} must not collapse into 2*p015
    result = pipeline.characterize(catalog.get("adc_r64_r64"))
    assert format_port_usage(result.port_usage) == "1*p015+1*p05"
    print(
        "\nPASS criterion 2: 2*p05 reported exactly; "
        "1*p015+1*p05 distinguished from 2*p015"
    )


def test_criterion_3_aes_scenario(catalog, pipeline):
    result = pipeline.characterize(catalog.get("aesdec_x_x"))
    assert result.latency.pairs[(0, 0)].cycles == 8
    assert result.latency.pairs[(1, 0)].cycles == 1
    print("\nPASS criterion 3: AES-style pairs infer lat(op1,op1)=8, lat(op2,op1)=1")


def test_criterion_4_shld_scenario(catalog, pipeline):
    result = pipeline.characterize(catalog.get("shld_r64_r64_imm8"))
    assert result.latency.pairs[(0, 0)].cycles == 3
    assert result.latency.pairs[(1, 0)].cycles == 4
    assert result.latency.pairs[(1, 0)].same_register.cycles == 1
    print(
        "\nPASS criterion 4: SHLD-style pairs infer 3/4 with distinct registers, "
        "1 with the same register"
    )


def test_criterion_5_movq2dq_scenario(catalog, machine, pipeline):
    # a {1,5} blocking instruction exists and is probed
    table = pipeline.table_for(catalog.get("movq2dq_x_m"))
    assert frozenset({1, 5}) in table.entries
    result = pipeline.characterize(catalog.get("movq2dq_x_m"))
    combos = {c for c, _ in result.port_usage.entries}
    assert frozenset({0, 1, 5}) in combos
    assert frozenset({1, 5}) not in combos
    assert format_port_usage(result.port_usage) == "1*p0+1*p015"
    print(
        "\nPASS criterion 5: second uop inferred as {0,1,5}, not {1,5}, "
        "under the {1,5} blocker"
    )


def _subset_enumeration_optimum(entries, ports):
    # independent brute force: enumerate every port subset; uops whose
    # combinations fit inside must run there
    best = Fraction(0)
    for size in range(1, len(ports) + 1):
        for team in itertools.combinations(ports, size):
            team_set = set(team)
            load = sum(n for combo, n in entries if combo <= team_set)
            if load:
                best = max(best, Fraction(load, size))
    return best


def test_criterion_6_throughput_lp():
    ports = (0, 1, 2, 3)
    combos = [
        frozenset(c) for k in range(1, 5) for c in itertools.combinations(ports, k)
    ]
    checked = 0
    for k in range(1, 4):
        for chosen in itertools.combinations(combos, k):
            for counts in itertools.product((1, 2, 3), repeat=k):
                entries = tuple(zip(chosen, counts))
                got = lp.solve(lp.LPInstance(ports=ports, entries=entries))
                want = _subset_enumeration_optimum(entries, ports)
                assert got == want, entries
                checked += 1
    # the 1/|P| law for every single-uop usage on the 6-port machine
    all_ports = (0, 1, 2, 3, 4, 5)
    for size in range(1, 7):
        for combo in itertools.combinations(all_ports, size):
            usage = PortUsage.of({frozenset(combo): 1})
            assert compute_throughput(usage) == Fraction(1, size)
    print(
        f"\nPASS criterion 6: LP equals brute-force enumeration on {checked} "
        "exhaustive instances; 1/|P| law holds for all 63 single-uop usages"
    )


def test_criterion_7_overhead_cancellation(catalog, machine):
    from portbench.kernel import FlagsBinding, Instance, Kernel, RegBinding

    kernels = [
        Kernel(instances=(Instance("bswap_r64", (RegBinding("RAX", "RAX"),)),)),
        Kernel(
            instances=(
                Instance(
                    "add_r64_r64",
                    (RegBinding("RAX", "RAX"), RegBinding("RBX", "RBX"), FlagsBinding()),
                ),
            )
        ),
    ]
    configs = [
        MeasurementConfig(),  # the 10/110/100 defaults
        MeasurementConfig(n_small=2, n_large=12, repetitions=1),
    ]
    for kernel in kernels:
        for config in configs:
            reference = None
            for overhead in (0, 37, 1000):
                backend = SimulatorBackend(machine, overhead_cycles=overhead)
                result = run_delta(kernel, backend, config)
                if reference is None:
                    reference = result
                else:
                    assert result == reference  # bit-identical
    print(
        "\nPASS criterion 7: run_delta results identical under injected "
        "per-run overheads of 0, 37, and 1000 cycles"
    )


def test_criterion_8_divider_handling(catalog, pipeline):
    result = pipeline.characterize(catalog.get("div_r64"))
    classes = dict(result.latency.pairs[(1, 1)].value_classes)
    assert classes["slow"] > classes["fast"]
    assert result.throughput.computed is None
    assert result.throughput.computed_reason
    measured_classes = dict(result.throughput.measured.value_classes)
    assert measured_classes["slow"] > measured_classes["fast"]
    print(
        "\nPASS criterion 8: slow-class latency "
        f"({classes['slow']}) > fast-class ({classes['fast']}); "
        "LP declares the throughput not computable"
    )


_P_TERM = re.compile(r"^\d+\*p[0-9A-V]+$")


def test_criterion_9_report_round_trip(tmp_path, full_results):
    for fmt in ("json", "xml"):
        path = write_results(full_results, fmt, tmp_path / f"all.{fmt}")
        back = read_results(path)
        assert back == sorted(full_results, key=lambda r: r.instruction)
    for result in full_results:
        text = format_port_usage(result.port_usage)
        if text == "":
            assert not result.port_usage.entries
            continue
        for term in text.split("+"):
            assert _P_TERM.match(term), term
            ports = term.partition("*p")[2]
            assert list(ports) == sorted(set(ports)), term
    print(
        f"\nPASS criterion 9: read(write(r)) = r for {len(full_results)} results "
        "in XML and JSON; p-notation matches the grammar"
    )


def test_criterion_10_end_to_end_validation(catalog, capsys):
    assert len(catalog.instructions) >= 30
    start = time.monotonic()
    code = main(["validate", "--catalog", CAT, "--machine", MACH])
    elapsed = time.monotonic() - start
    out = capsys.readouterr().out
    assert code == 0
    n = len(catalog.instructions)
    assert f"agreement: {n}/{n} (100.00%)" in out
    assert elapsed < 300, f"took {elapsed:.1f}s"
    # the bundled catalog exercises every dependency-chain case
    kinds = {
        "gp chains": "add_r64_r64",
        "simd dual chains": "paddd_x_x",
        "cross-class": "movq_x_r64",
        "memory source": "add_r64_m64",
        "self-addressing load": "mov_r64_m64",
        "flags source": "cmovc_r64_r64",
        "store round trip": "mov_m64_r64",
        "divider classes": "div_r64",
    }
    for label, instr_id in kinds.items():
        assert catalog.has(instr_id), label
    print(
        f"\nPASS criterion 10: validate exits 0 with 100% agreement on the "
        f"reference machine in {elapsed:.1f}s (< 300s)"
    )
