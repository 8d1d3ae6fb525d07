"""Command-line driver: analyze, validate, list.

Exit codes: 0 success, 1 analysis inconsistency or validation mismatch,
2 usage/configuration errors.  Every flag can also be set through an
environment variable with the PORTBENCH_ prefix (e.g. PORTBENCH_CATALOG).
"""

from __future__ import annotations

import argparse
import fnmatch
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from . import bench, inference
from .catalog import Catalog, CatalogError, load_catalog
from .machine import (
    MachineError,
    ground_truth_latency,
    ground_truth_port_usage,
    load_machine,
    validate_against_catalog,
)
from .measure import MeasurementConfig, MeasurementError, SimulatorBackend
from .randgen import extend_with_random_instructions
from .report import (
    CharacterizationResult,
    Provenance,
    write_results,
    write_summary,
)

EXIT_OK = 0
EXIT_ANALYSIS = 1
EXIT_USAGE = 2


def _env(name, fallback=None):
    return os.environ.get("PORTBENCH_" + name.upper().replace("-", "_"), fallback)


def _add_common(parser):
    parser.add_argument("--catalog", default=_env("catalog"), help="instruction catalog (JSON or XML)")
    parser.add_argument("--machine", default=_env("machine"), help="machine description (JSON or XML)")
    parser.add_argument(
        "--filter",
        action="append",
        default=None,
        help="instruction id/mnemonic glob; may be given multiple times",
    )
    parser.add_argument("--n-small", type=int, default=int(_env("n-small", "2")))
    parser.add_argument("--n-large", type=int, default=int(_env("n-large", "12")))
    parser.add_argument("--reps", type=int, default=int(_env("reps", "1")))
    parser.add_argument(
        "--aggregator", choices=["mean", "median"], default=_env("aggregator", "mean")
    )
    parser.add_argument("--seed", type=int, default=int(_env("seed", "0")))
    parser.add_argument("--jobs", type=int, default=int(_env("jobs", "1")))


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="portbench",
        description="Characterize instruction latency, throughput, and port "
        "usage with generated microbenchmarks on a simulated machine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="characterize instructions and write results")
    _add_common(analyze)
    analyze.add_argument("--out", default=_env("out"), help="result file path")
    analyze.add_argument("--format", choices=["json", "xml"], default=_env("format", "json"))
    analyze.add_argument(
        "--report-dir",
        default=_env("report-dir"),
        help="also write summary.csv and figures into this directory",
    )

    validate = sub.add_parser(
        "validate", help="characterize and compare against the machine's ground truth"
    )
    _add_common(validate)
    validate.add_argument("--out", default=None, help="optionally write results too")
    validate.add_argument("--format", choices=["json", "xml"], default="json")
    validate.add_argument(
        "--random",
        type=int,
        default=0,
        metavar="N",
        help="validate N seeded random instructions instead of the catalog",
    )
    validate.add_argument(
        "--inject-blocking-fault",
        action="store_true",
        help="deliberately corrupt the blocking table (self-test)",
    )

    lst = sub.add_parser("list", help="print catalog entries")
    lst.add_argument("--catalog", default=_env("catalog"))
    lst.add_argument("--json", action="store_true")
    return parser


class UsageError(Exception):
    pass


def _load_inputs(args):
    if not args.catalog:
        raise UsageError("--catalog is required")
    if not args.machine:
        raise UsageError("--machine is required")
    for path in (args.catalog, args.machine):
        if not Path(path).exists():
            raise UsageError(f"no such file: {path}")
    catalog = load_catalog(args.catalog)
    machine = load_machine(args.machine, catalog=catalog)
    return catalog, machine


def _filter_instructions(catalog, patterns):
    if not patterns:
        return list(catalog.instructions)
    selected = []
    for instr in catalog.instructions:
        if any(
            fnmatch.fnmatchcase(instr.id, pat) or fnmatch.fnmatchcase(instr.mnemonic, pat)
            for pat in patterns
        ):
            selected.append(instr)
    if not selected:
        raise UsageError(f"filter matched no instructions: {patterns}")
    return selected


def _measurement_config(args):
    try:
        return MeasurementConfig(
            n_small=args.n_small,
            n_large=args.n_large,
            repetitions=args.reps,
            aggregator=args.aggregator,
        )
    except MeasurementError as exc:
        raise UsageError(str(exc)) from exc


@dataclass
class Pipeline:
    """Shared state for characterizing a set of instructions."""

    catalog: Catalog
    backend: SimulatorBackend
    mconfig: MeasurementConfig
    aconfig: inference.AnalysisConfig
    seed: int = 0

    def __post_init__(self):
        bench.validate_breaker_support(self.catalog)
        self.calibrator = inference.ChainCalibrator(
            self.catalog, self.backend, self.mconfig, self.aconfig
        )
        self.tables = {}

    def table_for(self, instr) -> bench.BlockingTable:
        isa = "AVX" if instr.isa_class == "AVX" else "SSE"
        if isa not in self.tables:
            self.tables[isa] = bench.build_blocking_table(
                self.catalog, self.backend, isa, self.mconfig
            )
        return self.tables[isa]

    def provenance(self) -> Provenance:
        return Provenance(
            backend=self.backend.describe(),
            machine_hash=getattr(self.backend, "spec_hash", "unknown"),
            config=f"{self.mconfig.describe()},seed={self.seed}",
        )

    def characterize(self, instr) -> CharacterizationResult:
        latency = inference.infer_latency(
            instr, self.backend, self.catalog, self.mconfig, self.aconfig, self.calibrator
        )
        max_latency = latency.max_latency()
        if max_latency is None:
            max_latency = Fraction(self.aconfig.max_latency_cap)
        port_usage = inference.infer_port_usage(
            instr,
            self.backend,
            self.table_for(instr),
            max_latency,
            self.catalog,
            self.mconfig,
            self.aconfig,
        )
        measured = inference.measure_throughput(
            instr, self.backend, self.catalog, self.mconfig
        )
        divider = instr.has_attribute("uses-divider")
        computed = inference.compute_throughput(port_usage, divider)
        throughput = inference.ThroughputResult(
            measured=measured,
            computed=computed,
            computed_reason="divider unit is not pipelined" if divider else None,
        )
        zero_idiom = any(
            pair.same_register is not None
            and pair.same_register.kind == "zero-idiom-fast-path"
            for pair in latency.pairs.values()
        )
        return CharacterizationResult(
            instruction=instr.id,
            port_usage=port_usage,
            latency=latency,
            throughput=throughput,
            zero_idiom=zero_idiom,
            provenance=self.provenance(),
        )


def _run_pipeline(pipeline, instructions, jobs):
    """Characterize all instructions; failures are collected, not fatal."""
    results = []
    failures = []
    # the blocking tables are built once, up front, so workers share them
    for instr in instructions:
        pipeline.table_for(instr)

    def work(instr):
        return pipeline.characterize(instr)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [(instr, pool.submit(work, instr)) for instr in instructions]
            for instr, future in futures:
                try:
                    results.append(future.result())
                except (inference.InconsistencyError, bench.GenerationError) as exc:
                    failures.append((instr.id, str(exc)))
    else:
        for instr in instructions:
            try:
                results.append(work(instr))
            except (inference.InconsistencyError, bench.GenerationError) as exc:
                failures.append((instr.id, str(exc)))
    return results, failures


def cmd_analyze(args) -> int:
    catalog, machine = _load_inputs(args)
    instructions = _filter_instructions(catalog, args.filter)
    if not args.out:
        raise UsageError("--out is required")
    mconfig = _measurement_config(args)
    pipeline = Pipeline(
        catalog=catalog,
        backend=SimulatorBackend(machine),
        mconfig=mconfig,
        aconfig=inference.AnalysisConfig(),
        seed=args.seed,
    )
    results, failures = _run_pipeline(pipeline, instructions, args.jobs)
    write_results(results, args.format, args.out)
    print(f"wrote {len(results)} result(s) to {args.out}")
    if args.report_dir:
        report_dir = Path(args.report_dir)
        report_dir.mkdir(parents=True, exist_ok=True)
        summary = write_summary(results, report_dir / "summary.csv")
        from . import figures  # matplotlib import deferred until needed

        paths = figures.render_figures(results, report_dir, ports=machine.ports)
        print(f"wrote {summary} and {len(paths)} figure(s) to {report_dir}")
    if failures:
        print(f"{len(failures)} instruction(s) failed:", file=sys.stderr)
        for instr_id, message in failures:
            print(f"  {instr_id}: {message}", file=sys.stderr)
        return EXIT_ANALYSIS
    return EXIT_OK


# ---------------------------------------------------------------------------
# Validation against ground truth


def _compare_result(result, machine, catalog):
    """(category, description) mismatches for one characterization vs. the
    ground truth; categories are port-usage, latency, throughput."""
    mismatches = []
    instr_id = result.instruction
    truth_usage = inference.PortUsage.of(ground_truth_port_usage(machine, instr_id))
    if truth_usage != result.port_usage:
        mismatches.append(
            (
                "port-usage",
                f"port usage: inferred {result.port_usage.entries} "
                f"!= truth {truth_usage.entries}",
            )
        )
    entry = machine.ground_truth[instr_id]
    for (src, dst), pair in sorted(result.latency.pairs.items()):
        if pair.kind == "round-trip":
            continue  # store-load round trips have no single-edge truth
        if pair.kind == "upper-bound":
            truth = ground_truth_latency(machine, instr_id, src, dst)
            if truth is not None and pair.cycles < truth:
                mismatches.append(
                    ("latency",
                     f"lat({src},{dst}): upper bound {pair.cycles} below truth {truth}")
                )
            continue
        if pair.value_classes:
            for name, cycles in pair.value_classes:
                truth = ground_truth_latency(
                    machine, instr_id, src, dst, value_class=name
                )
                if truth is not None and cycles != truth:
                    mismatches.append(
                        ("latency",
                         f"lat({src},{dst})[{name}]: inferred {cycles} != truth {truth}")
                    )
        else:
            truth = ground_truth_latency(machine, instr_id, src, dst)
            if truth is None or pair.cycles != truth:
                mismatches.append(
                    ("latency",
                     f"lat({src},{dst}): inferred {pair.cycles} != truth {truth}")
                )
        sr = pair.same_register
        if sr is not None and sr.kind == "exact" and sr.cycles >= 1:
            # all register operands of the class share one register, so the
            # observable latency is the worst path from any of them
            instr = catalog.get(instr_id)
            sop = instr.operands[src]
            group = [
                op.index
                for op in instr.register_operands(kind=sop.kind)
                if op.fixed_register is None and op.is_read
            ]
            paths = [
                ground_truth_latency(machine, instr_id, s, dst, same_register=True)
                for s in group
            ]
            paths = [p for p in paths if p is not None]
            truth = max(paths) if paths else None
            if truth is not None and sr.cycles != truth:
                mismatches.append(
                    ("latency",
                     f"lat({src},{dst}) same-register: inferred {sr.cycles} "
                     f"!= truth {truth}")
                )
    divider = any(u.divider_cycles for u in entry.uops)
    truth_tp = inference.compute_throughput(truth_usage, divider)
    if truth_tp != result.throughput.computed:
        mismatches.append(
            (
                "throughput",
                f"computed throughput {result.throughput.computed} != truth {truth_tp}",
            )
        )
    return mismatches


def cmd_validate(args) -> int:
    catalog, machine = _load_inputs(args)
    if args.random:
        if catalog.document is None or machine.document is None:
            raise UsageError("--random needs document-backed catalog/machine")
        catalog, machine = extend_with_random_instructions(
            catalog.document, machine.document, args.random, args.seed
        )
        validate_against_catalog(machine, catalog)
        instructions = [i for i in catalog.instructions if i.id.startswith("rand")]
    else:
        instructions = _filter_instructions(catalog, args.filter)
    mconfig = _measurement_config(args)
    pipeline = Pipeline(
        catalog=catalog,
        backend=SimulatorBackend(machine),
        mconfig=mconfig,
        aconfig=inference.AnalysisConfig(),
        seed=args.seed,
    )
    if args.inject_blocking_fault:
        for instr in instructions:
            pipeline.table_for(instr)
        for table in pipeline.tables.values():
            combos = sorted(table.entries, key=lambda c: (len(c), sorted(c)))
            small = combos[0]
            big = next((c for c in reversed(combos) if small < c), None)
            if big is None:
                raise UsageError("no nested port combinations to corrupt")
            table.entries[small] = table.entries[big]
            print(
                f"injected fault: blocking entry for {tuple(sorted(small))} now "
                f"uses {table.entries[big].instr_id}"
            )

    results, failures = _run_pipeline(pipeline, instructions, args.jobs)
    agree = 0
    aspects = {"port-usage": 0, "latency": 0, "throughput": 0}
    for result in sorted(results, key=lambda r: r.instruction):
        problems = _compare_result(result, machine, catalog)
        bad_aspects = {category for category, _ in problems}
        for aspect in aspects:
            if aspect not in bad_aspects:
                aspects[aspect] += 1
        if problems:
            print(f"MISMATCH {result.instruction}")
            for _, message in problems:
                print(f"    {message}")
        else:
            agree += 1
            print(f"OK       {result.instruction}")
    for instr_id, message in failures:
        print(f"ERROR    {instr_id}: {message}")
    total = len(instructions)

    def pct(n):
        return f"{100 * n / total:.2f}%" if total else "0.00%"

    print(
        f"agreement: {agree}/{total} ({pct(agree)}) on {machine.name} "
        f"[port usage {pct(aspects['port-usage'])}, "
        f"latency {pct(aspects['latency'])}, "
        f"throughput {pct(aspects['throughput'])}]"
    )
    if args.out:
        write_results(results, args.format, args.out)
        print(f"wrote {len(results)} result(s) to {args.out}")
    return EXIT_OK if agree == total else EXIT_ANALYSIS


def cmd_list(args) -> int:
    if not args.catalog:
        raise UsageError("--catalog is required")
    if not Path(args.catalog).exists():
        raise UsageError(f"no such file: {args.catalog}")
    catalog = load_catalog(args.catalog)
    if args.json:
        import json

        entries = []
        for instr in catalog.instructions:
            entries.append(
                {
                    "id": instr.id,
                    "mnemonic": instr.mnemonic,
                    "isa-class": instr.isa_class,
                    "operands": [
                        {
                            "kind": op.kind,
                            "access": op.access,
                            "width": op.width,
                            "implicit": op.implicit,
                        }
                        for op in instr.operands
                    ],
                    "attributes": sorted(instr.attributes),
                }
            )
        print(json.dumps(entries, indent=1))
        return EXIT_OK
    for instr in catalog.instructions:
        ops = ", ".join(
            ("*" if op.implicit else "")
            + (op.kind.replace("-register", "") + (str(op.width) if op.width else ""))
            + f"[{op.access}]"
            for op in instr.operands
        )
        attrs = " {" + ",".join(sorted(instr.attributes)) + "}" if instr.attributes else ""
        print(f"{instr.id:24s} {instr.mnemonic:10s} {instr.isa_class:3s} {ops}{attrs}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "analyze":
            return cmd_analyze(args)
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "list":
            return cmd_list(args)
        raise UsageError(f"unknown command {args.command}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CatalogError, MachineError, MeasurementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except bench.UncoverableCombinationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
