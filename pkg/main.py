"""
Command-line entry point of the meta LQR benchmark.

  gen-tasks  generate (or load) the configured task set and write it to the output directory
  train      run meta policy optimization and write the trace, tasks, diagnostics and run manifest
  verify     run the cross-oracle property suites and write a pass/fail report
  diag       write the diagnostics of a policy on the configured task set

Exit status is 0 on success, 1 when an experiment fails or a property does not hold and 2 on invalid input.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from config import PRESETS, ExperimentSpec, resolve_experiment_spec
from exceptions import ArgumentError, MetaLqrError, StabilityViolationError
from lqr_core import TaskSet
from results import DIAGNOSTICS_FILE_NAME, MANIFEST_FILE_NAME, REPORT_FILE_NAME, TASKS_FILE_NAME, \
    TRACE_FILE_NAME, TraceWriter, build_manifest, write_json, write_report
from task_data.AbstractTaskSource import AbstractTaskSource
from task_data.GeneratedTaskSource import GeneratedTaskSource
from task_data.SavedTaskSource import SavedTaskSource
from theory_diag import diagnose
from verify import SUITES, results_to_frame, run_property_suites
from zoo_meta import OptimizationMode, run_meta_optimization

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID_INPUT = 2


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog='meta-lqr', description="Zeroth-order meta policy optimization for LQR.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Verbosity of the diagnostics written to stderr.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML config file or JSON run manifest to replay.")
    common.add_argument("--preset", default=None, choices=sorted(PRESETS), help="Named experiment preset.")
    common.add_argument("--seed", type=int, default=None, help="Seed of task generation and optimization.")
    common.add_argument("--out", default=None, help="Output directory.")
    common.add_argument("--mode", default=None, choices=[mode.value for mode in OptimizationMode],
                        help="Zeroth-order estimation or the exact model-based meta-gradient.")

    subparsers.add_parser("gen-tasks", parents=[common], help="Generate the task set.")
    subparsers.add_parser("train", parents=[common], help="Run meta policy optimization.")
    verify_parser = subparsers.add_parser(
        "verify", parents=[common], help="Run the property suites.",
        description="Run the property suites. The default [verify] sample sizes (1000 sphere samples, 10 "
                    "repetitions) are scaled down for a quick check, --preset acceptance runs the full ones.")
    verify_parser.add_argument("--suites", nargs="+", default=list(SUITES), choices=list(SUITES),
                               help="Property suites to run; the task-set suite always runs.")
    diag_parser = subparsers.add_parser("diag", parents=[common], help="Diagnose a policy.")
    diag_parser.add_argument("--policy", default=None,
                             help="JSON file with the policy as nested lists or {rows, cols, entries}; "
                                  "the zero gain by default.")
    diag_parser.add_argument("--gamma", type=float, default=1.0, help="Sub-level set scale.")
    return parser.parse_args(argv)


def load_tasks(spec: ExperimentSpec) -> TaskSet:
    """The experiment's task set: the task file when given, else generated (through the hot-load cache if set)."""
    if spec.task_file is not None:
        return SavedTaskSource.cold_load_data(spec.task_file, store_in_hot_load=False)
    eta = spec.meta.adaptation_rate
    if spec.output.task_cache is None:
        return GeneratedTaskSource.cold_load_data(spec.taskgen, store_in_hot_load=False, adaptation_rate=eta)
    return GeneratedTaskSource.hot_load_data(spec.taskgen, allow_cold_load=True, file_name=spec.output.task_cache,
                                             adaptation_rate=eta)


def _task_source_descriptor(spec: ExperimentSpec) -> dict:
    if spec.task_file is not None:
        return SavedTaskSource.source_descriptor(spec.task_file)
    return GeneratedTaskSource.source_descriptor(spec.taskgen, adaptation_rate=spec.meta.adaptation_rate)


def _output_directory(spec: ExperimentSpec) -> Path:
    directory = Path(spec.output.directory)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def generate_task_file(spec: ExperimentSpec) -> int:
    tasks = load_tasks(spec)
    path = _output_directory(spec) / TASKS_FILE_NAME
    AbstractTaskSource.save_task_set(tasks, path, _task_source_descriptor(spec))
    logger.info("Wrote %d tasks to %s", len(tasks), path)
    return EXIT_OK


def run_experiment(spec: ExperimentSpec) -> int:
    """
    Meta-train from the zero gain and write manifest.json, tasks.json, trace.csv and diagnostics.json

    The trace is flushed per iteration, so a run stopped by a stability violation still leaves every record up to
      the violation, and its diagnostics describe the offending policy.

    :return: EXIT_OK, or EXIT_FAILURE when the run left the MAML-stabilizing set
    """
    directory = _output_directory(spec)
    tasks = load_tasks(spec)
    write_json(directory / MANIFEST_FILE_NAME, build_manifest(spec, spec.task_file))
    AbstractTaskSource.save_task_set(tasks, directory / TASKS_FILE_NAME, _task_source_descriptor(spec))

    K0 = np.zeros((tasks.control_dim, tasks.state_dim))
    status = EXIT_OK
    with TraceWriter(directory / TRACE_FILE_NAME, spec.output.record_wall_clock) as writer:
        try:
            trace = run_meta_optimization(tasks, K0, spec.meta, spec.mode, on_record=writer)
        except StabilityViolationError as error:
            logger.error("Experiment stopped: %s", error)
            trace = error.trace
            status = EXIT_FAILURE

    report = diagnose(tasks, trace.final_policy, spec.meta.adaptation_rate, K0=K0)
    write_json(directory / DIAGNOSTICS_FILE_NAME, report.to_dict())
    logger.info("Final average cost difference ratio %.6e after %d iterations, %d stability violations",
                trace.records[-1].ratio, trace.records[-1].iteration, len(trace.violations))
    return status


def run_verify(spec: ExperimentSpec, suites: Sequence[str] = tuple(SUITES)) -> int:
    tasks = load_tasks(spec)
    results = run_property_suites(spec.verify, spec.meta.seed, tasks, spec.meta.adaptation_rate, suites)
    path = _output_directory(spec) / REPORT_FILE_NAME
    write_report(path, results_to_frame(results))
    failures = [f"{result.suite}.{result.property}" for result in results if not result.passed]
    if failures:
        logger.error("%d of %d properties failed: %s", len(failures), len(results), ", ".join(failures))
        return EXIT_FAILURE
    logger.info("All %d properties hold, report written to %s", len(results), path)
    return EXIT_OK


def load_policy(path, tasks: TaskSet) -> np.ndarray:
    """
    :raises FileNotFoundError: if path does not exist
    :raises ArgumentError: if the file does not hold a policy of the task set's shape
    """
    try:
        raw = json.loads(Path(path).read_text(encoding='utf-8'))
    except json.JSONDecodeError as error:
        raise ArgumentError(f"{path} is not valid JSON: {error}")
    if isinstance(raw, dict):
        policy = AbstractTaskSource.matrix_from_dict(raw, 'policy')
    else:
        try:
            policy = np.array(raw, dtype=float)
        except (TypeError, ValueError):
            raise ArgumentError("policy must be a list of rows of numbers")
    return tasks[0].check_gain(policy, "policy")


def run_diagnostics(spec: ExperimentSpec, policy_path=None, gamma: float = 1.0) -> int:
    tasks = load_tasks(spec)
    K0 = np.zeros((tasks.control_dim, tasks.state_dim))
    K = K0 if policy_path is None else load_policy(policy_path, tasks)
    report = diagnose(tasks, K, spec.meta.adaptation_rate, K0=K0, gamma=gamma)
    path = _output_directory(spec) / DIAGNOSTICS_FILE_NAME
    write_json(path, report.to_dict())
    logger.info("Diagnostics written to %s, MAML-stabilizing on all tasks: %s", path, report.all_maml_stabilizing)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        spec = resolve_experiment_spec(args.preset, args.config, args.seed, args.out, args.mode)
        if args.command == "gen-tasks":
            return generate_task_file(spec)
        if args.command == "train":
            return run_experiment(spec)
        if args.command == "verify":
            return run_verify(spec, args.suites)
        return run_diagnostics(spec, args.policy, args.gamma)
    except (ArgumentError, FileNotFoundError) as error:
        logger.error("Invalid input: %s", error)
        return EXIT_INVALID_INPUT
    except MetaLqrError as error:
        logger.error("%s failed: %s", args.command, error)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
