"""Result files of an experiment: the learning-trace CSV, the property report, diagnostics and the run manifest."""
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
import pandera as pa

from config import LIBRARY_VERSION, ExperimentSpec, experiment_spec_to_dict
from zoo_meta import IterationRecord, LearningTrace

logger = logging.getLogger(__name__)

TRACE_FILE_NAME = 'trace.csv'
TASKS_FILE_NAME = 'tasks.json'
DIAGNOSTICS_FILE_NAME = 'diagnostics.json'
MANIFEST_FILE_NAME = 'manifest.json'
REPORT_FILE_NAME = 'verify_report.csv'

LearningTraceDataFrame = pa.DataFrameSchema({
    'iteration': pa.Column(pa.Int, pa.Check.ge(0)),
    'ratio': pa.Column(pa.Float),
    'meta_grad_norm': pa.Column(pa.Float, nullable=True),
    r'gap_\d+': pa.Column(pa.Float, regex=True),
    'violation': pa.Column(pa.Bool),
    'meta_objective': pa.Column(pa.Float, nullable=True),
    'estimate_error': pa.Column(pa.Float, nullable=True),
    r'K_\d+_\d+': pa.Column(pa.Float, regex=True),
    'wall_secs': pa.Column(pa.Float, required=False),
})

PropertyReportDataFrame = pa.DataFrameSchema({
    'suite': pa.Column(pa.String),
    'property': pa.Column(pa.String),
    'passed': pa.Column(pa.Bool),
    'measured': pa.Column(pa.Float, nullable=True),
    'threshold': pa.Column(pa.Float, nullable=True),
    'detail': pa.Column(pa.String),
})


def record_to_row(record: IterationRecord, record_wall_clock: bool = False) -> dict:
    row = {
        'iteration': record.iteration,
        'ratio': record.ratio,
        'meta_grad_norm': record.meta_gradient_norm,
    }
    row.update({f'gap_{i}': gap for i, gap in enumerate(record.gaps)})
    row['violation'] = record.violation
    row['meta_objective'] = record.meta_objective
    row['estimate_error'] = record.estimate_error
    row.update({f'K_{r}_{c}': float(record.policy[r, c])
                for r in range(record.policy.shape[0]) for c in range(record.policy.shape[1])})
    if record_wall_clock:
        row['wall_secs'] = record.wall_seconds
    return row


def records_to_frame(records: Sequence[IterationRecord], record_wall_clock: bool = False) -> pd.DataFrame:
    frame = pd.DataFrame([record_to_row(record, record_wall_clock) for record in records])
    LearningTraceDataFrame.validate(frame)
    return frame


def trace_to_frame(trace: LearningTrace, record_wall_clock: bool = False) -> pd.DataFrame:
    """
    One row per iteration: iteration, ratio, meta_grad_norm, gap_i per task, violation, meta_objective,
      estimate_error, the policy entries K_r_c and, when asked for, wall_secs
    """
    return records_to_frame(trace.records, record_wall_clock)


class TraceWriter:
    """
    Appends IterationRecords to a trace CSV as they arrive, flushing after every row so that an aborted run
      still leaves its partial trace on disk. Instances are meant to be passed as on_record.
    """

    def __init__(self, path, record_wall_clock: bool = False):
        self.path = Path(path)
        self.record_wall_clock = record_wall_clock
        self.rows_written = 0
        self._handle = self.path.open('w', encoding='utf-8', newline='')

    def __call__(self, record: IterationRecord):
        frame = records_to_frame([record], self.record_wall_clock)
        frame.to_csv(self._handle, header=self.rows_written == 0, index=False)
        self._handle.flush()
        self.rows_written += 1

    def close(self):
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.close()
        return False


def read_trace(path) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision='round_trip')
    LearningTraceDataFrame.validate(frame)
    return frame


def write_json(path, payload: dict):
    Path(path).write_text(json.dumps(payload, indent=2) + '\n', encoding='utf-8')


def build_manifest(spec: ExperimentSpec, task_file: Optional[str] = None) -> dict:
    """Everything needed to replay a run: the full resolved config, the library version and the seeds."""
    return {
        'library_version': LIBRARY_VERSION,
        'seed': spec.meta.seed,
        'taskgen_seed': spec.taskgen.seed,
        'task_file': task_file,
        'config': experiment_spec_to_dict(spec),
    }


def write_report(path, frame: pd.DataFrame) -> pd.DataFrame:
    PropertyReportDataFrame.validate(frame)
    frame.to_csv(path, index=False)
    return frame
