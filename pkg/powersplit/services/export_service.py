"""
Report Export Service for the PowerSplit Workbench

Writes run and comparison reports to an output directory:
- trajectory.csv     one row per step, shortest round-trip float repr
- metrics.json       MetricsSummary of the run
- meta.json          run metadata (config hash, seed, solver statistics, wall time)
- comparison.csv / comparison.json / aligned_series.csv for multi-controller runs

Every file is written atomically: a temp file in the target directory is
renamed over the destination with ``os.replace``.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
import structlog

from services.errors import DataError

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]


class ReportFile(Enum):
    TRAJECTORY = "trajectory.csv"
    METRICS = "metrics.json"
    META = "meta.json"
    COMPARISON_CSV = "comparison.csv"
    COMPARISON_JSON = "comparison.json"
    ALIGNED_SERIES = "aligned_series.csv"


@dataclass
class ExportResult:
    """Files written by one export call"""
    directory: Path
    files: List[Path] = field(default_factory=list)

    def path(self, kind: ReportFile) -> Path:
        return self.directory / kind.value


def _json_default(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, Enum):
        return value.value
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def to_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n"


def atomic_write_text(path: PathLike, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file in the same directory."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path('.')
    directory.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def frame_to_csv(frame: pd.DataFrame, index: bool = False) -> str:
    return frame.to_csv(index=index, lineterminator='\n')


def read_trajectory(path: PathLike) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision='round_trip')
    except FileNotFoundError:
        raise DataError(f"Trajectory file not found: {path}", path=str(path)) from None


class ReportWriter:
    """Writes run and comparison reports below ``output_dir``"""

    def __init__(self, output_dir: PathLike = 'runs'):
        self.output_dir = Path(output_dir)

    def _target(self, directory: Optional[PathLike]) -> Path:
        return Path(directory) if directory is not None else self.output_dir

    def _write(self, result: ExportResult, kind: ReportFile, text: str) -> None:
        target = result.path(kind)
        atomic_write_text(target, text)
        result.files.append(target)

    def write_report(self, report, directory: Optional[PathLike] = None) -> ExportResult:
        """trajectory.csv + metrics.json + meta.json of one run"""
        result = ExportResult(directory=self._target(directory))
        self._write(result, ReportFile.TRAJECTORY, frame_to_csv(report.trajectory))
        self._write(result, ReportFile.METRICS, to_json(report.summary.to_dict()))
        self._write(result, ReportFile.META, to_json(report.meta))
        logger.info('report_written', directory=str(result.directory),
                    steps=len(report.trajectory), controller=report.meta.get('controller'))
        return result

    def write_comparison(self, comparison, directory: Optional[PathLike] = None) -> ExportResult:
        """Metric table (CSV + JSON) and the aligned per-step series"""
        result = ExportResult(directory=self._target(directory))
        self._write(result, ReportFile.COMPARISON_CSV, frame_to_csv(comparison.table, index=True))
        self._write(result, ReportFile.COMPARISON_JSON, to_json(comparison.to_dict()))
        self._write(result, ReportFile.ALIGNED_SERIES, frame_to_csv(comparison.aligned))
        logger.info('comparison_written', directory=str(result.directory),
                    controllers=list(comparison.table.columns))
        return result

    def write_json(self, name: str, data: Dict[str, Any],
                   directory: Optional[PathLike] = None) -> Path:
        target = self._target(directory) / name
        atomic_write_text(target, to_json(data))
        return target

    def read_report(self, directory: Optional[PathLike] = None) -> Dict[str, Any]:
        """Trajectory frame plus parsed metrics and meta of a written run."""
        source = self._target(directory)
        try:
            metrics = json.loads((source / ReportFile.METRICS.value).read_text(encoding='utf-8'))
            meta = json.loads((source / ReportFile.META.value).read_text(encoding='utf-8'))
        except FileNotFoundError as exc:
            raise DataError(f"Incomplete report directory: {source}",
                            missing=str(exc.filename)) from None
        return {
            'trajectory': read_trajectory(source / ReportFile.TRAJECTORY.value),
            'metrics': metrics,
            'meta': meta,
        }


__all__ = [
    'ReportWriter', 'ReportFile', 'ExportResult',
    'atomic_write_text', 'frame_to_csv', 'read_trajectory', 'to_json',
]
