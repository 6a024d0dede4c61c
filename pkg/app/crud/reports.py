"""
Result tables of evaluation and probing runs: one JSON report plus plain CSV
tables next to it.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

from pydantic import BaseModel

from app.core.exceptions import DataError
from app.schemas.probe import ProbeReport

logger = logging.getLogger(__name__)

PROBE_REPORT = "probe_report.json"
PROBE_TABLES = {
    "accuracy": "probe_accuracy.csv",
    "cosine": "cosine.csv",
    "frequency": "freq_accuracy.csv",
    "tags": "tag_accuracy.csv",
    "gates": "gates.csv",
}
EVAL_REPORT = "eval_report.json"
HYPOTHESES_FILE = "hypotheses.txt"


def write_rows(path: Path, rows: Iterable[Dict], columns: Sequence[str]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({key: "" if row.get(key) is None else row.get(key) for key in columns})
    return path


def read_rows(path: Union[str, Path]) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"table not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _model_rows(items: Sequence[BaseModel]) -> List[Dict]:
    return [item.model_dump(mode="json") for item in items]


def write_probe_report(report: ProbeReport, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / PROBE_REPORT).write_text(report.model_dump_json(indent=2), encoding="utf-8")
    for attr, filename in PROBE_TABLES.items():
        items = getattr(report, attr)
        model = type(report).model_fields[attr].annotation.__args__[0]
        write_rows(out_dir / filename, _model_rows(items), list(model.model_fields))
    logger.info(f"Probe report written to {out_dir}")
    return out_dir


def read_probe_report(path: Union[str, Path]) -> ProbeReport:
    path = Path(path)
    if path.is_dir():
        path = path / PROBE_REPORT
    if not path.exists():
        raise DataError(f"probe report not found: {path}")
    try:
        return ProbeReport.model_validate_json(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise DataError(f"malformed probe report {path}: {exc}") from exc


def write_json(payload: Union[BaseModel, Dict], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        path.write_text(payload.model_dump_json(indent=2), encoding="utf-8")
    else:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path
