"""CSV and JSON artifacts written by the experiment harness.

Metric curves go to one long-format CSV per scenario. Floats are written with
``repr`` so a rerun with the same seed produces byte-identical files.
"""

from __future__ import annotations

import csv
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import structlog

from app.schemas.reports import AnalysisParams, RunManifest
from app.services.cloud_ksvd import CloudTrace
from app.services.diagnostics import site_spread

logger = structlog.get_logger()

CSV_HEADER = ("run", "method", "param", "iteration", "metric", "value")
TRACE_HEADER = (
    "iteration",
    "atom",
    "site",
    "support_size",
    "part_norm",
    "correction",
    "messages",
    "reinitialized",
    "site_spread",
)
PARAMS_HEADER = ("run", "name", "formula", "value")


@dataclass(frozen=True)
class MetricRow:
    """One point of a curve: ``param`` is ``""`` when a method has no sweep."""

    run: int
    method: str
    param: str
    iteration: int
    metric: str
    value: float

    def as_record(self) -> dict[str, str]:
        return {
            "run": str(self.run),
            "method": self.method,
            "param": self.param,
            "iteration": str(self.iteration),
            "metric": self.metric,
            "value": repr(float(self.value)),
        }


def _ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def write_metrics_csv(path: Path, rows: Iterable[MetricRow]) -> int:
    """Write *rows* under the long-format header; returns the number of data rows."""
    _ensure_parent(path)
    count = 0
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_record())
            count += 1
    logger.debug("metrics_written", path=str(path), rows=count)
    return count


def read_metrics_csv(path: Path) -> list[MetricRow]:
    with path.open(encoding="utf-8", newline="") as handle:
        return [
            MetricRow(
                run=int(record["run"]),
                method=record["method"],
                param=record["param"],
                iteration=int(record["iteration"]),
                metric=record["metric"],
                value=float(record["value"]),
            )
            for record in csv.DictReader(handle)
        ]


def write_manifest(path: Path, manifest: RunManifest) -> None:
    _ensure_parent(path)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def write_params_report(directory: Path, params: Sequence[AnalysisParams]) -> dict[str, int]:
    """Write ``params.json`` and ``params.csv``, each value labeled with its formula.

    The JSON holds the shared ``formulas`` map and one object per run under
    ``runs``; the CSV has one ``run,name,formula,value`` row per value.
    """
    json_path = directory / "params.json"
    csv_path = directory / "params.csv"
    _ensure_parent(json_path)
    formulas = {
        name: info.description or "" for name, info in AnalysisParams.model_fields.items()
    }
    dumped = [p.model_dump(mode="json") for p in params]
    report = {"formulas": formulas, "runs": dumped}
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    count = 0
    with csv_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(PARAMS_HEADER)
        for run, values in enumerate(dumped):
            for name in sorted(values):
                value = values[name]
                formatted = repr(value) if isinstance(value, float) else value
                writer.writerow((run, name, formulas[name], formatted))
                count += 1
    return {json_path.name: len(dumped), csv_path.name: count}


def write_cloud_trace_csv(path: Path, trace: CloudTrace) -> int:
    """One row per atom update and site.

    Besides support size, error energy and messages, ``site_spread`` is the
    projector distance of the site's estimate from the mean direction over
    sites, i.e. how far consensus left that site from the others.
    """
    _ensure_parent(path)
    count = 0
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for record in trace.atoms:
            spread = site_spread(record.estimates)
            for site in range(trace.n_sites):
                writer.writerow(
                    (
                        record.iteration,
                        record.atom,
                        site,
                        int(record.support_sizes[site]),
                        repr(float(record.part_norms[site])),
                        repr(float(record.corrections[site])),
                        record.messages,
                        int(record.reinitialized),
                        repr(float(spread[site])),
                    )
                )
                count += 1
    return count
