"""Error metrics and evaluation reports (overall MAE, per-year breakdowns, per-image records)."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .core import REGIONS, AgeRangeMonths, Region
from .errors import EmptyInput, IoError, LengthMismatch

MEAN_SOURCE = "mean"
SOURCES = (MEAN_SOURCE,) + tuple(r.value for r in REGIONS)


def compute_mae(preds: Sequence[float], truths: Sequence[float]) -> float:
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truths)} truths")
    if not preds:
        raise EmptyInput("MAE of nothing")
    return math.fsum(abs(float(p) - float(t)) for p, t in zip(preds, truths)) / len(preds)


@dataclass(frozen=True)
class Record:
    id: str
    truth: float
    per_region: dict
    mean: float

    def value(self, source: str) -> float:
        return self.mean if source == MEAN_SOURCE else float(self.per_region[source])

    def to_json(self) -> dict:
        return {"id": self.id, "truth": self.truth, "per_region": dict(self.per_region), "mean": self.mean}

    @classmethod
    def from_prediction(cls, id_: str, truth: float, prediction) -> "Record":
        per_region = {Region(r).value: float(v) for r, v in prediction.per_region.items()}
        return cls(id_, float(truth), per_region, float(prediction.mean_months))


@dataclass(frozen=True)
class YearRow:
    source: str
    year_bin: int
    n: int
    mae: float
    mean_error: float  # positive = over-prediction


def year_bin(months: float) -> int:
    return int(math.floor(months / 12.0))


def per_year_breakdown(records: Sequence[Record], age_range: AgeRangeMonths | None = None) -> list[YearRow]:
    """Per (source, year) counts, MAE and mean signed error; final output first, then each region."""
    kept = [r for r in records if age_range is None or age_range.contains(r.truth)]
    if not kept:
        raise EmptyInput("no records inside the age range")
    groups: dict[int, list[Record]] = {}
    for r in kept:
        groups.setdefault(year_bin(r.truth), []).append(r)
    rows = []
    for source in SOURCES:
        for year in sorted(groups):
            members = groups[year]
            errors = [m.value(source) - m.truth for m in members]
            rows.append(
                YearRow(
                    source, year, len(members),
                    math.fsum(abs(e) for e in errors) / len(errors),
                    math.fsum(errors) / len(errors),
                )
            )
    return rows


@dataclass
class EvalReport:
    n: int
    range: AgeRangeMonths
    mae_months: float
    per_year: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "range": {"lo": self.range.lo, "hi": self.range.hi},
            "mae_months": self.mae_months,
            "per_year": [asdict(r) for r in self.per_year],
            "records": [r.to_json() for r in self.records],
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        return cls(
            n=int(data["n"]),
            range=AgeRangeMonths(float(data["range"]["lo"]), float(data["range"]["hi"])),
            mae_months=float(data["mae_months"]),
            per_year=[YearRow(**r) for r in data["per_year"]],
            records=[Record(**r) for r in data["records"]],
        )


def build_report(records: Iterable[Record], age_range: AgeRangeMonths) -> EvalReport:
    kept = [r for r in records if age_range.contains(r.truth)]
    if not kept:
        raise EmptyInput("no records inside the age range")
    mae = compute_mae([r.mean for r in kept], [r.truth for r in kept])
    return EvalReport(len(kept), age_range, mae, per_year_breakdown(kept), kept)


class ReportFormat(enum.Enum):
    JSON = "json"
    CSV = "csv"
    PLOTDATA = "plotdata"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def emit_report(report: EvalReport, out_dir, formats: Iterable[ReportFormat] = tuple(ReportFormat)) -> list[Path]:
    """Write ``report.json``, ``per_year.csv`` and the ``fig11/12/13.csv`` plot tables."""
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for fmt in formats:
            if fmt is ReportFormat.JSON:
                path = out / "report.json"
                path.write_text(json.dumps(report.to_json(), indent=2))
                written.append(path)
            elif fmt is ReportFormat.CSV:
                written.append(_write_csv(
                    out / "per_year.csv", ["source", "year_bin", "n", "mae", "mean_error"],
                    ((r.source, r.year_bin, r.n, r.mae, r.mean_error) for r in report.per_year),
                ))
            elif fmt is ReportFormat.PLOTDATA:
                written.append(_write_csv(
                    out / "fig11.csv", ["year_bin", "source", "n", "mae"],
                    ((r.year_bin, r.source, r.n, r.mae) for r in report.per_year),
                ))
                written.append(_write_csv(
                    out / "fig12.csv", ["year_bin", "source", "mean_error"],
                    ((r.year_bin, r.source, r.mean_error) for r in report.per_year),
                ))
                written.append(_write_csv(
                    out / "fig13.csv", ["id", "source", "months"],
                    ((rec.id, src, rec.truth if src == "truth" else rec.value(src))
                     for rec in report.records for src in ("truth",) + SOURCES),
                ))
    except OSError as exc:
        raise IoError(out, str(exc)) from exc
    return written
