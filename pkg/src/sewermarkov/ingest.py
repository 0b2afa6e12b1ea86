"""Loading, cleaning and cohort selection of pipe inspection records.

Two CSV files make up a dataset::

    pipes.csv        pipe_id,construction_year,material,content,width_mm
    inspections.csv  inspection_id,pipe_id,inspection_date,damage_code,damage_class

Inspections that found no damage are written as a single row with damage
code ``NONE`` and class 1.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .chain import DEFAULT_K

log = logging.getLogger(__name__)

PIPE_COLUMNS = ("pipe_id", "construction_year", "material", "content", "width_mm")
INSPECTION_COLUMNS = ("inspection_id", "pipe_id", "inspection_date", "damage_code", "damage_class")
NO_DAMAGE_CODE = "NONE"
MIN_CONSTRUCTION_YEAR = 1920
# anything older than this is treated as a data-entry error, not history
EARLIEST_PLAUSIBLE_YEAR = 1800


class DataError(Exception):
    """Fatal input problem: unreadable file or missing required column."""


class ConfigError(ValueError):
    """Invalid cohort configuration."""


@dataclass(frozen=True)
class PipeRecord:
    pipe_id: str
    construction_year: int
    material: str
    content: str
    width_mm: float


@dataclass(frozen=True)
class InspectionRecord:
    inspection_id: str
    pipe_id: str
    inspection_date: dt.date
    damage_code: str
    damage_class: int


@dataclass(frozen=True)
class Reject:
    source: str
    row: int
    reason: str


@dataclass
class LoadResult:
    pipes: list[PipeRecord]
    inspections: list[InspectionRecord]
    rejects: list[Reject] = field(default_factory=list)

    def __iter__(self):
        # allows ``pipes, inspections = load_dataset(...)``
        return iter((self.pipes, self.inspections))

    def rejects_report(self) -> str:
        """CSV text listing every rejected row, in file and row order."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "row", "reason"])
        for r in self.rejects:
            w.writerow([r.source, r.row, r.reason])
        return buf.getvalue()


def _read_rows(source, required: Sequence[str], label: str):
    if isinstance(source, (str, Path)):
        try:
            text = Path(source).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise DataError(f"cannot read {label} file {source}: {exc}") from exc
    else:
        text = source.read()
    reader = csv.DictReader(io.StringIO(text))
    header = [h.strip() for h in (reader.fieldnames or [])]
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{label} file is missing required column(s): {', '.join(missing)}")
    reader.fieldnames = header
    # row numbers count the header as row 1, like a spreadsheet
    for rowno, row in enumerate(reader, start=2):
        yield rowno, {k: (v or "").strip() for k, v in row.items() if k is not None}


def _parse_pipe(row: dict) -> PipeRecord | str:
    pipe_id = row["pipe_id"]
    if not pipe_id:
        return "missing pipe_id"
    year = row["construction_year"]
    if not year:
        return "missing construction year"
    try:
        year = int(year)
    except ValueError:
        return "non-numeric construction year"
    try:
        width = float(row["width_mm"])
    except ValueError:
        return "invalid width"
    if not width > 0:
        return "invalid width"
    return PipeRecord(pipe_id, year, row["material"].lower(), row["content"].lower(), width)


def _parse_inspection(row: dict, K: int) -> InspectionRecord | str:
    if not row["inspection_id"]:
        return "missing inspection_id"
    if not row["pipe_id"]:
        return "missing pipe_id"
    try:
        date = dt.date.fromisoformat(row["inspection_date"])
    except ValueError:
        return "invalid date"
    code = row["damage_code"]
    if not code:
        return "missing damage code"
    try:
        cls = int(row["damage_class"])
    except ValueError:
        return "non-integer damage class"
    if not 1 <= cls <= K:
        return "class out of range"
    return InspectionRecord(row["inspection_id"], row["pipe_id"], date, code, cls)


def load_dataset(pipe_file, inspection_file, K: int = DEFAULT_K) -> LoadResult:
    """Parse a pipes file and an inspections file.

    Malformed rows are skipped and listed in ``rejects`` with their row
    number and a reason. A missing file or column raises ``DataError``.
    """
    pipes, inspections, rejects = [], [], []
    seen = set()
    for rowno, row in _read_rows(pipe_file, PIPE_COLUMNS, "pipes"):
        rec = _parse_pipe(row)
        if isinstance(rec, PipeRecord) and rec.pipe_id in seen:
            rec = "duplicate pipe_id"
        if isinstance(rec, str):
            rejects.append(Reject("pipes", rowno, rec))
        else:
            seen.add(rec.pipe_id)
            pipes.append(rec)
    for rowno, row in _read_rows(inspection_file, INSPECTION_COLUMNS, "inspections"):
        rec = _parse_inspection(row, K)
        if isinstance(rec, str):
            rejects.append(Reject("inspections", rowno, rec))
        else:
            inspections.append(rec)
    return LoadResult(pipes, inspections, rejects)


@dataclass
class CleanReport:
    built_before_1920: int = 0
    implausible_construction_year: int = 0
    inspections_of_removed_pipes: int = 0
    unknown_pipe: int = 0
    erroneous_date: int = 0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def clean(pipes: Iterable[PipeRecord], inspections: Iterable[InspectionRecord]):
    """Drop old or implausibly dated pipes and inspections that cannot be aged.

    Returns ``(pipes, inspections, report)``. Pipes built before 1920 are
    removed together with their inspections; so are inspections that
    reference an unknown pipe or predate the pipe's construction year.
    """
    report = CleanReport()
    kept = {}
    removed = set()
    for p in pipes:
        if p.construction_year < EARLIEST_PLAUSIBLE_YEAR:
            report.implausible_construction_year += 1
            removed.add(p.pipe_id)
        elif p.construction_year < MIN_CONSTRUCTION_YEAR:
            report.built_before_1920 += 1
            removed.add(p.pipe_id)
        else:
            kept[p.pipe_id] = p
    out = []
    for ins in inspections:
        pipe = kept.get(ins.pipe_id)
        if pipe is None:
            if ins.pipe_id in removed:
                report.inspections_of_removed_pipes += 1
            else:
                report.unknown_pipe += 1
            continue
        if ins.inspection_date.year < pipe.construction_year:
            report.erroneous_date += 1
            continue
        out.append(ins)
    for name, n in report.as_dict().items():
        if n:
            log.info("clean: removed %d record(s) (%s)", n, name.replace("_", " "))
    return list(kept.values()), out, report


_PIPE_ATTRS = {f.name for f in fields(PipeRecord)}


@dataclass(frozen=True)
class Predicate:
    """One constraint on a pipe attribute.

    Either a set of accepted values (case-insensitive equality) or a
    numeric range ``minimum <= value < maximum`` with open ends allowed.
    """

    attribute: str
    accepted: frozenset | None = None
    minimum: float | None = None
    maximum: float | None = None

    def __post_init__(self):
        if self.attribute not in _PIPE_ATTRS:
            raise ConfigError(f"unknown pipe attribute {self.attribute!r}")

    def __call__(self, pipe: PipeRecord) -> bool:
        value = getattr(pipe, self.attribute)
        if self.accepted is not None and str(value).lower() not in self.accepted:
            return False
        if self.minimum is not None and not value >= self.minimum:
            return False
        if self.maximum is not None and not value < self.maximum:
            return False
        return True


@dataclass(frozen=True)
class CohortDefinition:
    name: str
    predicates: tuple[Predicate, ...] = ()

    def __post_init__(self):
        if not self.name:
            raise ConfigError("cohort name must be non-empty")

    def contains(self, pipe: PipeRecord) -> bool:
        return all(pred(pipe) for pred in self.predicates)

    @classmethod
    def from_dict(cls, d: dict) -> "CohortDefinition":
        known = {"name", "material", "content", "width_min_mm", "width_max_mm"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"cohort {d.get('name')!r}: unknown key(s) {sorted(unknown)}")
        preds = []
        for attr in ("material", "content"):
            if d.get(attr) is not None:
                vals = d[attr]
                vals = [vals] if isinstance(vals, str) else list(vals)
                preds.append(Predicate(attr, frozenset(str(v).lower() for v in vals)))
        lo, hi = d.get("width_min_mm"), d.get("width_max_mm")
        if lo is not None or hi is not None:
            preds.append(Predicate("width_mm", minimum=lo, maximum=hi))
        return cls(str(d.get("name", "")), tuple(preds))

    def to_dict(self) -> dict:
        d = {"name": self.name}
        for p in self.predicates:
            if p.attribute == "width_mm":
                if p.minimum is not None:
                    d["width_min_mm"] = p.minimum
                if p.maximum is not None:
                    d["width_max_mm"] = p.maximum
            else:
                d[p.attribute] = sorted(p.accepted)
        return d


def load_cohorts(source=None) -> dict[str, CohortDefinition]:
    """Read a cohorts JSON list; ``None`` loads the bundled six defaults."""
    if source is None:
        text = resources.files("sewermarkov").joinpath("data/cohorts.json").read_text()
    else:
        try:
            text = Path(source).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read cohorts config {source}: {exc}") from exc
    try:
        items = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cohorts config is not valid JSON: {exc}") from exc
    if not isinstance(items, list):
        raise ConfigError("cohorts config must be a JSON list")
    out = {}
    for item in items:
        c = CohortDefinition.from_dict(item)
        if c.name in out:
            raise ConfigError(f"duplicate cohort name {c.name!r}")
        out[c.name] = c
    return out


def assign_cohort(pipes: Iterable[PipeRecord], definition: CohortDefinition) -> list[PipeRecord]:
    return [p for p in pipes if definition.contains(p)]


def inspections_for(pipes: Iterable[PipeRecord], inspections: Iterable[InspectionRecord]) -> list[InspectionRecord]:
    ids = {p.pipe_id for p in pipes}
    return [i for i in inspections if i.pipe_id in ids]


def damage_codes(inspections: Iterable[InspectionRecord]) -> list[str]:
    return sorted({i.damage_code for i in inspections} - {NO_DAMAGE_CODE})


def write_pipes_csv(pipes: Iterable[PipeRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PIPE_COLUMNS)
    for p in pipes:
        width = int(p.width_mm) if float(p.width_mm).is_integer() else p.width_mm
        w.writerow([p.pipe_id, p.construction_year, p.material, p.content, width])
    return buf.getvalue()


def write_inspections_csv(inspections: Iterable[InspectionRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INSPECTION_COLUMNS)
    for i in inspections:
        w.writerow([i.inspection_id, i.pipe_id, i.inspection_date.isoformat(), i.damage_code, i.damage_class])
    return buf.getvalue()
