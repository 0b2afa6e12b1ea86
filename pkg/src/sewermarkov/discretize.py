"""Age-binned state-frequency tables built from inspection histories.

Each inspection contributes one observation: the pipe's age at inspection
(integer years) and its state for one damage code, taken as the worst
class recorded for that code (class 1 if the code was not recorded).
Right-censoring is ignored, so observed states lag true transition times.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .chain import DEFAULT_K
from .ingest import InspectionRecord, PipeRecord

log = logging.getLogger(__name__)


class EmptyTableError(ValueError):
    pass


@dataclass(frozen=True)
class DiscretizationConfig:
    damage_code: str
    delta_t: int = 3
    max_age: int = 126

    def __post_init__(self):
        if int(self.delta_t) != self.delta_t or self.delta_t < 1:
            raise ValueError(f"delta_t must be a positive integer, got {self.delta_t}")
        if self.max_age < 1 or self.max_age % self.delta_t:
            raise ValueError(f"max_age ({self.max_age}) must be a positive multiple of delta_t ({self.delta_t})")


@dataclass(frozen=True)
class TableRow:
    count: int
    age_lo: int
    age_hi: int
    t: float
    step: int
    freqs: tuple[float, ...]


@dataclass(frozen=True)
class DiscretizedTable:
    rows: tuple[TableRow, ...]
    delta_t: int
    K: int = DEFAULT_K

    def __post_init__(self):
        if not self.rows:
            raise EmptyTableError("discretized table has no rows")

    def __len__(self):
        return len(self.rows)

    @property
    def steps(self) -> np.ndarray:
        return np.array([r.step for r in self.rows], dtype=int)

    @property
    def counts(self) -> np.ndarray:
        return np.array([r.count for r in self.rows], dtype=float)

    @property
    def freqs(self) -> np.ndarray:
        return np.array([r.freqs for r in self.rows], dtype=float)

    @property
    def total(self) -> int:
        return int(sum(r.count for r in self.rows))

    def row_for_step(self, step: int) -> TableRow | None:
        for r in self.rows:
            if r.step == step:
                return r
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["count", "age_lo", "age_hi", "t", "step"] + [f"s{k}" for k in range(1, self.K + 1)])
        for r in self.rows:
            w.writerow([r.count, r.age_lo, r.age_hi, repr(r.t), r.step] + [repr(float(f)) for f in r.freqs])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, source) -> "DiscretizedTable":
        text = Path(source).read_text() if isinstance(source, (str, Path)) else source.read()
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        K = sum(1 for h in header if h.startswith("s") and h[1:].isdigit())
        rows = []
        for rec in reader:
            if not rec:
                continue
            count, lo, hi, t, step = int(rec[0]), int(rec[1]), int(rec[2]), float(rec[3]), int(rec[4])
            rows.append(TableRow(count, lo, hi, t, step, tuple(float(x) for x in rec[5:5 + K])))
        if not rows:
            raise EmptyTableError("table file has no rows")
        return cls(tuple(rows), rows[0].age_hi - rows[0].age_lo, K)


def pipe_state_at_inspection(rows: Iterable[InspectionRecord], damage_code: str) -> int:
    """Worst class recorded for ``damage_code`` in one inspection, else 1."""
    classes = [r.damage_class for r in rows if r.damage_code == damage_code]
    return max(classes) if classes else 1


@dataclass(frozen=True)
class Observations:
    """One entry per inspection: owning pipe, age in years and state."""

    pipe_ids: tuple[str, ...]
    pipe_index: np.ndarray
    ages: np.ndarray
    states: np.ndarray

    def __len__(self):
        return len(self.ages)

    def subset(self, mask) -> "Observations":
        return Observations(self.pipe_ids, self.pipe_index[mask], self.ages[mask], self.states[mask])


def observations(pipes: Iterable[PipeRecord], inspections: Iterable[InspectionRecord],
                 damage_code: str) -> Observations:
    """Collapse inspection rows to one (age, state) pair per inspection.

    Only inspections of the given pipes are used. Output order is sorted by
    pipe id then inspection id, so it does not depend on input row order.
    """
    pipes = sorted(pipes, key=lambda p: p.pipe_id)
    index = {p.pipe_id: i for i, p in enumerate(pipes)}
    grouped = defaultdict(list)
    for ins in inspections:
        if ins.pipe_id in index:
            grouped[(ins.pipe_id, ins.inspection_id)].append(ins)
    keys = sorted(grouped)
    pidx = np.empty(len(keys), dtype=np.int64)
    ages = np.empty(len(keys), dtype=np.int64)
    states = np.empty(len(keys), dtype=np.int64)
    for n, key in enumerate(keys):
        rows = grouped[key]
        i = index[key[0]]
        pidx[n] = i
        # all rows of an inspection share its date
        ages[n] = rows[0].inspection_date.year - pipes[i].construction_year
        states[n] = pipe_state_at_inspection(rows, damage_code)
    return Observations(tuple(p.pipe_id for p in pipes), pidx, ages, states)


def drop_out_of_range(obs: Observations, config: DiscretizationConfig) -> Observations:
    keep = (obs.ages >= 0) & (obs.ages < config.max_age)
    n_drop = int((~keep).sum())
    if n_drop:
        log.warning("dropping %d observation(s) aged outside [0, %d) years", n_drop, config.max_age)
        return obs.subset(keep)
    return obs


def table_from_observations(ages, states, config: DiscretizationConfig, K: int = DEFAULT_K) -> DiscretizedTable:
    ages = np.asarray(ages, dtype=np.int64)
    states = np.asarray(states, dtype=np.int64)
    keep = (ages >= 0) & (ages < config.max_age)
    ages, states = ages[keep], states[keep]
    if len(ages) == 0:
        raise EmptyTableError(f"no observations for damage code {config.damage_code!r}")
    if states.min() < 1 or states.max() > K:
        raise ValueError(f"states must lie in 1..{K}")
    dt_ = config.delta_t
    n_bins = config.max_age // dt_
    bins = ages // dt_
    tally = np.zeros((n_bins, K), dtype=np.int64)
    np.add.at(tally, (bins, states - 1), 1)
    rows = []
    for b in np.nonzero(tally.sum(axis=1))[0]:
        c = int(tally[b].sum())
        lo = int(b) * dt_
        rows.append(TableRow(c, lo, lo + dt_, lo + dt_ / 2, int(b), tuple(float(x) for x in tally[b] / c)))
    return DiscretizedTable(tuple(rows), dt_, K)


def build_table(pipes: Iterable[PipeRecord], inspections: Iterable[InspectionRecord],
                config: DiscretizationConfig, K: int = DEFAULT_K) -> DiscretizedTable:
    """Discretized state-frequency table for a cohort and one damage code."""
    obs = drop_out_of_range(observations(pipes, inspections, config.damage_code), config)
    return table_from_observations(obs.ages, obs.states, config, K)


def weights(table: DiscretizedTable) -> np.ndarray:
    """Row weights: counts divided by the largest count."""
    c = table.counts
    return c / c.max()
