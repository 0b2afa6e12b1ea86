"""Synthetic pipe populations drawn from a known chain.

Used as a Monte Carlo oracle: simulated inspection files go through the
same ingest and discretization path as real data, so calibration can be
checked against the generating parameters.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .chain import Chain
from .ingest import (NO_DAMAGE_CODE, InspectionRecord, PipeRecord, write_inspections_csv,
                     write_pipes_csv)


def simulate_pipe(chain: Chain, age: int, delta_t: int, rng: np.random.Generator) -> int:
    """Severity class (1-based) of one pipe after ``floor(age / delta_t)`` steps."""
    K = chain.K
    state = rng.choice(K, p=chain.s0.probs)
    P = chain.matrix.entries
    for _ in range(age // delta_t):
        state = rng.choice(K, p=P[state])
    return int(state) + 1


def _draw(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    # index of the first cdf entry exceeding u; cdf rows end at (about) 1
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[-1] - 1)


def simulate_paths(chain: Chain, n_paths: int, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """``(n_paths, n_steps + 1)`` array of 1-based states along simulated trajectories."""
    s0_cdf = np.cumsum(chain.s0.probs)[None, :]
    P_cdf = np.cumsum(chain.matrix.entries, axis=1)
    out = np.empty((n_paths, n_steps + 1), dtype=np.int64)
    state = _draw(s0_cdf, rng.random(n_paths))
    out[:, 0] = state
    for m in range(n_steps):
        state = _draw(P_cdf[state], rng.random(n_paths))
        out[:, m + 1] = state
    return out + 1


def grid_ages(max_age: int, delta_t: int = 3) -> list[tuple[int, float]]:
    """Uniform age distribution with one age per bin of width ``delta_t`` up to ``max_age``.

    Ages sit at bin midpoints (rounded down), e.g. 49 for ``[48, 51)``.
    """
    los = list(range(0, max_age + 1, delta_t))
    return [(lo + delta_t // 2, 1.0 / len(los)) for lo in los]


@dataclass(frozen=True)
class SynthesisConfig:
    truth: Chain
    n_pipes: int
    age_distribution: tuple[tuple[int, float], ...]
    inspections_per_pipe: int = 1
    rng_seed: int = 0
    delta_t: int = 3
    damage_code: str = "BAF"
    material: str = "concrete"
    content: str = "mixed"
    width_mm: float = 300.0
    first_inspection_year: int = 2010

    def __post_init__(self):
        object.__setattr__(self, "age_distribution",
                           tuple((int(a), float(p)) for a, p in self.age_distribution))
        if self.n_pipes < 1 or self.inspections_per_pipe < 1 or self.delta_t < 1:
            raise ValueError("n_pipes, inspections_per_pipe and delta_t must be positive")
        if any(a < 0 or p < 0 for a, p in self.age_distribution):
            raise ValueError("ages and proportions must be non-negative")
        if abs(sum(p for _, p in self.age_distribution) - 1.0) > 1e-9:
            raise ValueError("age proportions must sum to 1")


def generate_records(config: SynthesisConfig):
    """Pipes and inspection rows simulated from ``config.truth``.

    Each pipe gets an age drawn from the age distribution and is inspected at
    that age and then every ``delta_t`` years, all read off one trajectory.
    The first inspection happens in ``first_inspection_year`` unless that
    would place construction before 1920.
    """
    rng = np.random.Generator(np.random.PCG64(config.rng_seed))
    ages = np.array([a for a, _ in config.age_distribution])
    probs = np.array([p for _, p in config.age_distribution])
    probs = probs / probs.sum()
    n, m, dt_ = config.n_pipes, config.inspections_per_pipe, config.delta_t
    pipe_ages = ages[rng.choice(len(ages), size=n, p=probs)]
    first_step = pipe_ages // dt_
    paths = simulate_paths(config.truth, n, int(first_step.max()) + m - 1, rng)
    digits = len(str(n - 1))
    pipes, rows = [], []
    for i in range(n):
        pid = f"P{i:0{digits}d}"
        age = int(pipe_ages[i])
        year0 = max(config.first_inspection_year, 1920 + age)
        built = year0 - age
        pipes.append(PipeRecord(pid, built, config.material, config.content, config.width_mm))
        for k in range(m):
            state = int(paths[i, first_step[i] + k])
            iid = f"{pid}-I{k}"
            date = dt.date(year0 + k * dt_, 6, 15)
            if state == 1:
                rows.append(InspectionRecord(iid, pid, date, NO_DAMAGE_CODE, 1))
            else:
                rows.append(InspectionRecord(iid, pid, date, config.damage_code, state))
    return pipes, rows


def generate_dataset(config: SynthesisConfig) -> tuple[str, str]:
    """``(pipes.csv, inspections.csv)`` text for a simulated population."""
    pipes, rows = generate_records(config)
    return write_pipes_csv(pipes), write_inspections_csv(rows)
