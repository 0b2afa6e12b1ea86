"""Homogeneous discrete-time Markov chains over ordered severity states.

State vectors are row vectors; a projection ``n`` steps ahead is
``s0 @ P^n``. Matrices are upper triangular (no repairs) and the worst
state is absorbing.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

STOCHASTIC_TOL = 1e-9
PRODUCT_TOL = 1e-6
DEFAULT_K = 5


class ChainError(ValueError):
    """Raised for structurally malformed chain inputs (wrong shapes, sizes)."""


def _frozen(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        raise ChainError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SeverityScale:
    K: int = DEFAULT_K

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 2:
            raise ChainError(f"K must be an integer >= 2, got {self.K}")

    @property
    def classes(self) -> np.ndarray:
        return np.arange(1, self.K + 1, dtype=float)


class TopologyKind(str, enum.Enum):
    MULTI = "multi"
    SINGLE = "single"


@dataclass(frozen=True)
class ChainTopology:
    """Which transitions a chain may use.

    ``multi`` allows any move to an equal or worse state, ``single`` only
    allows staying put or moving one state down. The last state is absorbing
    in both.
    """

    kind: TopologyKind
    K: int = DEFAULT_K

    def __post_init__(self):
        kind = self.kind if isinstance(self.kind, TopologyKind) else TopologyKind(str(self.kind).lower())
        object.__setattr__(self, "kind", kind)
        SeverityScale(self.K)

    @classmethod
    def multi(cls, K: int = DEFAULT_K) -> "ChainTopology":
        return cls(TopologyKind.MULTI, K)

    @classmethod
    def single(cls, K: int = DEFAULT_K) -> "ChainTopology":
        return cls(TopologyKind.SINGLE, K)

    def mask(self) -> np.ndarray:
        """Boolean K x K array, True where a transition is allowed."""
        K = self.K
        i, j = np.indices((K, K))
        if self.kind is TopologyKind.MULTI:
            m = j >= i
        else:
            m = (j == i) | (j == i + 1)
        m[K - 1, :] = False
        m[K - 1, K - 1] = True
        return m

    def free_targets(self, row: int) -> list[int]:
        """Off-diagonal columns row ``row`` may move to, nearest first."""
        if row == self.K - 1:
            return []
        if self.kind is TopologyKind.SINGLE:
            return [row + 1]
        return list(range(row + 1, self.K))


@dataclass(frozen=True)
class ValidationReport:
    shape: bool
    bounds: bool
    row_sums: bool
    structural_zeros: bool
    absorbing: bool
    messages: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.shape and self.bounds and self.row_sums and self.structural_zeros and self.absorbing

    def __bool__(self):
        return self.ok


def check_matrix(entries, topology: ChainTopology, tol: float = STOCHASTIC_TOL) -> ValidationReport:
    P = np.asarray(entries, dtype=float)
    K = topology.K
    if P.shape != (K, K):
        raise ChainError(f"matrix shape {P.shape} does not match topology K={K}")
    msgs = []
    finite = bool(np.all(np.isfinite(P)))
    bounds = finite and bool(np.all((P >= 0.0) & (P <= 1.0)))
    if not bounds:
        msgs.append("entries outside [0, 1]")
    dev = np.abs(P.sum(axis=1) - 1.0) if finite else np.array([np.inf])
    row_sums = bool(np.all(dev <= tol))
    if not row_sums:
        msgs.append(f"row sums deviate from 1 by up to {dev.max():.3g}")
    forbidden = ~topology.mask()
    zeros = bool(np.all(P[forbidden] == 0.0))
    if not zeros:
        bad = [(int(a) + 1, int(b) + 1) for a, b in zip(*np.nonzero(forbidden & (P != 0.0)))]
        msgs.append(f"nonzero entries at forbidden positions {bad}")
    absorbing = bool(P[K - 1, K - 1] == 1.0)
    if not absorbing:
        msgs.append(f"final state is not absorbing (p_KK = {P[K - 1, K - 1]!r})")
    return ValidationReport(True, bounds, row_sums, zeros, absorbing, tuple(msgs))


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic one-step transition matrix bound to a topology.

    Construction validates every invariant and raises ``ChainError`` on
    failure. Use :func:`check_matrix` to inspect a candidate without raising.
    """

    entries: np.ndarray
    topology: ChainTopology

    def __post_init__(self):
        P = _frozen(self.entries, 2)
        object.__setattr__(self, "entries", P)
        report = check_matrix(P, self.topology)
        if not report:
            raise ChainError("invalid transition matrix: " + "; ".join(report.messages))

    @property
    def K(self) -> int:
        return self.topology.K

    @classmethod
    def identity(cls, topology: ChainTopology) -> "TransitionMatrix":
        return cls(np.eye(topology.K), topology)

    @classmethod
    def from_rates(cls, rates: Iterable[float], K: int | None = None) -> "TransitionMatrix":
        """Single-topology matrix from its K-1 superdiagonal probabilities."""
        rates = np.asarray(list(rates), dtype=float)
        K = K or len(rates) + 1
        if len(rates) != K - 1:
            raise ChainError(f"need {K - 1} rates for K={K}, got {len(rates)}")
        P = np.zeros((K, K))
        idx = np.arange(K - 1)
        P[idx, idx + 1] = rates
        P[idx, idx] = 1.0 - rates
        P[K - 1, K - 1] = 1.0
        return cls(P, ChainTopology.single(K))

    def __eq__(self, other):
        if not isinstance(other, TransitionMatrix):
            return NotImplemented
        return self.topology == other.topology and np.array_equal(self.entries, other.entries)

    __hash__ = None


@dataclass(frozen=True)
class StateVector:
    probs: np.ndarray
    step: int = 0

    def __post_init__(self):
        p = _frozen(self.probs, 1)
        object.__setattr__(self, "probs", p)
        if self.step < 0:
            raise ChainError("step must be non-negative")
        if len(p) < 2:
            raise ChainError("state vector needs at least two states")
        if not (np.all(np.isfinite(p)) and np.all((p >= 0.0) & (p <= 1.0))):
            raise ChainError(f"state probabilities outside [0, 1]: {p}")
        if abs(p.sum() - 1.0) > STOCHASTIC_TOL:
            raise ChainError(f"state probabilities sum to {p.sum()!r}, not 1")

    @property
    def K(self) -> int:
        return len(self.probs)

    @classmethod
    def pristine(cls, K: int = DEFAULT_K) -> "StateVector":
        p = np.zeros(K)
        p[0] = 1.0
        return cls(p)

    def __eq__(self, other):
        if not isinstance(other, StateVector):
            return NotImplemented
        return self.step == other.step and np.array_equal(self.probs, other.probs)

    __hash__ = None


def validate(matrix: TransitionMatrix | np.ndarray, topology: ChainTopology | None = None) -> ValidationReport:
    """Per-invariant report for a matrix; raises ChainError only on shape mismatch."""
    if isinstance(matrix, TransitionMatrix):
        return check_matrix(matrix.entries, topology or matrix.topology)
    if topology is None:
        raise ChainError("a raw array needs an explicit topology")
    return check_matrix(matrix, topology)


def n_step_matrix(matrix: TransitionMatrix, n: int) -> np.ndarray:
    """``P^n`` by iterated multiplication; ``n = 0`` gives the identity."""
    if n < 0:
        raise ChainError("n must be non-negative")
    P = matrix.entries
    out = np.eye(matrix.K)
    for _ in range(n):
        out = out @ P
    return out


def project_path(s0: StateVector, matrix: TransitionMatrix, n: int) -> np.ndarray:
    """All state distributions for steps ``0..n`` as an ``(n + 1, K)`` array."""
    _check_dims(s0, matrix)
    if n < 0:
        raise ChainError("n must be non-negative")
    P = matrix.entries
    out = np.empty((n + 1, matrix.K))
    out[0] = s0.probs
    for m in range(n):
        out[m + 1] = out[m] @ P
    return out


def project(s0: StateVector, matrix: TransitionMatrix, n: int) -> StateVector:
    if n == 0:
        _check_dims(s0, matrix)
        return StateVector(s0.probs, 0)
    probs = project_path(s0, matrix, n)[-1]
    # round-off can push an entry a hair outside [0, 1]
    probs = np.clip(probs, 0.0, 1.0)
    return StateVector(probs, n)


def expected_severity(s0: StateVector, matrix: TransitionMatrix, n: int,
                      scale: SeverityScale | None = None) -> float:
    scale = scale or SeverityScale(matrix.K)
    if scale.K != matrix.K:
        raise ChainError(f"scale K={scale.K} does not match matrix K={matrix.K}")
    return float(project(s0, matrix, n).probs @ scale.classes)


def expectation_path(s0: StateVector, matrix: TransitionMatrix, n: int) -> np.ndarray:
    return project_path(s0, matrix, n) @ SeverityScale(matrix.K).classes


def _check_dims(s0: StateVector, matrix: TransitionMatrix):
    if s0.K != matrix.K:
        raise ChainError(f"state vector has K={s0.K} but matrix has K={matrix.K}")


@dataclass(frozen=True)
class Chain:
    """An initial state vector together with its transition matrix."""

    s0: StateVector
    matrix: TransitionMatrix

    def __post_init__(self):
        _check_dims(self.s0, self.matrix)

    @property
    def K(self) -> int:
        return self.matrix.K

    @property
    def topology(self) -> ChainTopology:
        return self.matrix.topology

    def project(self, n: int) -> StateVector:
        return project(self.s0, self.matrix, n)

    def path(self, n: int) -> np.ndarray:
        return project_path(self.s0, self.matrix, n)

    def expectation(self, n: int) -> float:
        return expected_severity(self.s0, self.matrix, n)

    def to_dict(self) -> dict:
        return {
            "topology": self.topology.kind.value,
            "K": self.K,
            "s0": [float(x) for x in self.s0.probs],
            "P": [[float(x) for x in row] for row in self.matrix.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Chain":
        try:
            topology = ChainTopology(TopologyKind(d["topology"]), int(d["K"]))
            return cls(StateVector(d["s0"]), TransitionMatrix(d["P"], topology))
        except (KeyError, TypeError, ValueError) as exc:
            raise ChainError(f"malformed chain document: {exc}") from exc

    def to_json(self) -> str:
        # json emits repr() floats, the shortest string that round-trips
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Chain":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ChainError(f"chain file is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ChainError("chain document must be a JSON object")
        return cls.from_dict(d)


# Reference single-step chain used by the tests and demos.
EXAMPLE_SINGLE_RATES = (0.045, 0.028, 0.021, 0.012)


def example_single_chain() -> Chain:
    return Chain(StateVector.pristine(5), TransitionMatrix.from_rates(EXAMPLE_SINGLE_RATES))
