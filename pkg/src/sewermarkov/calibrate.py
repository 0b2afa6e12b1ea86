"""Least-squares calibration of chains against discretized tables.

The objective is the root mean weighted square error between projected and
observed state frequencies over the table's steps. Each simplex-valued
parameter block (the initial vector and every transition row) is mapped
from a box ``[0, 1]^m`` by stick-breaking, so the all-zero parameter vector
is exactly the pristine start with an identity matrix and every point the
optimizer visits is a valid chain. L-BFGS-B then handles the box.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .chain import (Chain, ChainTopology, SeverityScale, StateVector, TopologyKind,
                    TransitionMatrix, project_path)
from .discretize import (DiscretizationConfig, DiscretizedTable, EmptyTableError, Observations,
                         drop_out_of_range, observations, table_from_observations, weights)

log = logging.getLogger(__name__)

NEAR_ABSORBING = 1.0 - 1e-4
MAX_FAILURE_FRACTION = 0.2
BAND_QUANTILES = (0.025, 0.5, 0.975)


class FitError(RuntimeError):
    pass


class EnsembleError(RuntimeError):
    pass


@dataclass(frozen=True)
class CalibrationConfig:
    topology: ChainTopology
    max_iterations: int = 500
    convergence_tol: float = 1e-10
    replicas: int = 1000
    rng_seed: int = 0
    fit_initial_vector: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be > 0")
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topology"] = self.topology.kind.value
        d["K"] = self.topology.K
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationConfig":
        d = dict(d)
        topology = ChainTopology(TopologyKind(d.pop("topology")), int(d.pop("K")))
        return cls(topology, **d)


# ---------------------------------------------------------------------------
# objective


def _objective(s0, P, steps, target, w, need_grad=True):
    """Err and, optionally, its gradient with respect to ``s0`` and ``P``."""
    R, K = target.shape
    N = int(steps.max())
    path = np.empty((N + 1, K))
    path[0] = s0
    for m in range(N):
        path[m + 1] = path[m] @ P
    diff = path[steps] - target
    err = float(np.sqrt(np.sum(w[:, None] * diff * diff) / (R * K)))
    if not need_grad:
        return err, None, None
    if err == 0.0:
        return err, np.zeros(K), np.zeros((K, K))
    seed = np.zeros((N + 1, K))
    np.add.at(seed, steps, 2.0 * w[:, None] * diff)
    # adjoint sweep backwards through s_{m+1} = s_m P
    lam = seed[N].copy()
    gP = np.zeros((K, K))
    for m in range(N - 1, -1, -1):
        gP += np.outer(path[m], lam)
        lam = lam @ P.T + seed[m]
    scale = 1.0 / (2.0 * err * R * K)
    return err, lam * scale, gP * scale


def _as_arrays(table: DiscretizedTable, w=None):
    w = weights(table) if w is None else np.asarray(w, dtype=float)
    if len(w) != len(table):
        raise ValueError(f"{len(w)} weights for {len(table)} table rows")
    return table.steps, table.freqs, w


def error(s0: StateVector, matrix: TransitionMatrix, table: DiscretizedTable, w=None) -> float:
    """Root mean weighted square error of a chain against a table.

    ``w`` defaults to the table's normalized counts.
    """
    if s0.K != table.K or matrix.K != table.K:
        raise ValueError(f"chain K={matrix.K} does not match table K={table.K}")
    steps, target, w = _as_arrays(table, w)
    return _objective(s0.probs, matrix.entries, steps, target, w, need_grad=False)[0]


def error_gradient(s0: StateVector, matrix: TransitionMatrix, table: DiscretizedTable, w=None):
    """Analytic gradient of :func:`error` w.r.t. the raw ``s0`` and ``P`` entries."""
    steps, target, w = _as_arrays(table, w)
    _, gs, gP = _objective(s0.probs, matrix.entries, steps, target, w)
    return gs, gP


# ---------------------------------------------------------------------------
# stick-breaking parametrization


def _stick_forward(v):
    """Map ``v`` in [0,1]^m to (off-diagonal masses, remainder, partial sticks)."""
    m = len(v)
    x = np.empty(m)
    r = np.empty(m)
    rem = 1.0
    for j in range(m):
        r[j] = rem
        x[j] = v[j] * rem
        rem *= 1.0 - v[j]
    return x, rem, r


def _stick_backward(v, r, g_x, g_rem):
    gv = np.empty(len(v))
    rho = g_rem
    for j in range(len(v) - 1, -1, -1):
        gv[j] = (g_x[j] - rho) * r[j]
        rho = g_x[j] * v[j] + rho * (1.0 - v[j])
    return gv


class Parametrization:
    """Box-constrained coordinates for the free entries of a chain.

    Block layout: initial vector (if fitted) then one block per transient
    row. Within a block the coordinates break the stick toward the nearest
    worse state first; what is left stays on the diagonal (or on state 1
    for the initial vector). ``theta = 0`` is the pristine identity chain.
    """

    def __init__(self, topology: ChainTopology, fit_initial_vector: bool = True):
        self.topology = topology
        self.fit_initial_vector = fit_initial_vector
        K = topology.K
        self.blocks = []  # (row, diagonal column, target columns); row -1 is s0
        if fit_initial_vector:
            self.blocks.append((-1, 0, list(range(1, K))))
        for i in range(K - 1):
            self.blocks.append((i, i, topology.free_targets(i)))
        self.size = sum(len(b[2]) for b in self.blocks)

    def unpack(self, theta):
        K = self.topology.K
        s0 = np.zeros(K)
        s0[0] = 1.0
        P = np.zeros((K, K))
        P[K - 1, K - 1] = 1.0
        pos = 0
        for row, diag, targets in self.blocks:
            m = len(targets)
            x, rem, _ = _stick_forward(theta[pos:pos + m])
            pos += m
            vec = s0 if row < 0 else P[row]
            vec[:] = 0.0
            vec[targets] = x
            vec[diag] = rem
        return s0, P

    def pullback(self, theta, g_s0, g_P):
        out = np.empty(self.size)
        pos = 0
        for row, diag, targets in self.blocks:
            m = len(targets)
            v = theta[pos:pos + m]
            _, _, r = _stick_forward(v)
            g = g_s0 if row < 0 else g_P[row]
            out[pos:pos + m] = _stick_backward(v, r, g[targets], g[diag])
            pos += m
        return out

    def chain(self, theta) -> Chain:
        s0, P = self.unpack(theta)
        return Chain(StateVector(s0), TransitionMatrix(P, self.topology))


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class CalibratedChain:
    s0: StateVector
    matrix: TransitionMatrix
    err: float
    iterations_used: int = 0
    converged: bool = True

    @property
    def chain(self) -> Chain:
        return Chain(self.s0, self.matrix)

    @property
    def topology(self) -> ChainTopology:
        return self.matrix.topology

    def near_absorbing_states(self, threshold: float = NEAR_ABSORBING) -> list[int]:
        """Transient states (1-based) whose self-transition exceeds ``threshold``."""
        d = np.diag(self.matrix.entries)[:-1]
        return [int(i) + 1 for i in np.nonzero(d > threshold)[0]]

    def to_dict(self) -> dict:
        d = self.chain.to_dict()
        d.update(err=self.err, converged=self.converged, iterations_used=self.iterations_used)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibratedChain":
        ch = Chain.from_dict(d)
        return cls(ch.s0, ch.matrix, float(d["err"]), int(d.get("iterations_used", 0)),
                   bool(d["converged"]))


def fit(table: DiscretizedTable, config: CalibrationConfig,
        on_iterate: Callable[[Chain, float], None] | None = None) -> CalibratedChain:
    """Calibrate a chain to ``table`` starting from the pristine identity chain.

    ``on_iterate`` is called with the chain and objective value after each
    accepted optimizer iteration.
    """
    if len(table) == 0:
        raise EmptyTableError("cannot fit an empty table")
    if table.K != config.topology.K:
        raise ValueError(f"table K={table.K} does not match topology K={config.topology.K}")
    steps, target, w = _as_arrays(table)
    par = Parametrization(config.topology, config.fit_initial_vector)
    theta0 = np.zeros(par.size)
    best = {"err": np.inf, "theta": theta0}

    def fun(theta):
        s0, P = par.unpack(theta)
        err, gs, gP = _objective(s0, P, steps, target, w)
        if not np.isfinite(err):
            raise FitError(f"non-finite objective at theta={theta.tolist()}")
        if err < best["err"]:
            best["err"], best["theta"] = err, theta.copy()
        return err, par.pullback(theta, gs, gP)

    err0, _ = fun(theta0)
    if par.size == 0 or err0 == 0.0:
        return _calibrated(par, theta0, err0, 0, True)

    callback = None
    if on_iterate is not None:
        def callback(xk):
            s0, P = par.unpack(xk)
            on_iterate(par.chain(xk), _objective(s0, P, steps, target, w, need_grad=False)[0])

    res = minimize(fun, theta0, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * par.size,
                   callback=callback,
                   options={"maxiter": config.max_iterations, "ftol": config.convergence_tol,
                            "gtol": 1e-14, "maxfun": 50 * config.max_iterations, "maxls": 50})
    # status 1: iteration or evaluation budget exhausted; 2: the line search
    # could not improve further, i.e. the improvement fell below any tolerance
    converged = res.status != 1
    theta = best["theta"]
    return _calibrated(par, theta, best["err"], int(res.nit), converged)


def _calibrated(par, theta, err, nit, converged) -> CalibratedChain:
    ch = par.chain(theta)
    return CalibratedChain(ch.s0, ch.matrix, float(err), nit, converged)


# ---------------------------------------------------------------------------
# bootstrap


def half_sample(items: Sequence, rng: np.random.Generator):
    """Draw ``floor(N/2)`` distinct items without replacement, in input order."""
    n = len(items)
    if n < 2:
        raise ValueError(f"cohort too small for half-sampling ({n} pipe(s))")
    idx = np.sort(rng.choice(n, n // 2, replace=False))
    if isinstance(items, np.ndarray):
        return items[idx]
    return [items[i] for i in idx]


def replica_streams(seed: int, n: int) -> list[np.random.Generator]:
    """Independent, order-free random streams for ``n`` replicas."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


@dataclass(frozen=True)
class ReplicaFailure:
    replica: int
    reason: str


@dataclass
class Ensemble:
    members: list[CalibratedChain]
    config: CalibrationConfig
    source_fingerprint: str
    delta_t: int
    damage_code: str = ""
    failures: list[ReplicaFailure] = field(default_factory=list)

    def __post_init__(self):
        kinds = {(m.topology.kind, m.topology.K) for m in self.members}
        if len(kinds) > 1:
            raise ValueError(f"ensemble members disagree on topology: {kinds}")

    def __len__(self):
        return len(self.members)

    @property
    def K(self) -> int:
        return self.config.topology.K

    def absorption_counts(self) -> dict[int, int]:
        """How many members have each transient state (1-based) near-absorbing."""
        counts = {k: 0 for k in range(1, self.K)}
        for m in self.members:
            for k in m.near_absorbing_states():
                counts[k] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "source_fingerprint": self.source_fingerprint,
            "delta_t": self.delta_t,
            "damage_code": self.damage_code,
            "members": [m.to_dict() for m in self.members],
            "failures": [asdict(f) for f in self.failures],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        return cls([CalibratedChain.from_dict(m) for m in d["members"]],
                   CalibrationConfig.from_dict(d["config"]), d["source_fingerprint"],
                   int(d["delta_t"]), d.get("damage_code", ""),
                   [ReplicaFailure(**f) for f in d.get("failures", [])])

    @classmethod
    def from_json(cls, text: str) -> "Ensemble":
        return cls.from_dict(json.loads(text))


def fingerprint(obs: Observations, disc: DiscretizationConfig) -> str:
    h = hashlib.sha256()
    h.update(f"{disc.damage_code}|{disc.delta_t}|{disc.max_age}|".encode())
    h.update("\n".join(obs.pipe_ids).encode())
    for arr in (obs.pipe_index, obs.ages, obs.states):
        h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
    return h.hexdigest()


_WORKER = {}


def _init_worker(obs, disc, calib, K):
    _WORKER.update(obs=obs, disc=disc, calib=calib, K=K)


def _run_replica(job):
    b, rng = job
    obs, disc, calib, K = _WORKER["obs"], _WORKER["disc"], _WORKER["calib"], _WORKER["K"]
    try:
        chosen = half_sample(np.arange(len(obs.pipe_ids)), rng)
        mask = np.isin(obs.pipe_index, chosen)
        table = table_from_observations(obs.ages[mask], obs.states[mask], disc, K)
        return b, fit(table, calib)
    except (EmptyTableError, FitError, ValueError) as exc:
        return b, ReplicaFailure(b, f"{type(exc).__name__}: {exc}")


def bootstrap_observations(obs: Observations, disc: DiscretizationConfig, calib: CalibrationConfig,
                           threads: int = 1) -> Ensemble:
    """Repeated half-sample bootstrap over pre-built observations."""
    K = calib.topology.K
    obs = drop_out_of_range(obs, disc)
    if len(obs.pipe_ids) < 2:
        raise ValueError(f"cohort too small for half-sampling ({len(obs.pipe_ids)} pipe(s))")
    jobs = list(enumerate(replica_streams(calib.rng_seed, calib.replicas)))
    if threads > 1 and calib.replicas > 1:
        with ProcessPoolExecutor(threads, initializer=_init_worker,
                                 initargs=(obs, disc, calib, K)) as pool:
            results = list(pool.map(_run_replica, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        _init_worker(obs, disc, calib, K)
        results = [_run_replica(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    members = [r for _, r in results if isinstance(r, CalibratedChain)]
    failures = [r for _, r in results if isinstance(r, ReplicaFailure)]
    ens = Ensemble(members, calib, fingerprint(obs, disc), disc.delta_t, disc.damage_code, failures)
    if len(failures) > MAX_FAILURE_FRACTION * calib.replicas:
        raise EnsembleError(f"{len(failures)} of {calib.replicas} replicas failed; "
                            f"first: {failures[0].reason}")
    return ens


def bootstrap(pipes, inspections, disc: DiscretizationConfig, calib: CalibrationConfig,
              threads: int = 1) -> Ensemble:
    """Fit ``calib.replicas`` chains, each to a random half of the cohort's pipes.

    A pipe's inspections always travel with it. Replica ``b`` draws from its
    own child stream of ``calib.rng_seed``, so results do not depend on
    execution order or ``threads``.
    """
    return bootstrap_observations(observations(pipes, inspections, disc.damage_code), disc, calib, threads)


# ---------------------------------------------------------------------------
# bands


@dataclass(frozen=True)
class Bands:
    steps: np.ndarray
    lower: np.ndarray
    median: np.ndarray
    upper: np.ndarray
    delta_t: int
    quantity: str

    @property
    def t_years(self) -> np.ndarray:
        return self.steps * self.delta_t + self.delta_t / 2

    def to_csv(self) -> str:
        lines = ["step,t_years,lower,median,upper"]
        for s, t, lo, me, hi in zip(self.steps, self.t_years, self.lower, self.median, self.upper):
            lines.append(f"{int(s)},{float(t)!r},{float(lo)!r},{float(me)!r},{float(hi)!r}")
        return "\n".join(lines) + "\n"


def member_curves(ensemble: Ensemble, horizon: int, quantity: str = "expectation",
                  state: int | None = None) -> np.ndarray:
    """``(members, horizon + 1)`` array of one quantity along each member's path."""
    if quantity == "expectation":
        pick = SeverityScale(ensemble.K).classes
    elif quantity == "state_prob":
        if state is None or not 1 <= state <= ensemble.K:
            raise ValueError(f"state_prob needs a state in 1..{ensemble.K}")
        pick = np.zeros(ensemble.K)
        pick[state - 1] = 1.0
    else:
        raise ValueError(f"unknown quantity {quantity!r}")
    return np.array([project_path(m.s0, m.matrix, horizon) @ pick for m in ensemble.members])


def bands(ensemble: Ensemble, horizon: int, quantity: str = "expectation",
          state: int | None = None) -> Bands:
    """Central 95% band and median of a quantity at steps ``0..horizon``.

    Quantiles use linear interpolation between order statistics.
    """
    if not ensemble.members:
        raise ValueError("ensemble has no members")
    curves = member_curves(ensemble, horizon, quantity, state)
    lo, med, hi = np.quantile(curves, BAND_QUANTILES, axis=0, method="linear")
    label = quantity if quantity == "expectation" else f"state_prob({state})"
    return Bands(np.arange(horizon + 1), lo, med, hi, ensemble.delta_t, label)
