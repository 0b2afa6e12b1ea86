"""Independent oracles and fixture builders shared by the test modules.

Nothing here calls into the projection or calibration code it is used to
check.
"""
import datetime as dt

import numpy as np

from sewermarkov.chain import Chain, ChainTopology, StateVector, TransitionMatrix
from sewermarkov.ingest import (InspectionRecord, PipeRecord, write_inspections_csv,
                                write_pipes_csv)

REFERENCE_P = np.array([
    [0.955, 0.045, 0.0, 0.0, 0.0],
    [0.0, 0.972, 0.028, 0.0, 0.0],
    [0.0, 0.0, 0.979, 0.021, 0.0],
    [0.0, 0.0, 0.0, 0.988, 0.012],
    [0.0, 0.0, 0.0, 0.0, 1.0],
])

# Reference table rows keyed by step: (count, per-class tallies). The tallies
# are integer counts whose frequencies round to the printed two-decimal values.
REFERENCE_ROWS = {
    0: (832, (791, 25, 8, 8, 0)),
    16: (2339, (819, 1169, 281, 47, 23)),
    25: (64, (28, 13, 18, 3, 2)),
}
REFERENCE_STEP16_PRINTED = (0.35, 0.50, 0.12, 0.02, 0.01)


def random_chain(rng: np.random.Generator, kind: str = None, K: int = 5) -> Chain:
    """A random valid chain with occasional exact zeros and near-one diagonals."""
    kind = kind or rng.choice(["single", "multi"])
    topo = ChainTopology(kind, K)
    mask = topo.mask()
    P = np.zeros((K, K))
    for i in range(K - 1):
        cols = np.nonzero(mask[i])[0]
        raw = rng.exponential(size=len(cols))
        mode = rng.integers(4)
        if mode == 0:
            raw[cols == i] *= 200.0  # slow row
        elif mode == 1:
            raw[rng.random(len(cols)) < 0.4] = 0.0  # sparse row
            if raw.sum() == 0:
                raw[cols == i] = 1.0
        P[i, cols] = raw / raw.sum()
    P[K - 1, K - 1] = 1.0
    s = rng.exponential(size=K) * (rng.random(K) < 0.6)
    s[0] += rng.exponential() + 1e-3
    if rng.random() < 0.3:
        s = np.eye(K)[0]
    return Chain(StateVector(s / s.sum()), TransitionMatrix(P, topo))


def enumerate_paths(s0: np.ndarray, P: np.ndarray, n: int) -> np.ndarray:
    """State distribution after ``n`` steps by summing over every trajectory.

    Depth-first over all trajectories; branches of probability zero are cut
    since they contribute nothing.
    """
    K = len(s0)
    out = np.zeros(K)

    def walk(state, prob, remaining):
        if remaining == 0:
            out[state] += prob
            return
        for nxt in range(K):
            q = prob * P[state, nxt]
            if q != 0.0:
                walk(nxt, q, remaining - 1)

    for start in range(K):
        if s0[start] != 0.0:
            walk(start, s0[start], n)
    return out


def enumerate_matrix_power(P: np.ndarray, n: int) -> np.ndarray:
    K = len(P)
    out = np.zeros((K, K))
    for i in range(K):
        out[i] = enumerate_paths(np.eye(K)[i], P, n)
    return out


def hand_error(pred: np.ndarray, obs: np.ndarray, w: np.ndarray) -> float:
    """Root mean weighted square error written out with explicit loops."""
    R, K = obs.shape
    total = 0.0
    for r in range(R):
        for k in range(K):
            total += (pred[r][k] - obs[r][k]) ** 2 * w[r]
    return (total / (R * K)) ** 0.5


def build_dataset(rows, material="concrete", content="mixed", width=300.0, prefix="P",
                  year=2012, extra_codes=False):
    """Pipes and inspections realizing per-age class tallies exactly.

    ``rows`` maps an age to a tuple of per-class counts. Each pipe is
    inspected once at that age. With ``extra_codes`` some damaged pipes get
    an additional lower-class row for the same code and an unrelated
    ``BBF`` row, neither of which may change their state.
    """
    pipes, ins = [], []
    n = 0
    for age, tallies in sorted(rows.items()):
        for cls, count in enumerate(tallies, start=1):
            for _ in range(count):
                pid = f"{prefix}{n:06d}"
                iid = f"I{prefix}{n:06d}"
                n += 1
                date = dt.date(year, 3, 1)
                pipes.append(PipeRecord(pid, year - age, material, content, width))
                if cls == 1:
                    ins.append(InspectionRecord(iid, pid, date, "NONE", 1))
                else:
                    ins.append(InspectionRecord(iid, pid, date, "BAF", cls))
                    if extra_codes and n % 3 == 0:
                        ins.append(InspectionRecord(iid, pid, date, "BAF", max(1, cls - 1)))
                        ins.append(InspectionRecord(iid, pid, date, "BBF", 5))
    return pipes, ins


def reference_dataset():
    """CSV text of a dataset whose CMW/BAF table holds the three reference rows.

    Ages in each bin are spread over its three integer ages; PVC pipes with
    heavy damage are mixed in and must be excluded by the cohort filter.
    """
    per_age = {}
    for step, (count, tallies) in REFERENCE_ROWS.items():
        lo = 3 * step
        for offset in range(3):
            part = tuple(t // 3 + (1 if offset < t % 3 else 0) for t in tallies)
            per_age[lo + offset] = part
    pipes, ins = build_dataset(per_age, extra_codes=True)
    pvc_p, pvc_i = build_dataset({49: (0, 0, 0, 0, 50), 1: (0, 0, 0, 10, 0)}, material="pvc", prefix="V")
    return write_pipes_csv(pipes + pvc_p), write_inspections_csv(ins + pvc_i)
