"""
Comparing two cohorts
=====================

Two pipe groups deteriorating at different speeds, calibrated separately and
compared through their median expected class.
"""
from dataclasses import replace

from sewermarkov import (CalibrationConfig, Chain, DiscretizationConfig, StateVector, TransitionMatrix,
                         assign_cohort, bands, bootstrap, load_cohorts)
from sewermarkov.chain import ChainTopology
from sewermarkov.synth import SynthesisConfig, generate_records, grid_ages

slow = Chain(StateVector.pristine(), TransitionMatrix.from_rates([0.03, 0.02, 0.015, 0.01]))
fast = Chain(StateVector.pristine(), TransitionMatrix.from_rates([0.06, 0.04, 0.03, 0.02]))

pipes, inspections = [], []
for chain, material, seed in ((slow, "pvc", 1), (fast, "concrete", 2)):
    p, i = generate_records(SynthesisConfig(chain, 15_000, grid_ages(75), rng_seed=seed,
                                            material=material, content="mixed"))
    # ids restart for each group, so prefix them
    pipes += [replace(q, pipe_id=f"{material}-{q.pipe_id}") for q in p]
    inspections += [replace(r, inspection_id=f"{material}-{r.inspection_id}",
                            pipe_id=f"{material}-{r.pipe_id}") for r in i]

cohorts = load_cohorts()
disc = DiscretizationConfig("BAF")
curves = {}
for name in ("PMW", "CMW"):
    members = assign_cohort(pipes, cohorts[name])
    ids = {p.pipe_id for p in members}
    ens = bootstrap(members, [r for r in inspections if r.pipe_id in ids], disc,
                    CalibrationConfig(ChainTopology.single(), replicas=30))
    curves[name] = bands(ens, 42)
    print(name, len(members), "pipes")

for n in range(0, 43, 7):
    print(f"{curves['PMW'].t_years[n]:6.1f}y  PMW {curves['PMW'].median[n]:.3f}  CMW {curves['CMW'].median[n]:.3f}")
