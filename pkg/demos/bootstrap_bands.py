"""
Calibrating with uncertainty bands
==================================

Fit a chain to simulated data, then refit on many random halves of the pipes
to see how much the projection moves.
"""
import numpy as np

from sewermarkov import CalibrationConfig, DiscretizationConfig, bands, bootstrap, build_table, fit
from sewermarkov.chain import ChainTopology, example_single_chain
from sewermarkov.synth import SynthesisConfig, generate_records, grid_ages

truth = example_single_chain()
pipes, inspections = generate_records(SynthesisConfig(truth, 30_000, grid_ages(75), rng_seed=3))
disc = DiscretizationConfig("BAF")

table = build_table(pipes, inspections, disc)
single = fit(table, CalibrationConfig(ChainTopology.single()))
print("fitted rates:", np.round(np.diag(single.matrix.entries, 1), 4))
print("err:", single.err, "iterations:", single.iterations_used)

# track the objective as the optimizer moves
trace = []
fit(table, CalibrationConfig(ChainTopology.multi()), on_iterate=lambda ch, err: trace.append(err))
print("multi objective trace:", np.round(trace[:8], 5))

ens = bootstrap(pipes, inspections, disc, CalibrationConfig(ChainTopology.single(), replicas=50, rng_seed=0))
b = bands(ens, horizon=42)
true_e = truth.path(42) @ np.arange(1, 6)
for n in range(0, 43, 6):
    print(f"t={b.t_years[n]:6.1f}y  [{b.lower[n]:.3f}, {b.median[n]:.3f}, {b.upper[n]:.3f}]  true {true_e[n]:.3f}")

# probability of the worst class instead of the expectation
print(bands(ens, 42, "state_prob", state=5).to_csv().splitlines()[-1])
