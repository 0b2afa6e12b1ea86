"""
From simulated inspections to a discretized table
=================================================

Fake inspection records are drawn from a known chain, loaded back the way
real data would be, and binned by age.
"""
import io

import numpy as np

from sewermarkov import DiscretizationConfig, build_table, clean, load_dataset
from sewermarkov.chain import example_single_chain
from sewermarkov.synth import SynthesisConfig, generate_dataset, grid_ages

truth = example_single_chain()
config = SynthesisConfig(truth, n_pipes=20_000, age_distribution=grid_ages(75), rng_seed=1)
pipes_csv, inspections_csv = generate_dataset(config)
print(pipes_csv.splitlines()[:3])
print(inspections_csv.splitlines()[:3])

loaded = load_dataset(io.StringIO(pipes_csv), io.StringIO(inspections_csv))
print("rejected rows:", len(loaded.rejects))
pipes, inspections, report = clean(loaded.pipes, loaded.inspections)
print(report.as_dict())

table = build_table(pipes, inspections, DiscretizationConfig("BAF", delta_t=3))
print(table.to_csv()[:400])

# compare the empirical rows with what the chain says
for row in table.rows[::5]:
    gap = np.abs(np.array(row.freqs) - truth.project(row.step).probs).max()
    print(f"step {row.step:2d}  n={row.count:4d}  max gap {gap:.4f}")
