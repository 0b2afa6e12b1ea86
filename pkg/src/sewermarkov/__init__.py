"""Markov chain deterioration models for staged-degradation assets."""
from .chain import (Chain, ChainError, ChainTopology, SeverityScale, StateVector, TopologyKind,
                    TransitionMatrix, expected_severity, n_step_matrix, project, validate)
from .calibrate import (CalibratedChain, CalibrationConfig, Ensemble, bands, bootstrap, error,
                        fit, half_sample)
from .discretize import DiscretizationConfig, DiscretizedTable, build_table, weights
from .ingest import assign_cohort, clean, load_cohorts, load_dataset

__version__ = "0.1.0"
