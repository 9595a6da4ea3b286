"""Simulation library for joint activity detection and channel estimation in
wideband massive access, built around multi-rank aware Riemannian recovery."""

from .channel import (SystemConfig, ClusterParams, ChannelRealization, ConfigError,
                      steering_vector, delay_vector, build_dictionaries,
                      sample_clusters, assemble_state_matrix, generate_scene)
from .measurement import (MeasurementOperator, generate_pilots, sample_subsets,
                          build_operator, operator_from_config, forward, adjoint,
                          dense_matrix, add_noise, snr_of_device, average_snr,
                          calibrate_sigma2, opnorm_estimate)
from .manifold import (SingularPointError, DegenerateStepError, metric,
                       horizontal_project, retract, vector_transport,
                       riemannian_gradient)
from .solver import (SolverConfig, SolverTrace, SolverAbort, smooth_abs, loss,
                     euclidean_gradient, truncate_observation, spectral_init,
                     rg_step, rc_step, solve, split_factors, states_from_factors,
                     factors_from_states)
from .baselines import BaselineConfig, fista_solve, omp_solve
from .metrics import (DetectionResult, TrialScore, detect_activity, default_v1,
                      estimate_channels, aer, nmse, aligned_distance, incoherence,
                      incoherence_rows)
from .analysis import (BoundParams, sg_norm, contiguous_blocks, theorem_bound,
                       theorem1_bound, traditional_bound, compare_bounds,
                       bound_table, draw_block_sparse_lowrank, empirical_rip)
from .harness import (ExperimentSpec, ResultRecord, run_trial, run_sweep,
                      benchmark_runtime, emit_results, aggregate, derive_seed,
                      load_records_csv)

__version__ = "0.1.0"
