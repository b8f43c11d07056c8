"""Cross-site counterfactual synthesis with regularized fused Gromov-Wasserstein transport."""

from .core import (Coupling, Dataset, DatasetFormatError, EmpiricalMeasure, Observation,
                   OracleLeakError, Role, empirical_measure, load_dataset, pairwise_distances,
                   save_dataset)
from .metricmodel import (AffineMap, AlignmentKernelSpec, ResidualNet, alignment_kernel,
                          apply_inverse_map, graph_cost_matrix, parameter_gradient,
                          pullback_distance)
from .ottml import (OttmlConfig, OttmlResult, coupling_gradient, fgw_loss, fit_ottml,
                    frank_wolfe_step, graph_loss, joint_objective, sinkhorn)
from .synth import SynthConfig, generate_dataset, generate_point, synth_loss
from .dgp import (Environment, ScenarioSpec, build_mixing_matrix, draw_outcome_model,
                  make_environment, scenario_warp, simulate_arm)
from .evalmetrics import (EvalReport, ProjectionSet, energy_distance, full_report,
                          kde_divergence_1d, marginal_summary, mmd2_gaussian,
                          projected_divergence, sliced_w1, wasserstein_1d)
from .baselines import gensynth, matchsynth, twfe_synth
from .harness import ExperimentConfig, aggregate, run_experiment

__version__ = "0.1.0"
