"""Cluster-aided next-location prediction over per-user Markov kernels."""

from .dirichlet import (KernelEstimate, MixtureBase, PseudoCounts, condition,
                        log_marginal, log_mixture_marginal, log_xi,
                        posterior_mean, prune)
from .engine import (CampConfig, CampError, CampModel, estimate_staying_time,
                     estimate_theta, fit, lemma1_weights, solve_alpha,
                     theta_from_samples, update_alpha, update_base)
from .gibbs import (ClusterAssignment, GibbsConfig, GibbsError,
                    crp_step_weights, draw_batch, gibbs_sample)
from .metrics import (SimilarityMatrix, StayErrorSummary, capr, capr_time,
                      empirical_accuracy, iapr, mf_users, similarity,
                      similarity_matrix, staying_time_error, u_similar_count)
from .predictors import (KINDS, PredictionEvent, PredictionRequest,
                         PredictorError, RefitSchedule, predict_agg,
                         predict_camp, predict_markov, predict_markov2,
                         run_streaming, visible_counts)
from .synthetic import (ExactPosterior, SyntheticPrior, co_cluster_matrix,
                        enumerate_posterior, generate, random_kernels)
from .traces import (LocationAlphabet, TraceError, TraceSet, Trajectory,
                     TransitionCounts, count_transitions, ingest_csv,
                     jaccard_location_map, top_locations, write_csv)

__version__ = "0.1.0"
