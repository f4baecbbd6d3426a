"""Bayesian e-prop: variational training of adaptive spiking networks with local learning rules."""
from .eprop import (BROADCAST_ALIGNMENT, WEIGHT_TRANSPORT, EligibilityState, FeedbackWeights,
                    accumulate_gradient, eprop_trial, learning_signal, pseudo_derivative,
                    readout_gradient, update_eligibility)
from .network import (ConfigurationError, NetworkConfig, NeuronState, Trajectory, WeightSet,
                      decay_factors, run_trial, step_neurons)
from .task import (SpikeRaster, TaskConfig, TrialSpec, generate_batch, generate_novel_both,
                   generate_trial)
from .trainer import (Checkpoint, MetricsRecord, NumericalError, RunConfig, TrainConfig,
                      evaluate, load_checkpoint, nll_of_trial, probe_uncertainty,
                      save_checkpoint, train, train_epoch)
from .variational import (InvalidStateError, PriorConfig, VariationalParams, WeightSample,
                          chain_to_variational, elbo_estimate, init_params, kl_forward, kl_paper,
                          posterior_predictive, prior_grad_mean, prior_grad_std, sample_weights)

__version__ = "0.1.0"
