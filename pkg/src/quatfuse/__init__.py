"""Consistent distributed tracking of a 3-D target over a camera network.

Track-to-track fusion by inverse covariance intersection, lifted to
augmented-quaternion states (orientation + position + velocity) through an
error-state filter, plus the Monte-Carlo simulation harness used to
evaluate it against CI-based and centralized baselines.
"""

__version__ = "0.1.0"

from . import cli, config, estimator, fusion, metrics, models, quat, simnet, state
from .estimator import (MeasurementContribution, centralized_step,
                        ci_variant_intermediate, intermediate_estimate,
                        measurement_contribution, propagate, update)
from .fusion import (FusionDegeneracyError, VectorEstimate, ci_fuse_multi,
                     ci_fuse_two, ici_fuse_multi, ici_fuse_two,
                     optimize_alpha_two, trace_weights)
from .metrics import AggregateReport, aggregate, step_metrics
from .models import CameraModel, ImuReading, Measurement, NoiseSpec
from .simnet import (CommGraph, Scenario, TrajectorySpec, TrialRecord,
                     generate_trajectory, run_monte_carlo, run_trial,
                     sample_graph)
from .state import Estimate, TargetState, boxplus, error_between
