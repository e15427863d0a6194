"""Differentially private frequency estimation by sampling.

Users hold one item each.  The mechanisms here release a noisy histogram
whose only randomness is which users take part (and, in the two-stage
variant, which items each participant reports).  Shares over a prime field
let the protocols aggregate without any party seeing an individual record.
"""

from .field import FieldSpec, EncodedRecord, encode_one_hot, zero_record, smallest_prime_above
from .sharing import ShareBundle, share, reconstruct, aggregate_shares, aggregate_bundles, coalition_view
from .mechanisms import (
    ADAPTIVE,
    UNIFORM,
    FrequencyEstimate,
    InfeasibleCalibration,
    MechanismParams,
    calibrate_p_thm1,
    check_thm2,
    dpcs,
    dpdg,
    gaussian_crossover_n,
    largest_feasible_z,
    min_delta_thm1,
    satisfies_thm1,
    two_stage_sample,
)
from .protocols import Transcript, adversary_view, audit_complexity, run_dpds, run_tss, run_tss_prime
from .weighting import GroupReport, WeightAssignment, closed_form_weights, combine, optimize_weights
from .datasets import Dataset, ingest_checkins, ingest_income, load_dataset, save_dataset, synth_uniform
from .metrics import mse
from .experiments import ExperimentConfig, run_experiment, write_csv
from .estimators import (
    GaussianFrequencyEstimator,
    SamplingFrequencyEstimator,
    TwoStageFrequencyEstimator,
    WeightedFrequencyAggregator,
)

__version__ = "0.1.0"
