"""Federated learning with sketch-compressed, differentially private updates."""

from .clipping import ClipImpactBit, ClippingState, clip, clip_impact_bit, update_threshold
from .config import ExperimentSpec, RunPlan, build_run, materialize_runs, parse_config
from .data import ClientPartition, Dataset, load_idx, partition, synthesize
from .engine import (
    ClientMessage,
    RunConfig,
    ServerState,
    Variant,
    client_step,
    init_run,
    resolve_variant,
    run,
    run_round,
    sample_clients,
    server_round,
)
from .errors import (
    BudgetExhaustedError,
    ConfigFileError,
    ConfigurationError,
    IngestError,
)
from .metrics import RoundRecord, read_records, write_records
from .models import (
    Architecture,
    Batch,
    ModelParams,
    apply_update,
    evaluate_accuracy,
    evaluate_loss,
    init_params,
    loss_and_gradient,
)
from .privacy import (
    NoiseSpec,
    PrivacyAccountant,
    add_gaussian_noise,
    bit_release_rho,
    calibrate_dense_noise,
    calibrate_sketch_noise,
    epsilon_from_rho,
    noimp_diagnostic,
    rho_from_epsilon,
    sketch_sensitivity,
)
from .runner import run_experiments
from .sketch import (
    CountSketch,
    SketchConfig,
    TopKResult,
    deserialize_sketch,
    make_sketch,
    serialize_sketch,
    size_for_heavy_recovery,
)

__version__ = "0.1.0"
