"""driftlab: continual test-time adaptation under drift, with reset policies.

Builds synthetic non-stationary classification streams, adapts a small
normalized MLP on them with entropy-based test-time methods, and measures
how reset policies (none, fixed-interval, random-interval, adaptive
shrink-restore) preserve the model's plasticity over long runs.
"""

from .adapters import AdaptStepResult, Adapter, AdapterConfig, bn_stats_step, eata_lite_step, tent_step
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, default_document, load_config_file, run_config_from_document, validate_document
from .errors import ConfigError, ContractError, DriftlabError, InputError, NumericError, ShapeError, TrainingError
from .flip import (
    FlipConfig,
    FlipTrace,
    ShrinkRestoreConfig,
    asr_step,
    ema_update,
    label_flip_score,
    should_trigger,
    shrink_restore,
    update_min,
)
from .harness import RunRecord, paired_gap, run_experiment, sweep, train_source_model, windowed_mean
from .model import (
    Architecture,
    Batch,
    ModelState,
    ProbOutput,
    classification_accuracy,
    entropy_and_grad,
    forward,
    init_model,
    sgd_step,
    train_source,
    weight_l2_norm,
)
from .policies import PolicyState, ResetPolicyConfig, replay_columns
from .stream import (
    BlobSampler,
    CorruptionKind,
    DomainSchedule,
    StreamState,
    apply_corruption,
    build_schedule,
    make_sampler,
    make_source_dataset,
    severity_at,
)

__version__ = "0.1.0"
