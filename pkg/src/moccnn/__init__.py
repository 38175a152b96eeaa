"""Mixture-of-counting-CNNs: gated expert ensembles for patch-count regression."""

__version__ = "0.1.0"

from .data import (
    DensityMap,
    PatchSample,
    Scene,
    SynthConfig,
    SynthMode,
    grid_partition,
    kfold_split,
    load_scene,
    modes3,
    random_crops,
    render_density,
    synth_generate,
)
from .models import (
    ExpertNetConfig,
    FcGatingModel,
    GatingNetConfig,
    MoCModel,
    OrdinaryModel,
    build_fc_gating,
    build_moc,
    build_ordinary,
    forward_experts,
    forward_gate,
)
from .moe import (
    BatchPrediction,
    GatingLossBreakdown,
    combine,
    expert_loss,
    gating_loss,
    grad_expert_outputs,
    grad_gate_probs,
)
from .metrics import MetricsReport, crossval, evaluate_model, gating_report, predict_image, score
from .tensor import grad_check, max_relative_error, numerical_gradient
from .trainer import (
    OptimizerConfig,
    TrainingConfig,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)
