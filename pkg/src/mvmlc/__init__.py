"""Multi-view multi-label classification under arbitrary missing views and
missing labels, built on a minimal numpy reverse-mode autodiff core.

Submodules:
    autodiff  tensors, tape, differentiable primitives, gradient checking
    data      dataset container, CSV/manifest I/O, missingness simulators
    model     masked view encoder, adaptive fusion, class-token encoder, heads
    losses    masked BCE and the label-guided graph constraint
    metrics   average precision, 1 - ranking loss, macro AUC
    trainer   Adam loop, evaluation driver, run history
    cli       synth / corrupt / train / eval / gradcheck commands
"""

from . import autodiff, data, losses, metrics, model, trainer
from .autodiff import Tape, Tensor, gradient_check
from .data import (
    MultiViewDataset,
    apply_masks,
    load_dataset,
    make_synthetic,
    save_dataset,
    simulate_missing_labels,
    simulate_missing_views,
    split,
)
from .losses import (
    LossContext,
    embedding_similarity,
    graph_constraint_loss,
    label_similarity,
    masked_bce,
    total_loss,
)
from .metrics import (
    MetricsReport,
    average_precision,
    compute_report,
    macro_auc,
    one_minus_ranking_loss,
)
from .model import (
    ModelConfig,
    ModelParams,
    adaptive_fusion,
    embed_views,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .trainer import RunHistory, TrainConfig, adam_step, evaluate, train

__version__ = "0.1.0"
