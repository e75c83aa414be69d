"""Desk-scale adaptive ensembling of compact compound-scaled CNNs.

Train N weak learners to overfit on disjoint stratified subsets of the
training data, freeze their feature extractors, and fine-tune a single
trainable combination layer over the concatenated features.  Ships with a
static parameter/FLOPs analyzer and a pipeline cost model.
"""

from .data import (
    Dataset,
    PreprocessSpec,
    SplitPlan,
    batch_iter,
    generate_synthetic,
    load_dataset,
    preprocess,
    save_dataset,
    semantic_split_override,
    stratified_disjoint_split,
)
from .ensemble import (
    AdaptiveEnsemble,
    OutputCombinationEnsemble,
    feature_concat,
    fine_tune_ensemble,
    majority_vote,
    run_comparison,
)
from .metrics import accuracy, confusion, weighted_f1
from .model import (
    LayerSpec,
    ScalingConfig,
    WeakLearner,
    build_scaled_cnn,
    strip_head_and_freeze,
    tiny_base_stack,
    train_weak_overfit,
)
from .optim import AdaBelief, EarlyStopper, OptimizerConfig
from .tensor import (
    Tensor,
    backward,
    conv2d,
    global_avg_pool,
    gradient_check,
    linear,
    log_softmax,
    new_tape,
    nll_loss,
    no_grad,
    relu,
    silu,
)

__version__ = "0.1.0"
