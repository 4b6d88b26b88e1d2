"""Hierarchical spatial-temporal network for multi-channel ordinal
emotion-score classification, with its own autodiff core, graph
hierarchy, metrics, protocols, and synthetic corpus."""

from .errors import (
    ContractError,
    DataError,
    DimensionError,
    HistnError,
    LabelError,
    MetricError,
    NumericError,
    ParameterError,
    ProtocolError,
    ValidationError,
)
from .graph import (
    DREAMER_CHANNELS,
    GraphHierarchy,
    LevelGraph,
    build_hierarchy,
    build_prior_graph,
    chebyshev_basis,
    connected_components,
    graph_diameter,
    max_eigenvalue,
    normalized_laplacian,
)
from .metrics import (
    EvalReport,
    confusion_matrix,
    macro_f1,
    one_hot,
    paired_t_test,
    per_class_f1,
    seq2hr,
    smooth_label,
    top2_accuracy,
    tri_p,
)
from .model import (
    GmmParams,
    HistnModel,
    ModelConfig,
    build_model,
    cheb_graph_conv,
    count_parameters,
    load_checkpoint,
    node_fusion,
    predict_ranking,
    save_checkpoint,
    variant_loss,
)
from .data import (
    DatasetManifest,
    Segment,
    SynthSpec,
    TrialRecord,
    balanced_batch,
    baseline_normalize,
    consensus_relabel,
    load_dataset,
    load_manifest,
    read_signal,
    segments_to_batch,
    synth_generate,
    window_sample,
    write_signal,
)
from .tensor import Tensor, backward, grad_check
from .training import (
    AdamState,
    ProtocolConfig,
    ProtocolResult,
    RunRecord,
    adam_step,
    fine_tune,
    fold_plan,
    run_loocv,
    run_subject_dependent_cv,
    train,
)

__version__ = "0.1.0"
