"""Table detection from text-block geometry.

Pages are sequences of axis-aligned text blocks. An 8-feature geometric
encoding per block feeds a stacked bidirectional LSTM with multi-head
self-attention that classifies each block as row header, column header,
content cell, or outside any table; post-processing clusters the
in-table blocks and splits stacked tables on their header lines to
produce table bounding boxes. Training, gradients, and evaluation are
implemented from first principles in numpy.
"""

from .datagen import (
    BUILTIN_STYLES,
    DENSE_SCIENTIFIC,
    SPARSE_FINANCIAL,
    LayoutError,
    PageValidationError,
    StyleProfile,
    corpus_from_manifest,
    generate_corpus,
    generate_page,
    style_from_dict,
    validate_page,
)
from .estimator import TableDetector
from .geometry import (
    FEATURE_DIM,
    LABEL_ORDER,
    NUM_CLASSES,
    BlockLabel,
    Box,
    InvalidBlockError,
    InvalidBoxError,
    InvalidPageError,
    Page,
    TextBlock,
    featurize,
    featurize_page,
    group_lines,
    iou,
    order_blocks,
    union_box,
)
from .io import (
    BadMagicError,
    CheckpointError,
    ChecksumError,
    DatasetFormatError,
    LengthMismatchError,
    VersionMismatchError,
    load_checkpoint,
    parse_config,
    read_pages,
    save_checkpoint,
    write_pages,
)
from .metrics import (
    DEFAULT_THRESHOLDS,
    MetricsReport,
    PageEval,
    compute_prf,
    evaluate_dataset,
    match_at_threshold,
)
from .model import (
    ModelConfig,
    ModelWeights,
    bilstm_forward,
    forward,
    forward_batch,
    init_weights,
    mha_forward,
    param_count,
    tensor_shapes,
)
from .postprocess import (
    Detection,
    DetectionResult,
    LabeledBlock,
    TableRegion,
    cluster_regions,
    detect_tables,
    split_by_headers,
)
from .training import (
    EmptyDatasetError,
    GradCheckReport,
    NanGradientError,
    OptimizerState,
    TrainConfig,
    UndefinedLossError,
    adam_step,
    backward,
    compare_gradients,
    cross_entropy,
    grad_check,
    lr_at_step,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # geometry
    "Box", "TextBlock", "Page", "BlockLabel", "LABEL_ORDER", "NUM_CLASSES",
    "FEATURE_DIM", "featurize", "featurize_page", "group_lines", "order_blocks",
    "iou", "union_box", "InvalidPageError", "InvalidBlockError", "InvalidBoxError",
    # model
    "ModelConfig", "ModelWeights", "tensor_shapes", "param_count", "init_weights",
    "forward", "forward_batch", "bilstm_forward", "mha_forward",
    # training
    "TrainConfig", "OptimizerState", "cross_entropy", "backward", "lr_at_step",
    "adam_step", "train", "grad_check", "compare_gradients", "GradCheckReport",
    "UndefinedLossError", "NanGradientError", "EmptyDatasetError",
    # postprocess
    "LabeledBlock", "TableRegion", "Detection", "DetectionResult",
    "cluster_regions", "split_by_headers", "detect_tables",
    # metrics
    "DEFAULT_THRESHOLDS", "MetricsReport", "PageEval", "match_at_threshold",
    "compute_prf", "evaluate_dataset",
    # datagen
    "StyleProfile", "DENSE_SCIENTIFIC", "SPARSE_FINANCIAL", "BUILTIN_STYLES",
    "generate_page", "generate_corpus", "corpus_from_manifest", "validate_page",
    "style_from_dict", "LayoutError", "PageValidationError",
    # io
    "save_checkpoint", "load_checkpoint", "read_pages", "write_pages",
    "parse_config", "CheckpointError", "BadMagicError", "VersionMismatchError",
    "LengthMismatchError", "ChecksumError", "DatasetFormatError",
    # estimator
    "TableDetector",
]
