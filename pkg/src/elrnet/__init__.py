"""Training and evaluation engine for extremely-low-resolution action recognition.

Two-stream (RGB + stacked optical flow) convolutional networks built from
scratch on numpy, three spatio-temporal fusion operators, semi-coupled
eLR/HR training with per-layer filter sharing, the full video
preprocessing pipeline, and a cross-validation experiment harness.
"""

from .coupling import (
    Batch,
    CoupledPair,
    CoupledParameterStore,
    CouplingSchedule,
    TrainerConfig,
    TrainerState,
    augment_flip,
    build_coupled_pair,
    build_single,
    decouple,
    lr_schedule,
    shared_count,
    train_step,
)
from .data import (
    DatasetManifest,
    Fold,
    ManifestEntry,
    SampleBank,
    load_manifest,
    make_folds,
    make_moving_square_dataset,
    preprocess_manifest,
    write_synthetic_dataset,
)
from .fusion import (
    FusionConvParams,
    fuse_concat_forward,
    fuse_conv_forward,
    fuse_sum_forward,
)
from .harness import (
    ExperimentConfig,
    FoldResult,
    average_two_stream,
    evaluate,
    export_features,
    load_config,
    run_experiment,
)
from .net import (
    LayerSpec,
    Network,
    NetworkSpec,
    build_network,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .video import (
    FlowField,
    FlowStack,
    VideoTensor,
    bicubic_resize,
    build_flow_stack,
    compute_flow,
    encode_flow_color,
    normalize_video,
    preprocess_video,
    make_sample,
    resize_temporal_spline,
)

__version__ = "0.1.0"
