"""Few-shot presentation-attack detection over feature vectors.

Prototypical episodic learning with a trainable MLP embedder, ISO/IEC
30107-3 PAD metrics (APCER, BPCER, DET, EER, BPCER_AP), stratified episode
sampling with a new-country support extension workflow, and a synthetic
multi-country feature generator for end-to-end experiments.
"""

from .data import (
    BONA_FIDE_SOURCE,
    Dataset,
    Label,
    NormalizationStats,
    Sample,
    SplitSpec,
    apply_normalization,
    feature_matrix,
    fit_normalization,
    load_feature_table,
    split_by_users,
    write_feature_table,
)
from .episodes import (
    EpisodeSpec,
    ExtensionReport,
    ExtensionSpec,
    SyntheticSpec,
    extend_support,
    generate_synthetic,
    sample_episode,
    sample_support,
)
from .errors import ConfigError, DataError, NumericalError, ProtopadError
from .metrics import (
    DetCurve,
    PadReport,
    ScoreSet,
    apcer,
    apcer_worst_case,
    bpcer,
    bpcer_at_ap,
    build_report,
    decide,
    det_curve,
    eer,
)
from .mlp import (
    Activation,
    EmbeddingConfig,
    MlpParameters,
    embed_backward,
    embed_forward,
    embed_forward_batch,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .protonet import (
    ClassPosterior,
    DistanceMetric,
    Episode,
    PrototypeSet,
    classify_query,
    compute_prototypes,
    distance,
    episode_loss,
    episode_loss_gradient,
)
from .trainer import (
    EvalResult,
    OptimizerState,
    TrainConfig,
    TrainHistory,
    adamw_step,
    evaluate,
    gradient_check,
    train,
)

__version__ = "0.1.0"
