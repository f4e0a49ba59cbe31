"""Option-aware knowledge tracing with concept-map-conditioned knowledge
states and an IRT prediction head."""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    DatasetBundle,
    DataValidationError,
    InteractionRecord,
    QuestionMeta,
    SplitPlan,
    StudentSequence,
    SynthConfig,
    dataset_stats,
    derive_unchosen,
    generate_synthetic,
    load_dataset,
    make_folds,
    preprocess,
)
from .concept_map import (  # noqa: F401
    ConceptMap,
    TransitionStats,
    WeightedAdjacency,
    build_from_edges,
    infer_statistical_map,
    normalize_adjacency,
    question_edge_weights,
)
from .model import (  # noqa: F401
    CrktModel,
    InferenceSession,
    ModelConfig,
    PredictionOutput,
    forward,
    infer_incremental,
)
from .training import (  # noqa: F401
    LossConfig,
    TrainConfig,
    flip_augment,
    run_cv,
    train,
)
from .evaluation import (  # noqa: F401
    accuracy,
    auc,
    build_variant,
    explain,
)
