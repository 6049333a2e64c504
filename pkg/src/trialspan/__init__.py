"""Clinical-trial duration prediction toolkit.

Pipeline: registry XML -> validated records -> embedded feature bundles ->
attention-based regressor (plus classical baselines) -> per-phase metrics
with significance -> Shapley attributions of single predictions.
"""

__version__ = "0.1.0"

from .baselines import (
    GBDTConfig,
    GBDTModel,
    MeanPredictor,
    RidgeModel,
    flat_features,
    flat_mlp_fit,
    gbdt_fit,
    mean_fit,
    ridge_fit,
)
from .embedding import (
    CacheProvider,
    EmbeddedTrial,
    HashedProvider,
    build_features,
    embed_dataset,
    embed_set,
    hash_embed,
    load_cache,
    phase_onehot,
)
from .encoder import (
    ModelConfig,
    ModelParams,
    concat_features,
    encode_criteria,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .explain import (
    Attribution,
    MaskingGame,
    game_from_record,
    mask_subset,
    render_attribution,
    sentence_game,
    shapley_exact,
    shapley_sampled,
)
from .ingest import (
    DatasetSplit,
    DurationStats,
    Skip,
    TrialRecord,
    compute_duration,
    filter_eligible,
    parse_trial_xml,
    split_sentences,
    split_temporal,
    summarize,
)
from .metrics import (
    ComparisonReport,
    EvalReport,
    emit_report,
    evaluate,
    mae,
    pearson,
    r2,
    rmse,
    significance,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainResult,
    adam_step,
    finite_difference_grads,
    gradients,
    mse_loss,
    train,
)
