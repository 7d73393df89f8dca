"""Cross-city few-shot forecasting on spatio-temporal graphs."""

from .data import (
    CityDataset,
    CityGraph,
    NormStats,
    SignalSeries,
    SynthSpec,
    TargetSplit,
    WindowSample,
    fit_zscore,
    gaussian_adjacency,
    load_city,
    make_windows,
    split_target,
    synth_cities,
    write_city,
)
from .errors import (
    ConfigError,
    ContractError,
    DegenerateStatsError,
    DivergenceError,
    EmptyDatasetError,
    EvaluationError,
    LoadError,
    ParameterError,
    SamplingError,
    StgfslError,
    ValidationError,
)
from .graph_recon import meta_graph, recon_loss
from .meta_learner import (
    FusionParams,
    SpatialEncoderParams,
    TemporalEncoderParams,
    attention_scores,
    fuse,
    gru_cell,
    normalize_attention,
    spatial_meta,
    temporal_meta,
)
from .meta_train import (
    MetaConfig,
    Task,
    adapt_target,
    evaluate,
    inner_adapt,
    joint_loss,
    joint_loss_parts,
    meta_step,
    sample_tasks,
    train,
)
from .param_gen import (
    ConvGenSpec,
    GeneratedLayer,
    LinearGenSpec,
    apply_generated_linear,
    count_params,
    gen_conv,
    gen_linear,
)
from .params import ParamVector, load_checkpoint, save_checkpoint
from .stnn import (
    ExtractorSpec,
    ModelConfig,
    extract_features,
    init_theta,
    meta_knowledge,
    predict,
    stnn_forward,
)
from .baselines import (
    DailyProfile,
    fine_tune,
    historical_average,
    maml_preset,
    profile_predict,
    target_only,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
