"""Influence-function feedback toolkit.

Training-data attribution over an L2-regularized softmax classifier,
top-K influencer voting for label repair, and an iterative
harmful-influence triage loop that minimizes human re-annotation.
"""

from .corpus import (
    Corpus,
    Instance,
    SplitSpec,
    SynthConfig,
    inject_label_noise,
    load_corpus,
    make_splits,
    oversample,
    restore_gold,
    save_corpus,
    synth_corpus,
)
from .errors import (
    ApproximationError,
    CapacityError,
    FormatError,
    InfFeedError,
    TrainingError,
    ValidationError,
)
from .feedback import (
    PipelineReport,
    RelabelOutcome,
    VoteConfig,
    run_random_flip_ablation,
    run_system1,
    run_system2,
    run_vanilla_finetune_ablation,
    vote,
)
from .influence import (
    CgConfig,
    IhvpConfig,
    InfluenceRecord,
    InfluenceScorer,
    LissaConfig,
    PrefilterConfig,
    ihvp,
    influence_score,
    loo_oracle,
    prefilter_candidates,
    suggest_lissa_scale,
    top_influencers,
)
from .metrics import EvalResult, SignificanceResult, evaluate, paired_significance
from .model import (
    ModelParams,
    TrainConfig,
    fine_tune,
    flatten,
    grad,
    hessian,
    hvp,
    loss,
    predict,
    predict_proba,
    train,
    unflatten,
)
from .triage import (
    AnnotationDecision,
    AnnotationRequest,
    TriageConfig,
    TriageReport,
    TriageSession,
    flag_harmful,
    oracle_annotator,
    run_triage_loop,
    silver_label,
)

__version__ = "0.1.0"
