"""natiqa: human-aligned no-reference naturalness assessment toolkit."""

from .aggregation import (
    RaterLog,
    compute_mos,
    compute_rating_distribution,
    gaze_centralization,
    gaze_focus,
    quality_control,
    saliency_from_fixations,
)
from .data import (
    DatasetManifest,
    FixationRecord,
    ManifestEntry,
    RatedSample,
    RatingDistribution,
    SaliencyMap,
    load_manifest,
    make_split,
    save_manifest,
    validate_sample,
)
from .losses import LossWeights, apa_loss, mse_loss, rpa_loss, smooth_distribution, total_loss
from .metrics import (
    MetricsReport,
    attention_similarity,
    evaluate,
    plcc,
    psnr,
    srocc,
    ssim,
    summarize,
)
from .model import (
    AttentionMap,
    DPAModel,
    ModelConfig,
    PrototypeBank,
    assess,
    corrected_attention,
    gradcam,
    load_checkpoint,
    predicted_mos,
    rating_likelihood,
    save_checkpoint,
)
from .stats import (
    FactorReport,
    factor_report,
    independent_t_test,
    mann_whitney_u,
    one_way_anova,
    tukey_hsd,
)
from .synthetic import SynthConfig, generate, oracle_score, read_oracle
from .training import TrainConfig, TrainResult, model_scorer, resume, train

__version__ = "0.1.0"
