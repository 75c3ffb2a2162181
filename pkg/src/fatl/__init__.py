"""Feature-aligned transfer learning for logistic risk models.

Source models trained at different sites, over different feature subsets,
are aligned to one canonical feature registry, masked by a
literature-derived importance filter and combined into the initialization
of a target model, which is then fine-tuned on a few labeled target
records.
"""

from .cohort import Cohort, PopulationSpec, generate_cohort, shift_population
from .evaluation import EvalReport, auroc, brier, compare_conditions, confusion_at
from .importance import FeatureFilter, ImportanceProfile, binarize, compute_filter
from .models import AlignedModel, ModelMeta, SourceModel, align, load_model, save_model
from .pipeline import PipelineConfig, demo_config_path, load_config, run_pipeline
from .registry import (
    CanonicalRecord,
    FeatureDescriptor,
    FeatureRegistry,
    HarmonizationRule,
    build_registry,
    default_registry,
    harmonize_record,
    impute,
)
from .trainer import TrainConfig, loss_and_gradient, predict_proba, train_logistic
from .transfer import TransferConfig, compute_alphas, fatl_init, weight_transfer

__version__ = "0.1.0"
