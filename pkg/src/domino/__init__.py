"""Domain-aware fine-tuning for dense prediction at desk scale."""

from .adaptive_norm import DominoLayer, apply_domino, combine_prompt, standardize
from .config import ExperimentConfig, load_config, variant_overrides
from .domain_embedding import DEFAULT_CATALOG, DomainDescription, DomainEmbedder, StatisticalEncoder, extract_domain_embedding
from .evaluation import ConfusionMatrix, evaluate_dataset, miou_percent
from .model import SegmentationModel, build_model
from .training import train_loop

__version__ = "0.1.0"
