"""Two-tower multimodal product retrieval with gated and bilinear item fusion."""

__version__ = "0.1.0"

from .data import Dataset, ItemRecord, Label, LabeledPair, QueryRecord, load_dataset, write_dataset
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    IntegrityError,
    ModalFuseError,
    NumericalError,
    StructuralError,
)
from .estimator import MultimodalFusionRetriever
from .fusion import FusionParams, Variant, fuse_item, init_params, score
from .objectives import LossConfig, three_hinge, total_loss
from .retrieval import ablate_fusions, analyze_gates, evaluate, ndcg_at_k, retrieve_topk
from .synth import SyntheticSpec, generate, preset
from .trainer import Stage, TrainConfig, load_checkpoint, run_stage2, run_stage3, save_checkpoint

__all__ = [
    "__version__", "Dataset", "ItemRecord", "Label", "LabeledPair", "QueryRecord",
    "load_dataset", "write_dataset", "ConfigError", "DomainError", "FormatError",
    "IntegrityError", "ModalFuseError", "NumericalError", "StructuralError",
    "MultimodalFusionRetriever", "FusionParams", "Variant", "fuse_item", "init_params", "score", "LossConfig",
    "three_hinge", "total_loss", "ablate_fusions", "analyze_gates", "evaluate",
    "ndcg_at_k", "retrieve_topk", "SyntheticSpec", "generate", "preset", "Stage",
    "TrainConfig", "load_checkpoint", "run_stage2", "run_stage3", "save_checkpoint",
]
