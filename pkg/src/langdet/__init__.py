"""Multi-dataset detection with language-embedding category extraction,
class-grouped bipartite matching and a binary matchability head."""
from .cem import CemParams, cem_backward, cem_forward, topk_select, training_category_set
from .geometry import Box, MatchWeights, box_cost, giou, iou
from .head import Detection, HeadParams, detect, detect_with_categories
from .labelspace import EmbeddingTable, LabelSpace, load_embeddings, save_embeddings
from .losses import AslConfig, FocalConfig, asymmetric_loss, binary_focal
from .matching import BACKEND, hungarian, match_group, match_standard, training_loss
from .model import Model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AslConfig", "BACKEND", "Box", "CemParams", "Detection", "EmbeddingTable", "FocalConfig",
    "HeadParams", "LabelSpace", "MatchWeights", "Model", "asymmetric_loss", "binary_focal",
    "box_cost", "cem_backward", "cem_forward", "detect", "detect_with_categories", "giou",
    "hungarian", "iou", "load_checkpoint", "load_embeddings", "match_group", "match_standard",
    "save_checkpoint", "save_embeddings", "topk_select", "training_category_set",
    "training_loss",
]
