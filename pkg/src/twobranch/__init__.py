"""Two-branch networks for image-text matching: embedding and similarity networks,
triplet mining, training and Recall@K evaluation on precomputed features."""

from .branches import EmbeddingModel, ModelDims, SimilarityModel, init_model
from .dataset import GroundedDataset
from .evaluation import RecallReport, recall_at_k
from .geometry import Box, RegionLabeling, iou
from .losses import LossWeights, TripletSet
from .optim import SamplingOptions, TrainSchedule, train

__all__ = [
    "Box",
    "EmbeddingModel",
    "GroundedDataset",
    "LossWeights",
    "ModelDims",
    "RecallReport",
    "RegionLabeling",
    "SamplingOptions",
    "SimilarityModel",
    "TrainSchedule",
    "TripletSet",
    "init_model",
    "iou",
    "recall_at_k",
    "train",
]
