"""Student network and its configuration."""
from .config import PROFILES, ModelConfig
from .layers import Module, initialize
from .network import (Backbone, Classifier, ClassificationHead, ConceptExtractor, PatchTokenizer,
                      PretrainModel, Projection, ReconHead, SegmentationHead, Segmenter,
                      distill_loss, mask_and_reconstruct, random_mask)

__all__ = ["ModelConfig", "PROFILES", "Module", "initialize", "Backbone", "Classifier",
           "ClassificationHead", "ConceptExtractor", "PatchTokenizer", "PretrainModel",
           "Projection", "ReconHead", "SegmentationHead", "Segmenter", "distill_loss",
           "mask_and_reconstruct", "random_mask"]
