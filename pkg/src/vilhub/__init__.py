"""Vision-language supervision of per-point 3D features with the VilHub
class-preference regularizer, on synthetic long-tail part/material data."""

from .data import (Dataset, GeneratorConfig, LabeledShape, LabelVocabulary, PointCloud,
                   generate_synthetic_dataset, load_dataset, pack_mask_pixel, save_dataset,
                   split_dataset, unpack_mask_pixel)
from .embed import EmbeddingTable, load_embeddings, save_embeddings, synth_embeddings
from .encoder import (EncoderDims, EncoderOutput, EncoderParams, backward, forward,
                      init_params, load_checkpoint, save_checkpoint)
from .losses import (LossBreakdown, LossConfig, class_preference, loss_and_grad, total_loss,
                     vilhub_loss, vl_loss)
from .metrics import ConfusionAccumulator, ShapePrediction, gcr_evaluate, miou
from .retrieval import (Caption, ColorMap, RetrievalGallery, embed_caption, embed_shape,
                        generate_caption, recall_at_k, retrieve)
from .trainer import TrainConfig, TrainHistory, ablate_gamma, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "GeneratorConfig", "LabeledShape", "LabelVocabulary", "PointCloud",
    "generate_synthetic_dataset", "load_dataset", "pack_mask_pixel", "save_dataset",
    "split_dataset", "unpack_mask_pixel", "EmbeddingTable", "load_embeddings",
    "save_embeddings", "synth_embeddings", "EncoderDims", "EncoderOutput", "EncoderParams",
    "backward", "forward", "init_params", "load_checkpoint", "save_checkpoint",
    "LossBreakdown", "LossConfig", "class_preference", "loss_and_grad", "total_loss",
    "vilhub_loss", "vl_loss", "ConfusionAccumulator", "ShapePrediction", "gcr_evaluate",
    "miou", "Caption", "ColorMap", "RetrievalGallery", "embed_caption", "embed_shape",
    "generate_caption", "recall_at_k", "retrieve", "TrainConfig", "TrainHistory",
    "ablate_gamma", "train",
]
