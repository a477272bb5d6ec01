"""Writer-level BMI class prediction from handwritten character crops.

A numpy convolutional network, an image pipeline for scanned forms, offline
augmentation, manifest handling and an ablation harness.
"""

from .dataset import Manifest, build_manifest, load_manifest, split
from .estimator import CharPreprocessor, CNNClassifier
from .model import ModelConfig, Network, ablation_presets, build_model, preset
from .tensor import RngStream
from .training import DataSplits, TrainConfig, TrainReport, train
from .weights import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "CNNClassifier", "CharPreprocessor", "DataSplits", "Manifest", "ModelConfig", "Network", "RngStream",
    "TrainConfig", "TrainReport", "build_manifest", "build_model", "load_manifest", "load_weights", "preset",
    "save_weights", "split", "ablation_presets", "train",
]
