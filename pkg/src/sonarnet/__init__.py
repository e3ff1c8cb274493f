"""Numpy CNNs for small grayscale sonar-style images, with linear-SVM transfer and sweep tooling."""
from .arch import build, build_classic_cnn, build_firenet, build_tinynet, count_params
from .data import LabeledImageSet, class_split_disjoint, load_manifest, save_dataset, undersample_per_class
from .estimator import CNNClassifier, ImageResizer
from .modelio import load_model, save_model
from .rng import Rng, stable_mix
from .svm import OvoLinearSVC, train_ovo
from .synth import synth_sonar_generate
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CNNClassifier", "ImageResizer", "LabeledImageSet", "OvoLinearSVC", "Rng", "TrainConfig",
    "build", "build_classic_cnn", "build_firenet", "build_tinynet", "class_split_disjoint",
    "count_params", "load_manifest", "load_model", "save_dataset", "save_model", "stable_mix",
    "synth_sonar_generate", "train", "train_ovo", "undersample_per_class",
]
