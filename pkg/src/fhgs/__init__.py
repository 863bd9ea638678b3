"""CPU planar gaussian splatting with a frozen-feature dual-drive loss."""

from .dual_drive import LossBundle, SimilarityActivation, polarity
from .rasterizer import RenderOptions, bin_and_sort, render
from .scene import Camera, FeatureMap, GaussianScene, Primitive, SceneInit, decode_frame
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Camera", "FeatureMap", "GaussianScene", "LossBundle", "Primitive",
    "RenderOptions", "SceneInit", "SimilarityActivation", "TrainConfig",
    "bin_and_sort", "decode_frame", "polarity", "render", "train",
]
