"""Brain-MRI tumor classification from fused convolutional features.

The pipeline: scanner exports are cropped to the skull region, contrast
equalized, and resized; two frozen convolutional backbones (a deep residual
net and a multi-tap VGG-style net with non-local context blocks) produce
feature maps that are fused under dual channel/spatial attention into a
128-d embedding; a gradient-boosted-tree head classifies the embedding.
Weights compress to 8-bit for distribution, and Grad-CAM renders the
evidence behind each prediction.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Preprocessor": "neurofuse.preprocess",
    "FusionImageClassifier": "neurofuse.training",
    "GradientBoostedTreesClassifier": "neurofuse.gbdt",
}

__all__ = [*_EXPORTS, "__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        return getattr(importlib.import_module(_EXPORTS[name]), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
