"""Binary convolutional networks with a Shannon-entropy capacity penalty."""
from .autodiff import Tensor, backward, no_grad
from .entropy import EntropyConfig, filter_entropy, filter_stats, mean_entropy, penalized_loss
from .estimator import BinaryNetClassifier
from .models import ModelConfig, build_lenet_binary, build_model, build_preact_resnet18, memory_report
from .quant import QuantConfig, binarize, quantize_activation, tanh_surrogate

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad", "EntropyConfig", "filter_entropy", "filter_stats",
    "mean_entropy", "penalized_loss", "BinaryNetClassifier", "ModelConfig",
    "build_lenet_binary", "build_model", "build_preact_resnet18", "memory_report",
    "QuantConfig", "binarize", "quantize_activation", "tanh_surrogate",
]
