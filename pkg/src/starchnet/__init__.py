"""Starch microscopy image classification: autograd, ResNet-18, training and metrics."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .metrics import ConfusionMatrix, classification_report, confusion_matrix, per_class_metrics, report
from .models import ModelSpec, build_resnet18, count_params, load_backbone
from .tensor import Tensor, no_grad
from .train import Adam, EarlyStopping, TrainConfig, train

__version__ = "0.1.0"
