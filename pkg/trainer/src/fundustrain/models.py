"""Model construction for the architecture zoo and the toy networks."""

from __future__ import annotations

import torch.nn as nn
import torchvision.models as tvm

from .errors import ConfigError

_TORCHVISION_BUILDERS = {
    "resnet18": tvm.resnet18,
    "resnet34": tvm.resnet34,
    "resnet50": tvm.resnet50,
    "resnet101": tvm.resnet101,
    "resnet152": tvm.resnet152,
    "densenet121": tvm.densenet121,
    "densenet161": tvm.densenet161,
    "densenet169": tvm.densenet169,
    "densenet201": tvm.densenet201,
}

_PRETRAINED_WEIGHTS = {
    "resnet18": "IMAGENET1K_V1",
    "resnet34": "IMAGENET1K_V1",
    "resnet50": "IMAGENET1K_V1",
    "resnet101": "IMAGENET1K_V1",
    "resnet152": "IMAGENET1K_V1",
    "densenet121": "IMAGENET1K_V1",
    "densenet161": "IMAGENET1K_V1",
    "densenet169": "IMAGENET1K_V1",
    "densenet201": "IMAGENET1K_V1",
}


def _toy_linear(num_classes: int) -> nn.Module:
    return nn.Sequential(nn.Flatten(), nn.Linear(3 * 224 * 224, num_classes))


def _toy_tinycnn(num_classes: int) -> nn.Module:
    # global average pooling keeps the exported graph inside the grading
    # engine's operator set
    return nn.Sequential(
        nn.Conv2d(3, 8, kernel_size=3, stride=2, padding=1),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(8, num_classes),
    )


def build_model(architecture: str, num_classes: int, pretrained: bool = False) -> nn.Module:
    """Build a classifier with a ``num_classes``-way head, untrained by default."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be at least 2, got {num_classes}")
    if architecture == "linear":
        return _toy_linear(num_classes)
    if architecture == "tinycnn":
        return _toy_tinycnn(num_classes)
    builder = _TORCHVISION_BUILDERS.get(architecture)
    if builder is None:
        raise ConfigError(f"unknown architecture '{architecture}'")
    if not pretrained:
        return builder(weights=None, num_classes=num_classes)
    # pretrained heads are 1000-way; swap in the task's head after loading
    model = builder(weights=_PRETRAINED_WEIGHTS[architecture])
    if architecture.startswith("resnet"):
        model.fc = nn.Linear(model.fc.in_features, num_classes)
    else:
        model.classifier = nn.Linear(model.classifier.in_features, num_classes)
    return model
