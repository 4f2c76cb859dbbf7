"""Ready-made model specs used by the CLI, examples and tests."""
from __future__ import annotations

from ..network import LayerSpec, ModelSpec
from .data import CIFAR_CLASSES, CIFAR_SHAPE


def cifar_quick(channels: int = 8) -> ModelSpec:
    """Two small conv blocks and one FC classifier for 3x32x32 images."""
    return ModelSpec(
        CIFAR_SHAPE,
        CIFAR_CLASSES,
        [
            LayerSpec.conv(channels, 5, pad=2),
            LayerSpec.relu(),
            LayerSpec.maxpool(2),
            LayerSpec.conv(channels, 5, pad=2),
            LayerSpec.relu(),
            LayerSpec.maxpool(2),
            LayerSpec.fc(CIFAR_CLASSES),
            LayerSpec.softmax_loss(),
        ],
    )


def deep_fc(widths, input_dim: int, classes: int) -> ModelSpec:
    """FC stack with ReLU between layers; the last width must equal ``classes``."""
    layers = []
    for i, w in enumerate(widths):
        layers.append(LayerSpec.fc(w))
        if i < len(widths) - 1:
            layers.append(LayerSpec.relu())
    layers.append(LayerSpec.softmax_loss())
    return ModelSpec((input_dim,), classes, layers)


def skewed_fc8(input_dim: int = 12, classes: int = 4, width: int = 12, wide: int = 480) -> ModelSpec:
    """Eight FC layers; with the defaults the top two hold about 90% of the parameters."""
    return deep_fc([width] * 6 + [wide, classes], input_dim, classes)


def linear(input_dim: int, classes: int) -> ModelSpec:
    return ModelSpec((input_dim,), classes, [LayerSpec.fc(classes), LayerSpec.softmax_loss()])


PRESETS = {"cifar-quick": cifar_quick, "skewed-fc8": skewed_fc8}
