from .io import decode_model, encode_model, expected_file_size, load_model, save_model
from .layers import Module
from .zoo import (
    ARCH_IDS,
    CIFAR_MEAN,
    CIFAR_STD,
    ENDPOINT_NAMES,
    LayerEndpoint,
    ModelHandle,
    ModelSpec,
    build_model,
    set_extra_layers_identity,
    to_dtype,
)


def forward_logits(model, x):
    return model.forward_logits(x)


def forward_to_endpoint(model, x, l):
    return model.forward_to_endpoint(x, l)


__all__ = [
    "ARCH_IDS", "CIFAR_MEAN", "CIFAR_STD", "ENDPOINT_NAMES", "LayerEndpoint", "ModelHandle",
    "ModelSpec", "Module", "build_model", "decode_model", "encode_model", "expected_file_size",
    "forward_logits", "forward_to_endpoint", "load_model", "save_model",
    "set_extra_layers_identity", "to_dtype",
]
