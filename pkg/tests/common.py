"""Common test utils"""
import inspect

import numpy as np
from groupkan.tensor import Tape, Tensor


def collect_existing_subclasses(module, base_class):
    """Collect a set of class names in module that are subclasses of base_class"""
    class_tuples = inspect.getmembers(module, inspect.isclass)
    return set(
        [
            class_tuple[0]
            for class_tuple in class_tuples
            if issubclass(class_tuple[1], base_class)
        ]
    )


def random_tensor(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def numeric_gradient(fn, tensor, step=1e-5):
    """Central-difference gradient of the scalar fn() w.r.t. every entry of tensor"""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + step
        plus = fn().item()
        flat[index] = original - step
        minus = fn().item()
        flat[index] = original
        grad.reshape(-1)[index] = (plus - minus) / (2 * step)
    return grad


def tape_gradient(fn, *tensors):
    """Gradients of the scalar fn() recorded on a fresh tape"""
    for tensor in tensors:
        tensor.zero_grad()
    with Tape():
        loss = fn()
    loss.backward()
    return [tensor.grad for tensor in tensors]


def max_relative_error(analytic, numeric, floor=1e-3):
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denominator))
