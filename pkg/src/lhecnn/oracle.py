"""Plaintext reference pipeline: forward, backprop, finite differences, SGD.

Ground truth for every equivalence test. Written for obviousness, not speed:
explicit window loops, no stride tricks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import ModelConfig


@dataclass
class PlainModel:
    """Unencrypted parameters: conv filter tensors (filters, channels, k, k)
    and dense matrices (out, in)."""

    conv: list = field(default_factory=list)
    fc: list = field(default_factory=list)

    def copy(self) -> "PlainModel":
        return PlainModel(conv=[f.copy() for f in self.conv],
                          fc=[m.copy() for m in self.fc])


def zero_model(config: ModelConfig) -> PlainModel:
    conv = [np.zeros((c.filters, c.channels, c.kernel, c.kernel))
            for c in config.conv]
    fc = [np.zeros((f.out_neurons, f.in_neurons)) for f in config.fc]
    return PlainModel(conv=conv, fc=fc)


def random_model(config: ModelConfig, rng: np.random.Generator) -> PlainModel:
    conv = [rng.uniform(-1.0, 1.0, (c.filters, c.channels, c.kernel, c.kernel))
            for c in config.conv]
    fc = [rng.uniform(-1.0, 1.0, (f.out_neurons, f.in_neurons)) for f in config.fc]
    return PlainModel(conv=conv, fc=fc)


def _check_shapes(model: PlainModel, config: ModelConfig) -> None:
    if len(model.conv) != len(config.conv) or len(model.fc) != len(config.fc):
        raise ValidationError("model tensors do not match the configuration")
    for l, (f, c) in enumerate(zip(model.conv, config.conv)):
        if f.shape != (c.filters, c.channels, c.kernel, c.kernel):
            raise ValidationError(f"conv layer {l + 1} filter shape mismatch: {f.shape}")
    for l, (m, c) in enumerate(zip(model.fc, config.fc)):
        if m.shape != (c.out_neurons, c.in_neurons):
            raise ValidationError(f"fc layer {l + 1} weight shape mismatch: {m.shape}")


def conv_valid(x: np.ndarray, filters: np.ndarray, stride: int) -> np.ndarray:
    """Strided valid convolution; x is (n, channels, s, s)."""
    n, _, s, _ = x.shape
    eps, _, k, _ = filters.shape
    out_side = (s - k) // stride + 1
    out = np.zeros((n, eps, out_side, out_side))
    for p in range(out_side):
        for q in range(out_side):
            patch = x[:, :, p * stride:p * stride + k, q * stride:q * stride + k]
            out[:, :, p, q] = np.einsum("tixy,kixy->tk", patch, filters)
    return out


@dataclass
class ForwardTrace:
    conv_inputs: list
    conv_pre: list
    fc_inputs: list
    fc_pre: list
    logits: np.ndarray


def plain_forward(model: PlainModel, config: ModelConfig, batch,
                  activations: bool = True) -> ForwardTrace:
    """Forward pass retaining every layer's input and pre-activation output.

    Square activations after each layer except the last dense layer (unless
    the configuration enables a final activation); ``activations=False``
    disables them everywhere.
    """
    _check_shapes(model, config)
    x = np.asarray(batch, dtype=np.float64)
    channels = config.conv[0].channels if config.conv else 1
    if x.shape != (config.n, channels, config.input_side, config.input_side):
        raise ValidationError(f"batch shape {x.shape} does not match the config")
    conv_inputs, conv_pre = [], []
    for l, filt in enumerate(model.conv):
        conv_inputs.append(x)
        pre = conv_valid(x, filt, config.conv[l].stride)
        conv_pre.append(pre)
        x = pre ** 2 if activations else pre
    flat = x.reshape(config.n, -1)
    fc_inputs, fc_pre = [], []
    for l, M in enumerate(model.fc):
        if flat.shape[1] != M.shape[1]:
            raise ValidationError(
                f"fc layer {l + 1} expects {M.shape[1]} inputs, got {flat.shape[1]}"
            )
        fc_inputs.append(flat)
        pre = flat @ M.T
        fc_pre.append(pre)
        final = l == len(model.fc) - 1
        square = activations and (not final or config.final_activation)
        flat = pre ** 2 if square else pre
    return ForwardTrace(conv_inputs, conv_pre, fc_inputs, fc_pre, flat)


def mse_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ValidationError(
            f"labels must have shape {logits.shape}, got {labels.shape}"
        )
    n = logits.shape[0]
    return float(((logits - labels) ** 2).sum() / n)


@dataclass
class Gradients:
    conv: list
    fc: list
    inputs: np.ndarray
    loss: float


def plain_backward(model: PlainModel, config: ModelConfig, batch, labels,
                   activations: bool = True) -> Gradients:
    """Backprop of the mean-squared-error loss averaged over the n inputs."""
    trace = plain_forward(model, config, batch, activations)
    labels = np.asarray(labels, dtype=np.float64)
    n = config.n
    loss = mse_loss(trace.logits, labels)
    grad = 2.0 * (trace.logits - labels) / n

    fc_grads: list = [None] * len(model.fc)
    for l in range(len(model.fc) - 1, -1, -1):
        final = l == len(model.fc) - 1
        square = activations and (not final or config.final_activation)
        if square:
            grad = 2.0 * trace.fc_pre[l] * grad
        fc_grads[l] = grad.T @ trace.fc_inputs[l]
        grad = grad @ model.fc[l]

    conv_grads: list = [None] * len(model.conv)
    if model.conv:
        grad = grad.reshape(trace.conv_pre[-1].shape)
        for l in range(len(model.conv) - 1, -1, -1):
            if activations:
                grad = 2.0 * trace.conv_pre[l] * grad
            filt = model.conv[l]
            stride = config.conv[l].stride
            x = trace.conv_inputs[l]
            k = filt.shape[2]
            out_side = grad.shape[2]
            df = np.zeros_like(filt)
            dx = np.zeros_like(x)
            for p in range(out_side):
                for q in range(out_side):
                    patch = x[:, :, p * stride:p * stride + k, q * stride:q * stride + k]
                    g = grad[:, :, p, q]
                    df += np.einsum("tk,tixy->kixy", g, patch)
                    dx[:, :, p * stride:p * stride + k, q * stride:q * stride + k] += (
                        np.einsum("tk,kixy->tixy", g, filt))
            conv_grads[l] = df
            grad = dx
        inputs_grad = grad
    else:
        inputs_grad = grad.reshape(n, 1, config.input_side, config.input_side)
    return Gradients(conv=conv_grads, fc=fc_grads, inputs=inputs_grad, loss=loss)


def finite_diff_grad(model: PlainModel, config: ModelConfig, batch, labels,
                     eps: float = 1e-5, activations: bool = True) -> Gradients:
    """Central differences of the loss over every weight."""
    if eps <= 0:
        raise ValidationError("finite-difference step must be positive")

    def loss_of(m: PlainModel) -> float:
        return mse_loss(plain_forward(m, config, batch, activations).logits, labels)

    work = model.copy()
    conv_grads = []
    for tensor in work.conv:
        g = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            orig = tensor[idx]
            tensor[idx] = orig + eps
            hi = loss_of(work)
            tensor[idx] = orig - eps
            lo = loss_of(work)
            tensor[idx] = orig
            g[idx] = (hi - lo) / (2 * eps)
        conv_grads.append(g)
    fc_grads = []
    for tensor in work.fc:
        g = np.zeros_like(tensor)
        for idx in np.ndindex(tensor.shape):
            orig = tensor[idx]
            tensor[idx] = orig + eps
            hi = loss_of(work)
            tensor[idx] = orig - eps
            lo = loss_of(work)
            tensor[idx] = orig
            g[idx] = (hi - lo) / (2 * eps)
        fc_grads.append(g)
    loss = loss_of(model)
    n = config.n
    channels = config.conv[0].channels if config.conv else 1
    return Gradients(conv=conv_grads, fc=fc_grads,
                     inputs=np.zeros((n, channels, config.input_side,
                                      config.input_side)),
                     loss=loss)


def plain_sgd_step(model: PlainModel, config: ModelConfig, batch, labels,
                   eta: float, activations: bool = True) -> PlainModel:
    grads = plain_backward(model, config, batch, labels, activations)
    out = model.copy()
    for tensor, g in zip(out.conv, grads.conv):
        tensor -= eta * g
    for tensor, g in zip(out.fc, grads.fc):
        tensor -= eta * g
    return out
