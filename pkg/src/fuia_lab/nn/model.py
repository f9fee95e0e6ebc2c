"""Small MLP / CNN classifiers over :class:`ParamVector` parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence, Union

import numpy as np

from ..errors import NonFiniteError, ShapeError, UnsupportedActivationError
from . import autodiff as ad
from .params import LayerMap, ParamVector, build_layer_map


@dataclass(frozen=True)
class Dense:
    width: int


@dataclass(frozen=True)
class Conv2d:
    channels: int
    kernel: int
    stride: int = 1


Layer = Union[Dense, Conv2d]


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    output_classes: int
    activation: str = "sigmoid"
    _plan: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.activation not in ad.ACTIVATIONS:
            raise UnsupportedActivationError(f"unknown activation {self.activation!r}")
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ShapeError("the final layer must be dense")
        if self.layers[-1].width != self.output_classes:
            raise ShapeError(
                f"final layer width {self.layers[-1].width} != output_classes {self.output_classes}"
            )
        object.__setattr__(self, "_plan", _plan_layers(self.input_shape, self.layers))

    @classmethod
    def mlp(cls, input_shape, hidden: Sequence[int], output_classes: int, activation="sigmoid"):
        layers = tuple(Dense(w) for w in hidden) + (Dense(output_classes),)
        return cls(tuple(input_shape), layers, output_classes, activation)

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def layer_map(self) -> LayerMap:
        shapes = []
        for step in self._plan:
            shapes.append((f"{step.name}.weight", step.weight_shape))
            shapes.append((f"{step.name}.bias", (step.weight_shape[0],)))
        return build_layer_map(shapes)

    @property
    def output_layer(self) -> str:
        return self._plan[-1].name

    @property
    def n_params(self) -> int:
        return sum(s.size for s in self.layer_map)


@dataclass(frozen=True)
class _Step:
    name: str
    kind: str
    weight_shape: tuple[int, ...]
    in_dims: tuple[int, ...]
    in_layout: str
    out_dims: tuple[int, ...]
    stride: int = 1


def _plan_layers(input_shape, layers) -> tuple[_Step, ...]:
    plan = []
    dims, layout = tuple(input_shape), "chw"
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv2d):
            if len(dims) != 3:
                raise ShapeError(f"layer conv{i}: convolution after a dense layer")
            c, h, w = dims
            k, s = layer.kernel, layer.stride
            if k > h or k > w or k < 1 or s < 1:
                raise ShapeError(f"layer conv{i}: kernel {k} does not fit input {h}x{w}")
            ho, wo = (h - k) // s + 1, (w - k) // s + 1
            plan.append(_Step(f"conv{i}", "conv", (layer.channels, c, k, k), dims, layout, (layer.channels, ho, wo), s))
            dims, layout = (layer.channels, ho, wo), "hwc"
        else:
            fan_in = int(np.prod(dims))
            plan.append(_Step(f"dense{i}", "dense", (layer.width, fan_in), dims, layout, (layer.width,)))
            dims, layout = (layer.width,), "flat"
    return tuple(plan)


@lru_cache(maxsize=256)
def _im2col_index(in_dims, layout, kernel, stride, batch):
    c, h, w = in_dims
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    oh, ow, ci, ki, kj = np.meshgrid(
        np.arange(ho), np.arange(wo), np.arange(c), np.arange(kernel), np.arange(kernel), indexing="ij"
    )
    row, col = oh * stride + ki, ow * stride + kj
    if layout == "chw":
        flat = ci * h * w + row * w + col
    else:
        flat = (row * w + col) * c + ci
    flat = flat.reshape(ho * wo, c * kernel * kernel)
    offsets = (np.arange(batch) * (c * h * w))[:, None, None]
    idx = flat[None, :, :] + offsets
    idx.flags.writeable = False
    return idx


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels)
        if inputs.shape[0] < 1:
            raise ShapeError("batch must contain at least one sample")
        if labels.ndim == 1 and labels.shape[0] != inputs.shape[0]:
            raise ShapeError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.inputs.shape[0]


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    arrays = {}
    for step in spec._plan:
        fan_in = int(np.prod(step.weight_shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        arrays[f"{step.name}.weight"] = rng.uniform(-bound, bound, size=step.weight_shape)
        arrays[f"{step.name}.bias"] = rng.uniform(-bound, bound, size=step.weight_shape[0])
    pv = ParamVector.from_arrays(arrays)
    assert pv.layer_map == spec.layer_map
    return pv


def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values in layer {name}")


def _param_nodes(spec: ModelSpec, params: ParamVector, make=ad.leaf):
    if params.layer_map != spec.layer_map:
        raise ShapeError("parameter layer map does not match the model spec")
    return [make(params.view(s.name)) for s in params.layer_map]


def _forward_nodes(spec: ModelSpec, nodes, x: ad.Node) -> ad.Node:
    act = ad.ACTIVATIONS[spec.activation]
    batch = x.shape[0]
    expected = spec.input_size
    if int(np.prod(x.shape[1:])) != expected:
        raise ShapeError(
            f"layer {spec._plan[0].name}: expected {expected} input values per sample, got {int(np.prod(x.shape[1:]))}"
        )
    h = ad.reshape(x, (batch, expected))
    last = len(spec._plan) - 1
    for i, step in enumerate(spec._plan):
        weight, bias = nodes[2 * i], nodes[2 * i + 1]
        if step.kind == "conv":
            k = step.weight_shape[2]
            idx = _im2col_index(step.in_dims, step.in_layout, k, step.stride, batch)
            patches = ad.take(h, idx)
            p, ckk = idx.shape[1], idx.shape[2]
            kmat = ad.reshape(weight, (step.weight_shape[0], ckk))
            z = ad.reshape(patches, (batch * p, ckk)) @ kmat.T + bias
            z = ad.reshape(z, (batch, p * step.weight_shape[0]))
        else:
            if h.shape[1] != step.weight_shape[1]:
                raise ShapeError(f"layer {step.name}: expected width {step.weight_shape[1]}, got {h.shape[1]}")
            z = h @ weight.T + bias
        _check_finite(step.name, z.value)
        h = z if i == last else act(z)
    return h


def forward(spec: ModelSpec, params: ParamVector, batch: Batch) -> np.ndarray:
    """Logits of shape ``[b, n]``."""
    with ad.no_graph():
        nodes = _param_nodes(spec, params, make=ad.const)
        return _forward_nodes(spec, nodes, ad.const(batch.inputs)).value


def _targets(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != n:
            raise ShapeError(f"soft labels have {labels.shape[1]} classes, model has {n}")
        return labels.astype(np.float64)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ShapeError(f"labels must lie in [0, {n})")
    return np.eye(n)[labels.astype(np.int64)]


def _ce_node(logits: ad.Node, labels) -> ad.Node:
    b, n = logits.shape
    onehot = ad.const(_targets(labels, n))
    return ad.neg(ad.sum_(ad.log_softmax(logits) * onehot)) * (1.0 / b)


def loss_ce(logits, labels) -> float:
    """Mean cross-entropy over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [b, n], got {logits.shape}")
    with ad.no_graph():
        return float(_ce_node(ad.const(logits), labels).value)


def batch_loss(spec: ModelSpec, params: ParamVector, batch: Batch) -> float:
    return loss_ce(forward(spec, params, batch), batch.labels)


def accuracy(spec: ModelSpec, params: ParamVector, inputs, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    logits = forward(spec, params, Batch(inputs, labels))
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def grad_params(spec: ModelSpec, params: ParamVector, batch: Batch) -> ParamVector:
    """Gradient of the mean cross-entropy with respect to the parameters."""
    nodes = _param_nodes(spec, params)
    loss = _ce_node(_forward_nodes(spec, nodes, ad.const(batch.inputs)), batch.labels)
    grads = ad.grad(loss, nodes)
    for slot, g in zip(params.layer_map, grads):
        _check_finite(slot.name, g)
    return ParamVector(np.concatenate([g.reshape(-1) for g in grads]), params.layer_map)


ObjectiveFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def value_and_input_grad(spec: ModelSpec, params: ParamVector, x, y, objective_grad_fn: ObjectiveFn):
    """Evaluate ``phi(grad_params(x, y))`` and its derivative with respect to ``x``.

    ``objective_grad_fn`` receives the flat parameter gradient and returns
    ``(phi, dphi/dgrad)``. Returns ``(phi, dphi/dx, flat_grad)``.
    """
    if spec.activation not in ad.SMOOTH_ACTIVATIONS:
        raise UnsupportedActivationError(
            f"activation {spec.activation!r} has no second derivative; use one of {sorted(ad.SMOOTH_ACTIVATIONS)}"
        )
    x = np.asarray(x, dtype=np.float64)
    xnode = ad.leaf(x)
    nodes = _param_nodes(spec, params)
    loss = _ce_node(_forward_nodes(spec, nodes, xnode), y)
    gnodes = ad.grad(loss, nodes, create_graph=True)
    flat = np.concatenate([g.value.reshape(-1) for g in gnodes])
    _check_finite("parameter gradient", flat)
    value, dflat = objective_grad_fn(flat)
    dflat = np.asarray(dflat, dtype=np.float64).reshape(-1)
    if dflat.size != flat.size:
        raise ShapeError(f"objective gradient has {dflat.size} entries, expected {flat.size}")
    if not np.any(dflat):
        return float(value), np.zeros_like(x), flat
    total = None
    for slot, g in zip(params.layer_map, gnodes):
        piece = dflat[slot.offset : slot.offset + slot.size].reshape(slot.shape)
        term = ad.sum_(g * ad.const(piece))
        total = term if total is None else total + term
    (dx,) = ad.grad(total, [xnode])
    _check_finite("input gradient", dx)
    return float(value), dx, flat


def grad_input_of_objective(spec: ModelSpec, params: ParamVector, x, y, objective_grad_fn: ObjectiveFn) -> np.ndarray:
    """Derivative with respect to ``x`` of a scalar function of the parameter gradient."""
    return value_and_input_grad(spec, params, x, y, objective_grad_fn)[1]
