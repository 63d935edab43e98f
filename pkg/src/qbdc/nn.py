"""A small fixed-layer CNN engine: forward, backward, loss, prediction.

Layers are Conv (valid, stride 1), MaxPool (non-overlapping), Dense, ReLU and
a final Softmax. Image batches are NCHW; Dense layers flatten their input.
Parameterized layers are Conv and Dense; their order defines the parameter
list ``[W0, b0, W1, b1, ...]`` and the depth ``M``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    pass


@dataclass(frozen=True)
class Conv(LayerSpec):
    filters: int
    kh: int = 3
    kw: int = 3

    def __post_init__(self):
        if min(self.filters, self.kh, self.kw) < 1:
            raise ValueError(f"Conv sizes must be positive, got {self}")


@dataclass(frozen=True)
class MaxPool(LayerSpec):
    size: int = 2

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"MaxPool size must be positive, got {self.size}")


@dataclass(frozen=True)
class Dense(LayerSpec):
    units: int

    def __post_init__(self):
        if self.units < 1:
            raise ValueError(f"Dense width must be positive, got {self.units}")


@dataclass(frozen=True)
class ReLU(LayerSpec):
    pass


@dataclass(frozen=True)
class Softmax(LayerSpec):
    pass


PARAMETERIZED = (Conv, Dense)


def parse_architecture(text: str, classes: int) -> list[LayerSpec]:
    """Parse a compact layer string such as ``"c20-p2-c40-p2-d100-d100"``.

    ``cN`` is an N-filter 3x3 convolution (``cNxK`` for a KxK kernel) followed
    by ReLU, ``pS`` an SxS max pool, ``dN`` an N-unit dense layer followed by
    ReLU. The classifier ``Dense(classes)`` and ``Softmax`` are appended.
    """
    layers: list[LayerSpec] = []
    for tok in filter(None, (t.strip() for t in text.split("-"))):
        kind, rest = tok[0].lower(), tok[1:]
        try:
            if kind == "c":
                n, _, k = rest.partition("x")
                k = int(k) if k else 3
                layers += [Conv(int(n), k, k), ReLU()]
            elif kind == "p":
                layers.append(MaxPool(int(rest)))
            elif kind == "d":
                layers += [Dense(int(rest)), ReLU()]
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"bad layer token {tok!r} in architecture {text!r}") from None
    return layers + [Dense(classes), Softmax()]


def mnist_layers(classes: int = 10) -> list[LayerSpec]:
    return parse_architecture("c20-p2-c40-p2-d100-d100", classes)


def _out_shape(spec: LayerSpec, shape: tuple, pos: int) -> tuple:
    if isinstance(spec, Conv):
        if len(shape) != 3:
            raise ShapeError(f"layer {pos} (Conv) needs a (C, H, W) input, got {shape}")
        c, h, w = shape
        if h < spec.kh or w < spec.kw:
            raise ShapeError(f"layer {pos} (Conv {spec.kh}x{spec.kw}) input {shape} too small")
        return (spec.filters, h - spec.kh + 1, w - spec.kw + 1)
    if isinstance(spec, MaxPool):
        if len(shape) != 3:
            raise ShapeError(f"layer {pos} (MaxPool) needs a (C, H, W) input, got {shape}")
        c, h, w = shape
        if h < spec.size or w < spec.size:
            raise ShapeError(f"layer {pos} (MaxPool {spec.size}) input {shape} too small")
        return (c, h // spec.size, w // spec.size)
    if isinstance(spec, Dense):
        return (spec.units,)
    return shape


def _infer_shapes(layers, input_shape) -> list[tuple]:
    shapes = [input_shape]
    for pos, spec in enumerate(layers):
        shapes.append(_out_shape(spec, shapes[-1], pos))
    return shapes


class Network:
    """Layer stack plus parameters. ``params`` is the flat ``[W0, b0, ...]`` list."""

    def __init__(self, layers, input_shape, params):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        for pos, spec in enumerate(self.layers):
            if isinstance(spec, Softmax) and pos != len(self.layers) - 1:
                raise ValueError(f"Softmax must be the final layer (found at layer {pos})")
        if not any(isinstance(s, PARAMETERIZED) for s in self.layers):
            raise ValueError("network has no parameterized layer")
        self.shapes = _infer_shapes(self.layers, self.input_shape)
        self.param_layers = [i for i, s in enumerate(self.layers) if isinstance(s, PARAMETERIZED)]
        if len(self.shapes[-1]) != 1:
            raise ShapeError(f"network output must be a vector, got {self.shapes[-1]}")
        self.params = list(params)
        expected = self.param_shapes()
        if len(self.params) != len(expected):
            raise ShapeError(f"expected {len(expected)} parameter tensors, got {len(self.params)}")
        for k, (p, s) in enumerate(zip(self.params, expected)):
            if p.shape != s:
                raise ShapeError(f"parameter {k} (layer {self.param_layers[k // 2]}) has shape "
                                 f"{p.shape}, expected {s}")

    @classmethod
    def build(cls, layers, input_shape, rng, dtype=np.float32) -> "Network":
        """Glorot-uniform weights, zero biases."""
        layers = list(layers)
        shapes = _infer_shapes(layers, tuple(input_shape))
        params = []
        for pos, spec in enumerate(layers):
            if isinstance(spec, Conv):
                c = shapes[pos][0]
                fan_in, fan_out = c * spec.kh * spec.kw, spec.filters * spec.kh * spec.kw
                wshape = (spec.filters, c, spec.kh, spec.kw)
                bshape = (spec.filters,)
            elif isinstance(spec, Dense):
                fan_in, fan_out = math.prod(shapes[pos]), spec.units
                wshape, bshape = (fan_in, spec.units), (spec.units,)
            else:
                continue
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-limit, limit, size=wshape).astype(dtype))
            params.append(np.zeros(bshape, dtype=dtype))
        return cls(layers, input_shape, params)

    def param_shapes(self) -> list[tuple]:
        out = []
        for pos in self.param_layers:
            spec, (c, *_) = self.layers[pos], self.shapes[pos]
            if isinstance(spec, Conv):
                out += [(spec.filters, c, spec.kh, spec.kw), (spec.filters,)]
            else:
                out += [(math.prod(self.shapes[pos]), spec.units), (spec.units,)]
        return out

    @property
    def depth(self) -> int:
        return len(self.param_layers)

    @property
    def classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def dtype(self):
        return self.params[0].dtype

    def hidden_widths(self) -> list[int]:
        """Output width (filters or units) of every parameterized layer but the last."""
        return [self.shapes[pos + 1][0] for pos in self.param_layers[:-1]]

    def last_layer(self) -> tuple[np.ndarray, np.ndarray]:
        return self.params[-2], self.params[-1]

    def with_last_layer(self, weight, bias) -> "Network":
        """A network sharing every parameter array except the last layer's."""
        return Network(self.layers, self.input_shape, self.params[:-2] + [weight, bias])

    def copy(self) -> "Network":
        return Network(self.layers, self.input_shape, [p.copy() for p in self.params])

    def astype(self, dtype) -> "Network":
        return Network(self.layers, self.input_shape, [p.astype(dtype) for p in self.params])


@dataclass
class ForwardTrace:
    """Per-layer inputs and caches from one forward pass."""
    inputs: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    multipliers: dict = field(default_factory=dict)
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    net_id: int = 0
    batch_shape: tuple = ()


@dataclass
class Gradients:
    params: list
    input: np.ndarray | None = None


def as_batch(net: Network, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=net.dtype)
    if x.shape[1:] == net.input_shape:
        return x
    if x.ndim >= 1 and math.prod(x.shape[1:]) == math.prod(net.input_shape) and x.size:
        return x.reshape((x.shape[0],) + net.input_shape)
    raise ShapeError(f"layer 0: batch shape {x.shape} does not match network input {net.input_shape}")


def _mask_multipliers(net: Network, mask, dropout, rng, n):
    """Per hidden parameterized layer, an array broadcastable onto that layer's output."""
    mults = {}
    if mask is not None:
        widths = net.hidden_widths()
        for k, keep in mask.keep.items():
            if k >= len(widths):
                raise ShapeError(f"mask targets parameterized layer {k} "
                                 f"(layer {net.param_layers[k]}), which is the output layer")
            if keep.shape != (widths[k],):
                raise ShapeError(f"mask for layer {net.param_layers[k]} has {keep.shape[0]} "
                                 f"entries, layer width is {widths[k]}")
            scale = keep.astype(net.dtype) / net.dtype.type(1.0 - mask.p)
            ndim = len(net.shapes[net.param_layers[k] + 1])
            mults[k] = scale.reshape((1, -1) + (1,) * (ndim - 1))
    if dropout:
        for k, pos in enumerate(net.param_layers[:-1]):
            shape = (n,) + net.shapes[pos + 1]
            drop = (rng.random(shape) >= dropout).astype(net.dtype)
            drop /= net.dtype.type(1.0 - dropout)
            mults[k] = mults[k] * drop if k in mults else drop
    return mults


def forward(net: Network, batch, mask=None, *, dropout: float = 0.0, rng=None):
    """Run the network. Returns ``(logits, trace)``.

    ``mask`` is a batchwise :class:`qbdc.committee.DropoutMask` (one keep flag
    per filter/unit, shared by the batch). ``dropout`` applies standard
    per-sample unit dropout (training only; needs ``rng``). Both rescale kept
    units by ``1/(1-p)``.
    """
    x = as_batch(net, batch)
    mults = _mask_multipliers(net, mask, dropout, rng, x.shape[0])
    trace = ForwardTrace(multipliers=mults, net_id=id(net), batch_shape=x.shape)
    pi = 0
    for pos, spec in enumerate(net.layers):
        trace.inputs.append(x)
        cache = None
        if isinstance(spec, Conv):
            w, b = net.params[2 * pi], net.params[2 * pi + 1]
            n, _, h, wd = x.shape
            oh, ow = h - spec.kh + 1, wd - spec.kw + 1
            cols = kernels.im2col(x, spec.kh, spec.kw)
            out = cols @ w.reshape(spec.filters, -1).T + b
            x = out.reshape(n, oh, ow, spec.filters).transpose(0, 3, 1, 2)
            cache = cols
        elif isinstance(spec, Dense):
            w, b = net.params[2 * pi], net.params[2 * pi + 1]
            x = x.reshape(x.shape[0], -1) @ w + b
        elif isinstance(spec, MaxPool):
            x, cache = kernels.maxpool_forward(x, spec.size)
        elif isinstance(spec, ReLU):
            x = np.maximum(x, 0)
        elif isinstance(spec, Softmax):
            trace.logits = x
            trace.probs = softmax(x)
        if isinstance(spec, PARAMETERIZED):
            if pi in mults:
                x = x * mults[pi]
            pi += 1
        trace.caches.append(cache)
    if trace.logits is None:
        trace.logits = x
        trace.probs = softmax(x)
    return trace.logits, trace


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets) -> float:
    """Mean of ``-log softmax(logits)[y]`` over the batch."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.shape[0] == 0:
        raise ValueError("empty batch")
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"{targets.shape[0]} targets for {logits.shape[0]} samples")
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logz - z[np.arange(len(targets)), targets]))


def backward(net: Network, trace: ForwardTrace, targets, want_input_grad: bool = False,
             first_param: int = 0) -> Gradients:
    """Gradients of the mean cross-entropy of ``trace`` w.r.t. every parameter.

    Layers below parameterized layer ``first_param`` are not differentiated
    (their gradients are ``None``) unless the input gradient is requested.
    """
    targets = np.asarray(targets)
    if trace.net_id != id(net) or len(trace.inputs) != len(net.layers):
        raise ValueError("trace was not produced by a forward pass of this network")
    n = trace.logits.shape[0]
    if targets.shape != (n,):
        raise ShapeError(f"{targets.shape} targets for a batch of {n}")
    grad = trace.probs.copy()
    grad[np.arange(n), targets] -= 1
    grad /= n
    grads: list = [None] * len(net.params)
    pi = net.depth - 1
    stop = 0 if want_input_grad else net.param_layers[first_param]
    for pos in range(len(net.layers) - 1, stop - 1, -1):
        spec, x, cache = net.layers[pos], trace.inputs[pos], trace.caches[pos]
        need_dx = pos > stop
        if isinstance(spec, PARAMETERIZED):
            if pi in trace.multipliers:
                grad = grad * trace.multipliers[pi]
            w = net.params[2 * pi]
            if isinstance(spec, Conv):
                dflat = grad.transpose(0, 2, 3, 1).reshape(-1, spec.filters)
                grads[2 * pi] = (dflat.T @ cache).reshape(w.shape)
                grads[2 * pi + 1] = dflat.sum(axis=0)
                if need_dx or want_input_grad:
                    dcols = dflat @ w.reshape(spec.filters, -1)
                    grad = kernels.col2im(dcols, x.shape, spec.kh, spec.kw)
            else:
                flat = x.reshape(x.shape[0], -1)
                grads[2 * pi] = flat.T @ grad
                grads[2 * pi + 1] = grad.sum(axis=0)
                if need_dx or want_input_grad:
                    grad = (grad @ w.T).reshape(x.shape)
            pi -= 1
        elif isinstance(spec, MaxPool):
            grad = kernels.maxpool_backward(grad, cache, x.shape, spec.size)
        elif isinstance(spec, ReLU):
            grad = grad * (x > 0)
    return Gradients(grads, grad if want_input_grad else None)


def predict(net: Network, batch, mask=None, chunk: int = 1000) -> np.ndarray:
    """Argmax of the logits; ``np.argmax`` breaks ties toward the lowest class."""
    x = as_batch(net, batch)
    out = [np.argmax(forward(net, x[i:i + chunk], mask)[0], axis=1)
           for i in range(0, x.shape[0], chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)
