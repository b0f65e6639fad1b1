"""Small convolutional classifiers with exact backpropagation, in numpy.

Everything operates on float32 batches shaped ``(N, C, H, W)``.  Single-image
helpers (``forward``, ``loss_and_grads``, ``predict``) wrap the batched
functions so attacks and defenses can choose whichever is convenient.

Convolutions use an im2col lowering onto a single matmul; the direct
nested-loop convolution in the test suite is the correctness referee.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

CHECKPOINT_MAGIC = b"SYMD"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input or parameter shape does not match the network."""


class NumericOverflowError(FloatingPointError):
    """A forward or backward pass produced a non-finite value."""

    def __init__(self, layer_index: int, stage: str = "forward"):
        super().__init__(f"non-finite values after layer {layer_index} ({stage})")
        self.layer_index = layer_index
        self.stage = stage


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Conv2d:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int | None = None

    def __post_init__(self):
        if self.stride is None:
            object.__setattr__(self, "stride", self.window)

    @property
    def step(self) -> int:
        return self.stride


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int


LayerSpec = Union[Conv2d, ReLU, MaxPool, Flatten, Dense]

# checkpoint kind bytes
_KIND = {Conv2d: 1, ReLU: 2, MaxPool: 3, Flatten: 4, Dense: 5}


def default_architecture(num_classes: int) -> list[LayerSpec]:
    return [
        Conv2d(32, 3, padding=1),
        ReLU(),
        MaxPool(2),
        Conv2d(64, 3, padding=1),
        ReLU(),
        MaxPool(2),
        Flatten(),
        Dense(num_classes),
    ]


def _out_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(spec, Conv2d):
        if len(shape) != 3:
            raise ShapeError(f"conv2d expects (C, H, W) input, got {shape}")
        c, h, w = shape
        ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        return (spec.out_channels, ho, wo)
    if isinstance(spec, MaxPool):
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W) input, got {shape}")
        c, h, w = shape
        return (c, (h - spec.window) // spec.step + 1, (w - spec.window) // spec.step + 1)
    if isinstance(spec, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(spec, Dense):
        if len(shape) != 1:
            raise ShapeError(f"dense expects a flat input, got {shape}; add Flatten()")
        return (spec.out_features,)
    return shape


def _param_shapes(spec: LayerSpec, in_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    if isinstance(spec, Conv2d):
        return [(spec.out_channels, in_shape[0], spec.kernel, spec.kernel), (spec.out_channels,)]
    if isinstance(spec, Dense):
        return [(spec.out_features, in_shape[0]), (spec.out_features,)]
    return []


# ---------------------------------------------------------------------------
# network


@dataclass
class Network:
    """An ordered layer stack plus its parameters.

    ``params[i]`` is the list of arrays (weight, bias) owned by layer ``i``;
    parameter-free layers own an empty list.
    """

    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    num_classes: int
    params: list[list[np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes = self._check_shapes()
        if not self.params:
            self.params = [
                [np.zeros(s, dtype=DTYPE) for s in _param_shapes(spec, self.shapes[i])]
                for i, spec in enumerate(self.layers)
            ]
        self._check_params()

    def _check_shapes(self) -> list[tuple[int, ...]]:
        shapes = [self.input_shape]
        if len(self.input_shape) != 3:
            raise ShapeError(f"input shape must be (C, H, W), got {self.input_shape}")
        for i, spec in enumerate(self.layers):
            if isinstance(spec, Conv2d) and (spec.kernel < 1 or spec.stride < 1 or spec.padding < 0):
                raise ShapeError(f"layer {i}: invalid conv2d geometry {spec}")
            if isinstance(spec, MaxPool) and (spec.window < 1 or spec.step < 1):
                raise ShapeError(f"layer {i}: invalid maxpool geometry {spec}")
            out = _out_shape(spec, shapes[-1])
            if any(d <= 0 for d in out):
                raise ShapeError(f"layer {i} ({type(spec).__name__}) maps {shapes[-1]} to {out}")
            shapes.append(out)
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"network output {shapes[-1]} does not match num_classes={self.num_classes}")
        return shapes

    def _check_params(self):
        if len(self.params) != len(self.layers):
            raise ShapeError("one parameter list per layer required")
        for i, spec in enumerate(self.layers):
            expected = _param_shapes(spec, self.shapes[i])
            got = [p.shape for p in self.params[i]]
            if got != expected:
                raise ShapeError(f"layer {i}: parameter shapes {got} != {expected}")
            for j, p in enumerate(self.params[i]):
                if p.dtype != DTYPE:
                    self.params[i][j] = p.astype(DTYPE)
                if not np.all(np.isfinite(p)):
                    raise NumericOverflowError(i, "parameters")

    def flat_params(self) -> list[np.ndarray]:
        return [p for ps in self.params for p in ps]

    def copy(self) -> "Network":
        return Network(self.input_shape, list(self.layers), self.num_classes,
                       [[p.copy() for p in ps] for ps in self.params])


def build_network(input_shape: Sequence[int], num_classes: int,
                  layers: Sequence[LayerSpec] | None = None, seed: int = 0) -> Network:
    """He-uniform initialized network (zero biases)."""
    layers = list(default_architecture(num_classes) if layers is None else layers)
    net = Network(tuple(input_shape), layers, num_classes)
    rng = np.random.default_rng(seed)
    for i, spec in enumerate(net.layers):
        if not net.params[i]:
            continue
        w = net.params[i][0]
        fan_in = int(np.prod(w.shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        net.params[i][0] = rng.uniform(-bound, bound, size=w.shape).astype(DTYPE)
    return net


# ---------------------------------------------------------------------------
# layer kernels


def _conv_forward(x, w, b, spec: Conv2d):
    p, s, k = spec.padding, spec.stride, spec.kernel
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    out = out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape)


def _conv_backward(dout, w, cache, spec: Conv2d, need_input: bool):
    cols, xp_shape = cache
    n, f, ho, wo = dout.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    dx = None
    if need_input:
        c = xp_shape[1]
        dcols = (dmat @ w.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros(xp_shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p] if p else dxp
    return dx, dw, db


def _pool_forward(x, spec: MaxPool):
    k, s = spec.window, spec.step
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def _pool_backward(dout, cache, spec: MaxPool):
    idx, x_shape = cache
    k, s = spec.window, spec.step
    n, c, ho, wo = dout.shape
    dx = np.zeros(x_shape, dtype=DTYPE)
    di, dj = np.divmod(idx, k)
    for i in range(k):
        for j in range(k):
            mask = (di == i) & (dj == j)
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(mask, dout, 0)
    return dx


# ---------------------------------------------------------------------------
# forward / backward


def _as_batch(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4 or x.shape[1:] != net.input_shape:
        raise ShapeError(f"expected input of shape (N, {', '.join(map(str, net.input_shape))}), got {x.shape}")
    return x


def _run(net: Network, x: np.ndarray, keep: bool):
    with np.errstate(over="ignore", invalid="ignore"):
        return _run_layers(net, x, keep)


def _run_layers(net: Network, x: np.ndarray, keep: bool):
    caches = []
    for i, spec in enumerate(net.layers):
        cache = None
        if isinstance(spec, Conv2d):
            w, b = net.params[i]
            x, cache = _conv_forward(x, w, b, spec)
        elif isinstance(spec, ReLU):
            cache = x > 0
            x = np.where(cache, x, DTYPE(0))
        elif isinstance(spec, MaxPool):
            x, cache = _pool_forward(x, spec)
        elif isinstance(spec, Flatten):
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif isinstance(spec, Dense):
            w, b = net.params[i]
            cache = x
            x = x @ w.T + b
        if not np.all(np.isfinite(x)):
            raise NumericOverflowError(i)
        if keep:
            caches.append(cache)
    return x, caches


def forward_batch(net: Network, x: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape ``(N, num_classes)``."""
    logits, _ = _run(net, _as_batch(net, x), keep=False)
    return logits


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Logits for a single ``(C, H, W)`` image."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape != net.input_shape:
        raise ShapeError(f"expected input of shape {net.input_shape}, got {x.shape}")
    return forward_batch(net, x[None])[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class LossGrad:
    """Cross-entropy value(s) and the requested gradients.

    ``loss`` is a float for single-image calls and an ``(N,)`` array for batch
    calls.  Unrequested gradients are ``None``.
    """

    loss: float | np.ndarray
    input_grad: np.ndarray | None = None
    param_grads: list[list[np.ndarray]] | None = None
    logits: np.ndarray | None = None


def loss_and_grads_batch(net: Network, x: np.ndarray, labels: Sequence[int],
                         wrt_input: bool = True, wrt_params: bool = False,
                         reduction: str = "sum") -> LossGrad:
    """Softmax cross-entropy per sample and gradients of the reduced loss.

    With ``reduction="sum"`` the input gradient of each sample is the gradient
    of that sample's own loss, which is what the attacks need.  ``"mean"`` is
    used for training.
    """
    x = _as_batch(net, x)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"need one label per sample, got {labels.shape} for batch {x.shape[0]}")
    if np.any(labels < 0) or np.any(labels >= net.num_classes):
        raise ValueError(f"labels must lie in [0, {net.num_classes})")
    logits, caches = _run(net, x, keep=True)
    logp = log_softmax(logits)
    n = x.shape[0]
    losses = -logp[np.arange(n), labels]

    scale = DTYPE(1.0 / n) if reduction == "mean" else DTYPE(1.0)
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    grad = (grad * scale).astype(DTYPE)

    param_grads = [[] for _ in net.layers] if wrt_params else None
    for i in range(len(net.layers) - 1, -1, -1):
        spec, cache = net.layers[i], caches[i]
        need_input = wrt_input or i > 0
        if isinstance(spec, Dense):
            w = net.params[i][0]
            if wrt_params:
                param_grads[i] = [grad.T @ cache, grad.sum(axis=0)]
            grad = grad @ w if need_input else None
        elif isinstance(spec, Conv2d):
            dx, dw, db = _conv_backward(grad, net.params[i][0], cache, spec, need_input)
            if wrt_params:
                param_grads[i] = [dw, db]
            grad = dx
        elif isinstance(spec, ReLU):
            grad = np.where(cache, grad, DTYPE(0))
        elif isinstance(spec, MaxPool):
            grad = _pool_backward(grad, cache, spec)
        elif isinstance(spec, Flatten):
            grad = grad.reshape(cache)
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NumericOverflowError(i, "backward")
        if grad is None:
            break
    return LossGrad(
        loss=losses,
        input_grad=grad if wrt_input else None,
        param_grads=param_grads,
        logits=logits,
    )


def loss_and_grads(net: Network, x: np.ndarray, label: int,
                   wrt_input: bool = True, wrt_params: bool = False) -> LossGrad:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape != net.input_shape:
        raise ShapeError(f"expected input of shape {net.input_shape}, got {x.shape}")
    if not 0 <= label < net.num_classes:
        raise ValueError(f"label {label} outside [0, {net.num_classes})")
    out = loss_and_grads_batch(net, x[None], [label], wrt_input, wrt_params)
    return LossGrad(
        loss=float(out.loss[0]),
        input_grad=None if out.input_grad is None else out.input_grad[0],
        param_grads=out.param_grads,
        logits=out.logits[0],
    )


def argmax_lowest(logits: np.ndarray) -> np.ndarray | int:
    """Argmax along the last axis; ``np.argmax`` already returns the first maximum."""
    return np.argmax(logits, axis=-1)


def predict(net: Network, x: np.ndarray) -> int:
    return int(argmax_lowest(forward(net, x)))


def predict_batch(net: Network, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = [argmax_lowest(forward_batch(net, x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(net: Network, param_grads: list[list[np.ndarray]], lr: float,
             momentum: float = 0.0, velocity: list[list[np.ndarray]] | None = None):
    """Heavy-ball SGD: ``v = momentum * v + g``; ``w = w - lr * v``.

    Returns a new network and the new velocity; the input network is untouched.
    """
    if not lr > 0:
        raise ValueError("lr must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    if len(param_grads) != len(net.params):
        raise ShapeError("gradient list does not match layer count")
    if velocity is None:
        velocity = [[np.zeros_like(p) for p in ps] for ps in net.params]
    new_params, new_velocity = [], []
    for i, (ps, gs, vs) in enumerate(zip(net.params, param_grads, velocity)):
        if len(gs) != len(ps):
            raise ShapeError(f"layer {i}: {len(gs)} gradients for {len(ps)} parameters")
        layer_p, layer_v = [], []
        for p, g, v in zip(ps, gs, vs):
            if g.shape != p.shape:
                raise ShapeError(f"layer {i}: gradient shape {g.shape} != parameter shape {p.shape}")
            v = (DTYPE(momentum) * v + g).astype(DTYPE)
            layer_v.append(v)
            layer_p.append((p - DTYPE(lr) * v).astype(DTYPE))
        new_params.append(layer_p)
        new_velocity.append(layer_v)
    return Network(net.input_shape, list(net.layers), net.num_classes, new_params), new_velocity


# ---------------------------------------------------------------------------
# checkpoints
#
# "SYMD" | version u8 | C, H, W, num_classes, n_layers (u32 LE)
# per layer: kind u8 followed by its integers (u32 LE)
#   conv2d: out_channels, kernel, stride, padding
#   maxpool: window, stride
#   dense: out_features
# then every parameter array as raw float32 LE, in declaration order


def _layer_ints(spec: LayerSpec) -> tuple[int, ...]:
    if isinstance(spec, Conv2d):
        return (spec.out_channels, spec.kernel, spec.stride, spec.padding)
    if isinstance(spec, MaxPool):
        return (spec.window, spec.step)
    if isinstance(spec, Dense):
        return (spec.out_features,)
    return ()


def checkpoint_bytes(net: Network) -> bytes:
    parts = [CHECKPOINT_MAGIC, bytes([CHECKPOINT_VERSION]),
             struct.pack("<5I", *net.input_shape, net.num_classes, len(net.layers))]
    for spec in net.layers:
        ints = _layer_ints(spec)
        parts.append(bytes([_KIND[type(spec)]]) + struct.pack(f"<{len(ints)}I", *ints))
    for p in net.flat_params():
        parts.append(p.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net: Network, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(net))
    return path


def load_checkpoint(path: str | Path) -> Network:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise
    return parse_checkpoint(data, source=str(path))


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> Network:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic {data[:4]!r}")
    if len(data) < 5 or data[4] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported version")
    off = 5

    def take(n_ints):
        nonlocal off
        if off + 4 * n_ints > len(data):
            raise CheckpointError(f"{source}: truncated header at offset {off}")
        vals = struct.unpack_from(f"<{n_ints}I", data, off)
        off += 4 * n_ints
        return vals

    c, h, w, num_classes, n_layers = take(5)
    layers: list[LayerSpec] = []
    for _ in range(n_layers):
        if off >= len(data):
            raise CheckpointError(f"{source}: truncated layer table at offset {off}")
        kind = data[off]
        off += 1
        if kind == 1:
            layers.append(Conv2d(*take(4)))
        elif kind == 2:
            layers.append(ReLU())
        elif kind == 3:
            window, stride = take(2)
            layers.append(MaxPool(window, stride))
        elif kind == 4:
            layers.append(Flatten())
        elif kind == 5:
            layers.append(Dense(*take(1)))
        else:
            raise CheckpointError(f"{source}: unknown layer kind {kind} at offset {off - 1}")
    net = Network((c, h, w), layers, num_classes)
    params = []
    for ps in net.params:
        layer = []
        for p in ps:
            nbytes = 4 * p.size
            if off + nbytes > len(data):
                raise CheckpointError(f"{source}: truncated parameters at offset {off}")
            layer.append(np.frombuffer(data, dtype="<f4", count=p.size, offset=off)
                         .astype(DTYPE).reshape(p.shape))
            off += nbytes
        params.append(layer)
    if off != len(data):
        raise CheckpointError(f"{source}: {len(data) - off} trailing bytes")
    return Network((c, h, w), layers, num_classes, params)
