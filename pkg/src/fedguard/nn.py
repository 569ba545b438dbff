"""Small numpy neural-network engine with exact analytic gradients.

Layers are plain descriptors collected in a :class:`ModelSpec`; all learnable
state lives in a separate :class:`ModelParams` so parameters can be averaged,
perturbed and serialized independently of the architecture.  Everything runs
in float64.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from ._rng import as_generator
from .exceptions import ConfigError, DomainError, FormatError, NumericError, ShapeError

DTYPE = np.float64
PARAMS_MAGIC = b"FGP1"


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_size: int


@dataclass(frozen=True)
class MaxPool2D:
    window: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


Layer = Conv2D | MaxPool2D | ReLU | Flatten | Dense


@dataclass(frozen=True)
class ModelSpec:
    """An ordered layer stack for inputs of ``input_shape`` (without batch axis)."""

    layers: tuple
    input_shape: tuple
    n_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.layer_shapes()

    def layer_shapes(self):
        """Output shape of every layer; raises ConfigError on the first inconsistency."""
        shape = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            shape = _output_shape(i, layer, shape)
            shapes.append(shape)
        if shape != (self.n_classes,):
            raise ConfigError(
                f"final output shape {shape} does not match n_classes={self.n_classes}"
            )
        return shapes

    def param_shapes(self):
        """``[(layer_index, role, shape), ...]`` in canonical order."""
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2D):
                k = layer.kernel_size
                out.append((i, "weight", (layer.out_channels, layer.in_channels, k, k)))
                out.append((i, "bias", (layer.out_channels,)))
            elif isinstance(layer, Dense):
                out.append((i, "weight", (layer.in_dim, layer.out_dim)))
                out.append((i, "bias", (layer.out_dim,)))
        return out


def _output_shape(i, layer, shape):
    def bad(msg):
        return ConfigError(f"layer {i} ({type(layer).__name__}): {msg}")

    if isinstance(layer, Conv2D):
        if len(shape) != 3:
            raise bad(f"expects a [C, H, W] input, got {shape}")
        c, h, w = shape
        k = layer.kernel_size
        if min(layer.in_channels, layer.out_channels, k) < 1:
            raise bad("channels and kernel size must be positive")
        if c != layer.in_channels:
            raise bad(f"in_channels={layer.in_channels} but input has {c} channels")
        if k > h or k > w:
            raise bad(f"kernel {k} larger than input {h}x{w}")
        return (layer.out_channels, h - k + 1, w - k + 1)
    if isinstance(layer, MaxPool2D):
        if len(shape) != 3:
            raise bad(f"expects a [C, H, W] input, got {shape}")
        c, h, w = shape
        if layer.window < 1 or layer.window > min(h, w):
            raise bad(f"window {layer.window} does not fit input {h}x{w}")
        return (c, h // layer.window, w // layer.window)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise bad(f"expects a flat input, got {shape}; add Flatten first")
        if min(layer.in_dim, layer.out_dim) < 1:
            raise bad("dimensions must be positive")
        if shape[0] != layer.in_dim:
            raise bad(f"in_dim={layer.in_dim} but input has {shape[0]} features")
        return (layer.out_dim,)
    raise bad("unknown layer type")


def paper_cnn(image_size=28, in_channels=1, channels=32, kernel_size=5, hidden=1024, n_classes=10):
    """Two conv(5x5, 32)+ReLU+maxpool(2) blocks, a 1024-unit ReLU layer and a softmax head."""
    size = image_size
    size = (size - kernel_size + 1) // 2
    size = (size - kernel_size + 1) // 2
    if size < 1:
        raise ConfigError(f"image_size={image_size} too small for two conv/pool blocks")
    layers = [
        Conv2D(in_channels, channels, kernel_size), ReLU(), MaxPool2D(2),
        Conv2D(channels, channels, kernel_size), ReLU(), MaxPool2D(2),
        Flatten(),
        Dense(channels * size * size, hidden), ReLU(),
        Dense(hidden, n_classes),
    ]
    return ModelSpec(layers, (in_channels, image_size, image_size), n_classes)


def small_mlp(image_size=28, in_channels=1, hidden=(128,), n_classes=10):
    """Flatten, then ReLU dense layers of the given widths, then the softmax head."""
    if isinstance(hidden, int):
        hidden = (hidden,)
    width = in_channels * image_size * image_size
    layers = [Flatten()]
    for h in hidden:
        layers += [Dense(width, h), ReLU()]
        width = h
    layers.append(Dense(width, n_classes))
    return ModelSpec(layers, (in_channels, image_size, image_size), n_classes)


MODEL_NAMES = ("paper_cnn", "small_mlp")


def build_spec(name, image_size=28, n_classes=10, reduced=False):
    """Named architectures.  ``reduced`` gives the 8x8 variants used for gradient checks."""
    if name == "paper_cnn":
        if reduced:
            return paper_cnn(image_size=8, channels=4, kernel_size=2, hidden=16, n_classes=n_classes)
        return paper_cnn(image_size=image_size, n_classes=n_classes)
    if name == "small_mlp":
        if reduced:
            return small_mlp(image_size=8, hidden=16, n_classes=n_classes)
        return small_mlp(image_size=image_size, n_classes=n_classes)
    raise ConfigError(f"unknown model spec {name!r}; expected one of {MODEL_NAMES}")


class ModelParams:
    """Ordered ``(layer_index, role, array)`` triples for one ModelSpec."""

    __slots__ = ("entries",)

    def __init__(self, entries):
        self.entries = tuple(
            (int(layer), str(role), np.asarray(arr, dtype=DTYPE)) for layer, role, arr in entries
        )

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[np.ndarray]:
        return (arr for _, _, arr in self.entries)

    def __getitem__(self, i):
        return self.entries[i][2]

    def __repr__(self):
        shapes = ", ".join(f"{l}.{r}{tuple(a.shape)}" for l, r, a in self.entries)
        return f"ModelParams({shapes})"

    @property
    def tensors(self):
        return [arr for _, _, arr in self.entries]

    def keys(self):
        return [(layer, role) for layer, role, _ in self.entries]

    def get(self, layer, role):
        for l, r, arr in self.entries:
            if l == layer and r == role:
                return arr
        raise KeyError((layer, role))

    def structure(self):
        return [(l, r, a.shape) for l, r, a in self.entries]

    def map(self, fn):
        return ModelParams((l, r, fn(a)) for l, r, a in self.entries)

    def copy(self):
        return self.map(np.array)

    def check_compatible(self, other, what="params"):
        if len(self) != len(other):
            raise ShapeError(f"{what}: expected {len(self)} tensors, got {len(other)}")
        for (l, r, a), (l2, r2, b) in zip(self.entries, other.entries):
            if (l, r) != (l2, r2) or a.shape != b.shape:
                raise ShapeError(
                    f"{what}: layer {l} {r} expected shape {a.shape}, got layer {l2} {r2} {b.shape}"
                )

    def to_vector(self):
        return np.concatenate([a.ravel() for a in self]) if self.entries else np.zeros(0)

    def from_vector(self, vec):
        """A ModelParams with this structure filled from a flat vector."""
        vec = np.asarray(vec, dtype=DTYPE)
        size = sum(a.size for a in self)
        if vec.shape != (size,):
            raise ShapeError(f"expected a vector of {size} values, got shape {vec.shape}")
        out, pos = [], 0
        for l, r, a in self.entries:
            out.append((l, r, vec[pos:pos + a.size].reshape(a.shape).copy()))
            pos += a.size
        return ModelParams(out)

    def equals(self, other):
        """Bit-exact equality of structure and values."""
        if self.structure() != other.structure():
            return False
        return all(a.tobytes() == b.tobytes() for a, b in zip(self, other))

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(PARAMS_MAGIC)
        for arr in self:
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data, spec):
        """Decode the ``FGP1`` layout; ``spec`` supplies layer indices and roles."""
        arrays = read_param_arrays(data)
        expected = spec.param_shapes()
        if len(arrays) != len(expected):
            raise FormatError(f"file holds {len(arrays)} tensors, spec needs {len(expected)}")
        entries = []
        for arr, (layer, role, shape) in zip(arrays, expected):
            if arr.shape != tuple(shape):
                raise FormatError(f"layer {layer} {role}: stored shape {arr.shape}, spec needs {shape}")
            entries.append((layer, role, arr))
        return cls(entries)


def read_param_arrays(data):
    """Parse an ``FGP1`` blob into a list of float64 arrays."""
    data = bytes(data)
    if data[:4] != PARAMS_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {PARAMS_MAGIC!r}")
    pos, arrays = 4, []
    while pos < len(data):
        if pos + 4 > len(data):
            raise FormatError("truncated tensor header")
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + 4 * rank > len(data):
            raise FormatError("truncated tensor dims")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(data):
            raise FormatError(f"truncated tensor data: need {nbytes} bytes, have {len(data) - pos}")
        arr = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).astype(DTYPE)
        arrays.append(arr.reshape(dims))
        pos += nbytes
    return arrays


def save_params(path, params):
    with open(path, "wb") as f:
        f.write(params.to_bytes())


def load_params(path, spec):
    with open(path, "rb") as f:
        return ModelParams.from_bytes(f.read(), spec)


class Batch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray


def init_params(spec, rng=None):
    """He-uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))`` and zero biases."""
    rng = as_generator(rng)
    entries = []
    for layer, role, shape in spec.param_shapes():
        if role == "bias":
            entries.append((layer, role, np.zeros(shape, dtype=DTYPE)))
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        entries.append((layer, role, rng.uniform(-bound, bound, size=shape)))
    return ModelParams(entries)


def _check_inputs(spec, inputs):
    inputs = np.asarray(inputs, dtype=DTYPE)
    if inputs.ndim != len(spec.input_shape) + 1 or inputs.shape[1:] != spec.input_shape:
        raise ShapeError(
            f"expected inputs of shape [B, {', '.join(map(str, spec.input_shape))}], got {list(inputs.shape)}"
        )
    return inputs


def _layer_params(spec, params):
    expected = spec.param_shapes()
    if len(params) != len(expected):
        raise ShapeError(f"spec needs {len(expected)} parameter tensors, got {len(params)}")
    table = {}
    for (layer, role, shape), (l, r, arr) in zip(expected, params.entries):
        if (layer, role) != (l, r) or arr.shape != tuple(shape):
            raise ShapeError(f"layer {layer} {role}: expected shape {tuple(shape)}, got {arr.shape}")
        table[layer, role] = arr
    return table


def _im2col(x, k):
    """``[B, C, H, W]`` -> patch matrix ``[B*Ho*Wo, k*k*C]`` (row order B, Ho, Wo)."""
    n, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    cols = np.empty((n, ho, wo, k, k, c), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + ho, j:j + wo, :]
    return cols.reshape(n * ho * wo, k * k * c)


def _conv_forward(x, w, b):
    n, _, h, wd = x.shape
    o, c, k, _ = w.shape
    ho, wo = h - k + 1, wd - k + 1
    cols = _im2col(x, k)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(o, -1).T + b
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def _conv_backward(x_shape, cols, w, dout, need_dx=True):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    ho, wo = h - k + 1, wd - k + 1
    g = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (g.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
    db = g.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (g @ w.transpose(0, 2, 3, 1).reshape(o, -1)).reshape(n, ho, wo, k, k, c)
    dxh = np.zeros((n, h, wd, c), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxh[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
    return dxh.transpose(0, 3, 1, 2), dw, db


def _pool_windows(x, p):
    n, c, h, w = x.shape
    ho, wo = h // p, w // p
    xr = x[:, :, :ho * p, :wo * p].reshape(n, c, ho, p, wo, p)
    return xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, p * p)


def _pool_backward(x, p, dout):
    n, c, h, w = x.shape
    ho, wo = h // p, w // p
    arg = _pool_windows(x, p).argmax(axis=-1)  # first maximum wins ties
    dwin = np.zeros((n, c, ho, wo, p * p), dtype=DTYPE)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, c, ho, wo, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * p, wo * p)
    dx = np.zeros_like(x)
    dx[:, :, :ho * p, :wo * p] = dwin
    return dx


def _run(spec, params, inputs, keep=False):
    table = _layer_params(spec, params)
    x = _check_inputs(spec, inputs)
    cache = []
    for i, layer in enumerate(spec.layers):
        x_in = x
        if keep:
            cache.append(x)
        if isinstance(layer, Conv2D):
            x, cols = _conv_forward(x, table[i, "weight"], table[i, "bias"])
            if keep:
                cache[-1] = (x_in, cols)
        elif isinstance(layer, MaxPool2D):
            x = _pool_windows(x, layer.window).max(axis=-1)
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            x = x @ table[i, "weight"] + table[i, "bias"]
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activation in layer {i} ({type(layer).__name__})", layer=i)
    return x, cache, table


def forward(spec, params, inputs):
    """Logits ``[B, n_classes]`` for a batch of inputs."""
    return _run(spec, params, inputs)[0]


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(spec, labels, n):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n:
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= spec.n_classes):
        raise DomainError(f"labels must lie in [0, {spec.n_classes})")
    return labels.astype(np.int64)


def cross_entropy(logits, labels):
    """Per-sample ``-log softmax(logits)[label]``."""
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    return lse - logits[np.arange(len(labels)), labels]


def loss(spec, params, batch):
    inputs, labels = batch
    if len(labels) == 0:
        raise DomainError("empty batch")
    logits = forward(spec, params, inputs)
    labels = _check_labels(spec, labels, logits.shape[0])
    return float(cross_entropy(logits, labels).mean())


def loss_and_grad(spec, params, batch):
    """Mean softmax cross-entropy over ``batch`` and its gradient w.r.t. ``params``."""
    inputs, labels = batch
    if len(labels) == 0:
        raise DomainError("empty batch")
    logits, cache, table = _run(spec, params, inputs, keep=True)
    labels = _check_labels(spec, labels, logits.shape[0])
    n = logits.shape[0]
    value = float(cross_entropy(logits, labels).mean())
    if not np.isfinite(value):
        raise NumericError("non-finite loss", layer=len(spec.layers) - 1)

    grads = {}
    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    g /= n
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, x = spec.layers[i], cache[i]
        if isinstance(layer, Dense):
            grads[i, "weight"] = x.T @ g
            grads[i, "bias"] = g.sum(axis=0)
            g = g @ table[i, "weight"].T
        elif isinstance(layer, Conv2D):
            x, cols = x
            g, grads[i, "weight"], grads[i, "bias"] = _conv_backward(
                x.shape, cols, table[i, "weight"], g, need_dx=i > 0
            )
        elif isinstance(layer, MaxPool2D):
            g = _pool_backward(x, layer.window, g)
        elif isinstance(layer, ReLU):
            g = g * (x > 0)
        elif isinstance(layer, Flatten):
            g = g.reshape(x.shape)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {i} ({type(layer).__name__})", layer=i)
    return value, ModelParams((l, r, grads[l, r]) for l, r, _ in params.entries)


def sgd_step(params, grads, lr):
    """``params - lr * grads``; returns new arrays."""
    params.check_compatible(grads, "grads")
    return ModelParams((l, r, a - lr * g) for (l, r, a), g in zip(params.entries, grads))


def finite_diff_grad(spec, params, batch, epsilon=1e-5, loss_fn=None):
    """Central-difference gradient, one coordinate at a time.

    ``loss_fn(spec, params, batch) -> float`` defaults to the mean cross-entropy.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise DomainError(f"epsilon={epsilon} outside [1e-7, 1e-3]")
    loss_fn = loss_fn or loss
    base = params.to_vector()
    grad = np.empty_like(base)
    for j in range(base.size):
        w = base.copy()
        w[j] = base[j] + epsilon
        up = loss_fn(spec, params.from_vector(w), batch)
        w[j] = base[j] - epsilon
        down = loss_fn(spec, params.from_vector(w), batch)
        grad[j] = (up - down) / (2 * epsilon)
    return params.from_vector(grad)


def max_relative_error(a, b, floor=1e-6):
    """``max |a - b| / max(|a|, |b|, floor)`` over every coordinate."""
    x, y = a.to_vector(), b.to_vector()
    denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
    return float(np.max(np.abs(x - y) / denom)) if x.size else 0.0


def predict_logits(spec, params, inputs, chunk=1000):
    inputs = np.asarray(inputs, dtype=DTYPE)
    parts = [forward(spec, params, inputs[i:i + chunk]) for i in range(0, len(inputs), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, spec.n_classes))


def evaluate(spec, params, inputs, labels, chunk=1000):
    """(mean cross-entropy, accuracy) over a whole dataset, in chunks."""
    if len(labels) == 0:
        raise DomainError("empty dataset")
    logits = predict_logits(spec, params, inputs, chunk)
    labels = _check_labels(spec, labels, logits.shape[0])
    ce = cross_entropy(logits, labels)
    return float(ce.mean()), float(np.mean(logits.argmax(axis=1) == labels))


def accuracy(spec, params, dataset: Sequence):
    inputs, labels = dataset
    return evaluate(spec, params, inputs, labels)[1]
