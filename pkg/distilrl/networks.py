"""
Network Engine
==============

A small numpy network engine for training teachers and students: it turns
an `Architecture` into a trainable network, runs forward and backward
passes (convolutions via im2col windows), and trains with hard-label
cross-entropy, the logit-matching distillation loss, or their combination.

Main entry points:

* `build_network(arch, seed)` allocates a `TrainableNet` with He-style
  initialization.
* `forward(net, inputs)` returns un-normalized logits.
* `train(net, data, loss, epochs, ...)` runs mini-batch Adam.
* `evaluate_accuracy(net, data)` is the fraction of correct argmax
  predictions.
* `kd_loss`, `combined_loss` and `cross_entropy` are the losses.

Like the policies, a network keeps all of its trainable parameters in one
flat float64 vector (`net.weights`), viewed per layer through a
`ParamLayout`. BatchNorm running statistics are kept separately in
`net.buffers` and are not trained.
"""

import sys
import enum
import dataclasses

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try: # optional dependency on tqdm
    import tqdm
except ImportError:
    import distilrl.notqdm as tqdm

from distilrl.architectures import (
    LayerType,
    DegeneracyClass,
    DEFAULT_MAX_FLATTEN,
    classify_degenerate,
    infer_shapes,
    input_shapes,
)
from distilrl.containers import save_tensors, load_tensors
from distilrl.optimizers import AdamState, NonFiniteError, adam_step
from distilrl.params import ParamLayout


BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1
DEFAULT_BATCH_SIZE = 64
DEFAULT_LR = 1e-3


class DegenerateArchitectureError(ValueError):
    """A network was requested for an architecture that is not Valid."""


# # Data


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """
    Fields:

    * `inputs` (array `(N, channels, height, width)`)
    * `hard_labels` (int array `(N,)`): class indices.
    * `teacher_logits` (array `(N, n_classes)` or `None`): cached teacher
      outputs `z` for distillation.
    """
    inputs: np.ndarray
    hard_labels: np.ndarray
    teacher_logits: np.ndarray = None

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.inputs.ndim != 4:
            raise ValueError(f"inputs must be (N, C, H, W), got shape "
                             f"{self.inputs.shape}")
        if self.hard_labels.shape != (n,):
            raise ValueError(f"{self.hard_labels.shape[0]} labels for {n} "
                             f"inputs")
        if self.teacher_logits is not None and \
                self.teacher_logits.shape[0] != n:
            raise ValueError(f"{self.teacher_logits.shape[0]} logit rows for "
                             f"{n} inputs")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, indices):
        return Dataset(
            self.inputs[indices],
            self.hard_labels[indices],
            None if self.teacher_logits is None
            else self.teacher_logits[indices],
        )

    def with_logits(self, teacher_logits):
        return Dataset(self.inputs, self.hard_labels, teacher_logits)


class LossMode(str, enum.Enum):
    HARD_ONLY = "HardOnly"
    KD_ONLY = "KDOnly"
    COMBINED = "Combined"


@dataclasses.dataclass(frozen=True)
class LossSpec:
    """`mode` plus the distillation weight `lam` (used in Combined only)."""
    mode: LossMode = LossMode.KD_ONLY
    lam: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, 'mode', LossMode(self.mode))
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


# # Losses


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient `(softmax - onehot)/N`."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float(np.mean(log_probs[np.arange(n), labels]))
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def kd_loss(logits, z):
    """
    `(1/N) sum_i ||logits_i - z_i||^2`, the mean squared L2 distance between
    student and teacher logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if logits.shape != z.shape:
        raise ValueError(f"logits {logits.shape} and teacher logits "
                         f"{z.shape} differ in shape")
    return float(np.sum((logits - z) ** 2) / logits.shape[0])


def _kd_grad(logits, z):
    return 2.0 * (logits - z) / logits.shape[0]


def combined_loss(logits, labels, z, lam):
    """Cross-entropy on `labels` plus `lam * kd_loss(logits, z)`."""
    if z is None:
        raise ValueError("combined loss needs teacher logits")
    return cross_entropy(logits, labels)[0] + lam * kd_loss(logits, z)


def loss_and_gradient(spec, logits, labels, z):
    """The loss selected by `spec` and its gradient with respect to logits."""
    if spec.mode is not LossMode.HARD_ONLY and z is None:
        raise ValueError(f"{spec.mode.value} loss needs teacher logits")
    if spec.mode is LossMode.HARD_ONLY:
        return cross_entropy(logits, labels)
    if spec.mode is LossMode.KD_ONLY:
        return kd_loss(logits, z), _kd_grad(logits, z)
    ce, ce_grad = cross_entropy(logits, labels)
    return (ce + spec.lam * kd_loss(logits, z),
            ce_grad + spec.lam * _kd_grad(logits, z))


# # Layers


class _Layer:
    """
    Abstract base class for engine layers.

    A layer knows its spec and its input/output shapes, registers its
    trainable tensors in the network's `ParamLayout`, and implements
    `forward(p, x, train)` and `backward(p, g, dout)` on 4-d batches, where
    `p` and `g` are the named views of the weights and of the gradient. The
    forward pass stores whatever the backward pass needs on `self`.
    """

    def __init__(self, spec, in_shape, out_shape, name):
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = out_shape
        self.name = name

    def register(self, layout):
        pass

    def initialize(self, p, rng):
        pass

    def buffers(self):
        return {}

    def forward(self, p, x, train, buffers):
        return x

    def backward(self, p, g, dout):
        return dout


def _windows(xp, kernel, stride):
    return sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[
        :, :, ::stride, ::stride]


def _scatter_windows(dwin, padded_shape, kernel, stride):
    """Sum window gradients `(N, C, Ho, Wo, k, k)` back onto the input."""
    _, _, ho, wo = dwin.shape[:4]
    dxp = np.zeros(padded_shape)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dwin[:, :, :, :, i, j]
    return dxp


class Conv2dLayer(_Layer):

    def register(self, layout):
        c = self.in_shape[0]
        k = self.spec.kernel
        layout.add(self.name + ".W", (self.spec.n_out, c, k, k))
        layout.add(self.name + ".b", (self.spec.n_out,))

    def initialize(self, p, rng):
        W = p[self.name + ".W"]
        fan_in = W[0].size
        W[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=W.shape)
        p[self.name + ".b"][...] = 0.0

    def forward(self, p, x, train, buffers):
        W = p[self.name + ".W"]
        k, s, pad = self.spec.kernel, self.spec.stride, self.spec.padding
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = _windows(xp, k, s)
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = cols @ W.reshape(W.shape[0], -1).T + p[self.name + ".b"]
        self.cache = (xp.shape, cols, n, ho, wo)
        return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)

    def backward(self, p, g, dout):
        W = p[self.name + ".W"]
        padded_shape, cols, n, ho, wo = self.cache
        k, s, pad = self.spec.kernel, self.spec.stride, self.spec.padding
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, W.shape[0])
        g[self.name + ".W"] += (d2.T @ cols).reshape(W.shape)
        g[self.name + ".b"] += d2.sum(axis=0)
        dcols = (d2 @ W.reshape(W.shape[0], -1)).reshape(
            n, ho, wo, W.shape[1], k, k)
        dxp = _scatter_windows(dcols.transpose(0, 3, 1, 2, 4, 5),
                               padded_shape, k, s)
        return dxp[:, :, pad:padded_shape[2] - pad, pad:padded_shape[3] - pad]


class LinearLayer(_Layer):

    def register(self, layout):
        fan_in = int(np.prod(self.in_shape))
        layout.add(self.name + ".W", (self.spec.n_out, fan_in))
        layout.add(self.name + ".b", (self.spec.n_out,))

    def initialize(self, p, rng):
        W = p[self.name + ".W"]
        W[...] = rng.normal(0.0, np.sqrt(2.0 / W.shape[1]), size=W.shape)
        p[self.name + ".b"][...] = 0.0

    def forward(self, p, x, train, buffers):
        self.cache = (x.shape, x.reshape(x.shape[0], -1))
        out = self.cache[1] @ p[self.name + ".W"].T + p[self.name + ".b"]
        return out.reshape(out.shape[0], -1, 1, 1)

    def backward(self, p, g, dout):
        x_shape, flat = self.cache
        d2 = dout.reshape(dout.shape[0], -1)
        g[self.name + ".W"] += d2.T @ flat
        g[self.name + ".b"] += d2.sum(axis=0)
        return (d2 @ p[self.name + ".W"]).reshape(x_shape)


class MaxPoolLayer(_Layer):

    def forward(self, p, x, train, buffers):
        k, s, pad = self.spec.kernel, self.spec.stride, self.spec.padding
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                    constant_values=-np.inf)
        win = _windows(xp, k, s)
        flat = win.reshape(win.shape[:4] + (k * k,))
        argmax = flat.argmax(axis=-1)
        self.cache = (xp.shape, argmax)
        return np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def backward(self, p, g, dout):
        padded_shape, argmax = self.cache
        k, s, pad = self.spec.kernel, self.spec.stride, self.spec.padding
        onehot = (argmax[..., None] == np.arange(k * k)) * dout[..., None]
        dwin = onehot.reshape(argmax.shape + (k, k))
        dxp = _scatter_windows(dwin, padded_shape, k, s)
        return dxp[:, :, pad:padded_shape[2] - pad, pad:padded_shape[3] - pad]


class ActivationLayer(_Layer):

    def forward(self, p, x, train, buffers):
        self.cache = x > 0
        return x * self.cache

    def backward(self, p, g, dout):
        return dout * self.cache


class BatchNormLayer(_Layer):

    def register(self, layout):
        c = self.in_shape[0]
        layout.add(self.name + ".gamma", (c,))
        layout.add(self.name + ".beta", (c,))

    def initialize(self, p, rng):
        p[self.name + ".gamma"][...] = 1.0
        p[self.name + ".beta"][...] = 0.0

    def buffers(self):
        c = self.in_shape[0]
        return {
            self.name + ".running_mean": np.zeros(c),
            self.name + ".running_var": np.ones(c),
        }

    def forward(self, p, x, train, buffers):
        gamma = p[self.name + ".gamma"][None, :, None, None]
        beta = p[self.name + ".beta"][None, :, None, None]
        mean_key = self.name + ".running_mean"
        var_key = self.name + ".running_var"
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            buffers[mean_key] = ((1 - BATCHNORM_MOMENTUM) * buffers[mean_key]
                                 + BATCHNORM_MOMENTUM * mean)
            buffers[var_key] = ((1 - BATCHNORM_MOMENTUM) * buffers[var_key]
                                + BATCHNORM_MOMENTUM * var)
        else:
            mean = buffers[mean_key]
            var = buffers[var_key]
        inv_std = 1.0 / np.sqrt(var + BATCHNORM_EPS)[None, :, None, None]
        xhat = (x - mean[None, :, None, None]) * inv_std
        self.cache = (xhat, inv_std, train)
        return gamma * xhat + beta

    def backward(self, p, g, dout):
        xhat, inv_std, train = self.cache
        gamma = p[self.name + ".gamma"][None, :, None, None]
        g[self.name + ".gamma"] += (dout * xhat).sum(axis=(0, 2, 3))
        g[self.name + ".beta"] += dout.sum(axis=(0, 2, 3))
        dxhat = dout * gamma
        if not train:
            return dxhat * inv_std
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        total = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        dot = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return inv_std * (m * dxhat - total - xhat * dot) / m


class FlattenLayer(_Layer):

    def forward(self, p, x, train, buffers):
        self.cache = x.shape
        return x.reshape(x.shape[0], -1, 1, 1)

    def backward(self, p, g, dout):
        return dout.reshape(self.cache)


LAYER_CLASSES = {
    LayerType.CONV2D: Conv2dLayer,
    LayerType.LINEAR: LinearLayer,
    LayerType.MAXPOOL: MaxPoolLayer,
    LayerType.ACTIVATION: ActivationLayer,
    LayerType.BATCHNORM: BatchNormLayer,
    LayerType.FLATTEN: FlattenLayer,
}


# # Networks


class TrainableNet:
    """
    A network built from an `Architecture`.

    Attributes:

    * `arch` (`Architecture`)
    * `layers` (list of `_Layer`)
    * `layout` (`ParamLayout`) and `weights` (flat float64 array): the
      trainable parameters `W`.
    * `buffers` (dict of arrays): BatchNorm running statistics.
    * `rng_seed` (int): the initialization seed.
    * `loss_history` (list of float): mean training loss per epoch, over
      all calls to `train`.
    """


    def __init__(self, arch, seed=0):
        self.arch = arch
        self.rng_seed = seed
        shapes = infer_shapes(arch)
        self.layers = [
            LAYER_CLASSES[spec.layer_type](spec, in_shape, out_shape,
                                           f"{i}.{spec.layer_type.value}")
            for i, (spec, in_shape, out_shape)
            in enumerate(zip(arch.layers, input_shapes(arch, shapes), shapes))
        ]
        self.layout = ParamLayout()
        self.buffers = {}
        for layer in self.layers:
            layer.register(self.layout)
            self.buffers.update(layer.buffers())
        self.weights = self.layout.zeros()
        rng = np.random.default_rng(seed)
        p = self.layout.views(self.weights)
        for layer in self.layers:
            layer.initialize(p, rng)
        self.loss_history = []


    def params(self):
        return self.layout.views(self.weights)


    def _forward(self, inputs, train):
        p = self.params()
        block_starts = {start for start, _ in self.arch.blocks}
        block_ends = {end: start for start, end in self.arch.blocks}
        saved = {}
        x = inputs
        for i, layer in enumerate(self.layers):
            if i in block_starts:
                saved[i] = x
            x = layer.forward(p, x, train, self.buffers)
            if i in block_ends:
                x = x + saved.pop(block_ends[i])
        return x.reshape(x.shape[0], -1)


    def _backward(self, dlogits):
        p = self.params()
        grad = self.layout.zeros()
        g = self.layout.views(grad)
        block_ends = {end: start for start, end in self.arch.blocks}
        pending = {}
        d = dlogits.reshape((dlogits.shape[0],) + self.layers[-1].out_shape)
        for i in reversed(range(len(self.layers))):
            if i in block_ends:
                pending[block_ends[i]] = d
            d = self.layers[i].backward(p, g, d)
            if i in pending:
                d = d + pending.pop(i)
        return grad


    def loss_and_gradient(self, inputs, labels, z, spec, train=True):
        """
        The loss selected by `spec` on one batch and its gradient with
        respect to `self.weights`.
        """
        logits = self._forward(inputs, train)
        loss, dlogits = loss_and_gradient(spec, logits, labels, z)
        return loss, self._backward(dlogits)


def build_network(arch, seed=0, max_flatten=DEFAULT_MAX_FLATTEN):
    """
    Allocate a `TrainableNet` for `arch`. Conv2d and Linear weights are
    drawn from `N(0, 2 / fan_in)` with zero biases; BatchNorm starts at unit
    scale and zero shift. Equal seeds give bit-identical weights.

    Raises `DegenerateArchitectureError` unless `arch` is Valid.
    """
    degenerate = classify_degenerate(arch, max_flatten)
    if degenerate is not DegeneracyClass.VALID:
        raise DegenerateArchitectureError(
            f"cannot build a {degenerate.value} architecture"
        )
    return TrainableNet(arch, seed)


def forward(net, inputs, batch_size=256):
    """
    Logits `(N, n_classes)` for `inputs` `(N, channels, height, width)`, in
    evaluation mode.

    Raises `ValueError` if the input shape does not match the architecture.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 4 or inputs.shape[1:] != net.arch.input_shape:
        raise ValueError(f"inputs of shape {inputs.shape} do not match "
                         f"architecture input {net.arch.input_shape}")
    outputs = [
        net._forward(inputs[start:start + batch_size], train=False)
        for start in range(0, inputs.shape[0], batch_size)
    ]
    if not outputs:
        return np.zeros((0, net.arch.n_classes))
    return np.concatenate(outputs, axis=0)


def train(
    net,
    data,
    loss,
    epochs,
    lr=DEFAULT_LR,
    batch_size=DEFAULT_BATCH_SIZE,
    seed=0,
    optimizer="adam",
    verbose=False,
):
    """
    Mini-batch training of `net` on `data`, in place.

    Parameters:

    * `net` (`TrainableNet`)
    * `data` (`Dataset`): must carry teacher logits unless `loss` is
      hard-label only.
    * `loss` (`LossSpec`)
    * `epochs` (int >= 1)
    * `lr` (float, default 1e-3), `batch_size` (int, default 64)
    * `seed` (int): drives the per-epoch shuffling.
    * `optimizer` (str, default `"adam"`): `"adam"`, or `"sgd"` for plain
      full-step gradient descent.
    * `verbose` (bool): show a progress bar and per-epoch losses on stderr.

    Returns `net`.

    Raises `NonFiniteError` as soon as a batch loss or gradient is not
    finite (the caller decides what divergence means).
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    state = AdamState.create(net.weights.size, lr=lr)
    rng = np.random.default_rng(seed)
    progress = tqdm.tqdm(range(epochs), disable=not verbose,
                         dynamic_ncols=True)
    for epoch in progress:
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(data), batch_size):
            index = order[start:start + batch_size]
            z = None if data.teacher_logits is None \
                else data.teacher_logits[index]
            batch_loss, grad = net.loss_and_gradient(
                data.inputs[index], data.hard_labels[index], z, loss,
            )
            if not np.isfinite(batch_loss):
                raise NonFiniteError(f"non-finite training loss in epoch "
                                     f"{epoch}")
            if optimizer == "adam":
                weights, state = adam_step(state, net.weights, grad,
                                           maximize=False)
            elif optimizer == "sgd":
                weights = net.weights - lr * grad
            else:
                raise ValueError(f"unknown optimizer {optimizer!r}")
            net.weights = weights
            total += batch_loss * len(index)
        net.loss_history.append(total / len(data))
        if verbose:
            tqdm.tqdm.write(
                f"[distilrl.networks] epoch {epoch + 1}/{epochs} "
                f"loss {net.loss_history[-1]:.4f}",
                file=sys.stderr,
            )
    return net


def evaluate_accuracy(net, data):
    """
    Fraction of `data` whose argmax logit equals the hard label.
    Raises `ValueError` for an empty dataset.
    """
    if len(data) == 0:
        raise ValueError("cannot measure accuracy on an empty dataset")
    predictions = forward(net, data.inputs).argmax(axis=1)
    return float(np.mean(predictions == data.hard_labels))


# # Persistence


def save_network(net, path):
    """Write weights and BatchNorm buffers to a tensor container."""
    tensors = dict(net.params())
    tensors.update(net.buffers)
    save_tensors(path, tensors)


def load_network(arch, path):
    """Rebuild a network for `arch` from a container written by
    `save_network`. Values come back at float32 precision."""
    net = TrainableNet(arch)
    tensors = load_tensors(path)
    p = net.params()
    for name, view in p.items():
        if name not in tensors or tensors[name].shape != view.shape:
            raise ValueError(f"container {path} lacks tensor {name!r} of "
                             f"shape {view.shape}")
        view[...] = tensors[name]
    for name in net.buffers:
        net.buffers[name] = tensors[name].astype(np.float64)
    return net
