"""Minimal dense neural-network engine: forward, backprop, SGD.

Tensors are plain ``numpy.float64`` arrays. The engine supports MLPs and
small CNNs (Dense, Conv2d, MaxPool, ReLU) with softmax cross-entropy loss,
which is enough for the MNIST-scale reference architectures.

Two binary masks ride along with every weight matrix:

  * ``trainable``  — entries with 0 are never changed by an optimizer step
                     (bit-identical across any number of steps);
  * ``sparsity``   — entries with 0 are forced to exactly 0.0 after every
                     optimizer step (pruned connections).

Weight convention: ``y = x @ W + b`` with ``W`` shaped ``[in, out]``.
Conv2d stores its kernel as the equivalent im2col matrix, shaped
``[k*k*in_ch, out]`` with patch elements ordered (ky, kx, channel); images
are channels-last ``[B, H, W, C]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class EngineError(Exception):
    """Base class for engine failures."""


class DimensionError(EngineError):
    """Input shape incompatible with a layer; message names the layer."""


class NumericalError(EngineError):
    """Non-finite values produced by an engine operation."""


@dataclass
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 10

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    """Common layer protocol: forward caches what backward needs."""

    name = "layer"

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        """Return (grad_input, param_grads-or-None)."""
        raise NotImplementedError

    def has_params(self) -> bool:
        return False

    def param_count(self) -> int:
        """Weight parameters surviving the sparsity mask (biases excluded)."""
        return 0

    def apply_sgd(self, grads: dict, cfg: SgdConfig) -> None:
        raise NotImplementedError(f"{self.name} has no parameters")


class Dense(Layer):
    """Fully connected layer, y = x @ W + b. Flattens non-2D inputs."""

    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int, *, rng: np.random.Generator | None = None,
                 weights: np.ndarray | None = None, bias: np.ndarray | None = None,
                 name: str | None = None):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.name = name or f"dense({in_dim}x{out_dim})"
        if weights is not None:
            self.w = np.array(weights, dtype=np.float64)
            if self.w.shape != (in_dim, out_dim):
                raise DimensionError(f"{self.name}: weights shape {self.w.shape}")
        else:
            if rng is None:
                raise ValueError(f"{self.name}: need rng or explicit weights")
            self.w = he_uniform(rng, in_dim, (in_dim, out_dim))
        self.b = np.zeros(out_dim) if bias is None else np.array(bias, dtype=np.float64)
        self.trainable = np.ones_like(self.w)
        self.sparsity = np.ones_like(self.w)
        self.bias_trainable = True
        self.vel_w: np.ndarray | None = None
        self.vel_b: np.ndarray | None = None
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.in_dim:
            raise DimensionError(f"{self.name}: got input width {x2.shape[1]}, expected {self.in_dim}")
        self._x = x2
        self._xshape = x.shape
        return x2 @ self.w + self.b

    def backward(self, grad: np.ndarray):
        gw = self._x.T @ grad
        gb = grad.sum(axis=0)
        return (grad @ self.w.T).reshape(self._xshape), {"w": gw, "b": gb}

    def has_params(self) -> bool:
        return True

    def param_count(self) -> int:
        return int(np.count_nonzero(self.sparsity))

    def apply_sgd(self, grads: dict, cfg: SgdConfig) -> None:
        if self.vel_w is None:
            self.vel_w = np.zeros_like(self.w)
            self.vel_b = np.zeros_like(self.b)
        self.vel_w = cfg.momentum * self.vel_w + grads["w"]
        self.vel_b = cfg.momentum * self.vel_b + grads["b"]
        np.subtract(self.w, cfg.learning_rate * self.vel_w, out=self.w,
                    where=self.trainable != 0)
        self.w[self.sparsity == 0] = 0.0
        if self.bias_trainable:
            self.b -= cfg.learning_rate * self.vel_b


class Conv2d(Layer):
    """Valid convolution via im2col; kernel stored as [k*k*in_ch, out_ch]."""

    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, *,
                 rng: np.random.Generator | None = None, weights: np.ndarray | None = None,
                 name: str | None = None):
        self.in_ch, self.out_ch, self.k, self.stride = int(in_ch), int(out_ch), int(k), int(stride)
        self.name = name or f"conv2d({in_ch}->{out_ch},k={k},s={stride})"
        fan_in = k * k * in_ch
        if weights is not None:
            self.w = np.array(weights, dtype=np.float64)
            if self.w.shape != (fan_in, out_ch):
                raise DimensionError(f"{self.name}: weights shape {self.w.shape}")
        else:
            if rng is None:
                raise ValueError(f"{self.name}: need rng or explicit weights")
            self.w = he_uniform(rng, fan_in, (fan_in, out_ch))
        self.b = np.zeros(out_ch)
        self.trainable = np.ones_like(self.w)
        self.sparsity = np.ones_like(self.w)
        self.bias_trainable = True
        self.vel_w: np.ndarray | None = None
        self.vel_b: np.ndarray | None = None
        self._cols: np.ndarray | None = None
        self._xshape: tuple | None = None

    def _to_nhwc(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 3 and self.in_ch == 1:
            return x[..., None]
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise DimensionError(f"{self.name}: got input shape {x.shape}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = self._to_nhwc(x)
        b, h, w, _ = x.shape
        if h < self.k or w < self.k:
            raise DimensionError(f"{self.name}: input {h}x{w} smaller than kernel {self.k}")
        win = sliding_window_view(x, (self.k, self.k), axis=(1, 2))  # (B, H', W', C, k, k)
        win = win[:, :: self.stride, :: self.stride]
        win = win.transpose(0, 1, 2, 4, 5, 3)  # (B, OH, OW, k, k, C)
        oh, ow = win.shape[1], win.shape[2]
        cols = win.reshape(b * oh * ow, self.k * self.k * self.in_ch)
        self._cols = cols
        self._xshape = x.shape
        y = cols @ self.w + self.b
        return y.reshape(b, oh, ow, self.out_ch)

    def backward(self, grad: np.ndarray):
        b, oh, ow, _ = grad.shape
        g2 = grad.reshape(b * oh * ow, self.out_ch)
        gw = self._cols.T @ g2
        gb = g2.sum(axis=0)
        gcols = (g2 @ self.w.T).reshape(b, oh, ow, self.k, self.k, self.in_ch)
        gx = np.zeros(self._xshape)
        for ky in range(self.k):
            for kx in range(self.k):
                gx[:, ky : ky + oh * self.stride : self.stride,
                   kx : kx + ow * self.stride : self.stride] += gcols[:, :, :, ky, kx]
        return gx, {"w": gw, "b": gb}

    def has_params(self) -> bool:
        return True

    def param_count(self) -> int:
        return int(np.count_nonzero(self.sparsity))

    apply_sgd = Dense.apply_sgd


class MaxPool(Layer):
    """Non-overlapping k x k max pooling (stride = k); trailing rows/cols crop."""

    kind = "maxpool"

    def __init__(self, k: int, name: str | None = None):
        self.k = int(k)
        self.name = name or f"maxpool({k})"
        self._argmax = None
        self._xshape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4:
            raise DimensionError(f"{self.name}: expected NHWC input, got shape {x.shape}")
        b, h, w, c = x.shape
        k = self.k
        oh, ow = h // k, w // k
        if oh == 0 or ow == 0:
            raise DimensionError(f"{self.name}: input {h}x{w} smaller than pool {k}")
        tiles = x[:, : oh * k, : ow * k].reshape(b, oh, k, ow, k, c)
        tiles = tiles.transpose(0, 1, 3, 5, 2, 4).reshape(b, oh, ow, c, k * k)
        self._argmax = tiles.argmax(axis=-1)
        self._xshape = x.shape
        return tiles.max(axis=-1)

    def backward(self, grad: np.ndarray):
        b, oh, ow, c = grad.shape
        k = self.k
        gt = np.zeros((b, oh, ow, c, k * k))
        np.put_along_axis(gt, self._argmax[..., None], grad[..., None], axis=-1)
        gt = gt.reshape(b, oh, ow, c, k, k).transpose(0, 1, 4, 2, 5, 3)
        gx = np.zeros(self._xshape)
        gx[:, : oh * k, : ow * k] = gt.reshape(b, oh * k, ow * k, c)
        return gx, None


class ReLU(Layer):
    kind = "relu"
    name = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad: np.ndarray):
        return grad * self._mask, None


class Network:
    """Ordered layer list plus the name of its deterministic init stream."""

    def __init__(self, layers: list[Layer], rng_label: str = "net"):
        self.layers = list(layers)
        self.rng_label = rng_label

    def weight_layers(self) -> list[tuple[int, Layer]]:
        return [(i, l) for i, l in enumerate(self.layers) if l.has_params()]

    def param_count(self) -> int:
        return sum(l.param_count() for l in self.layers)


def mlp(dims: list[int], rng: np.random.Generator, rng_label: str = "mlp") -> Network:
    """ReLU MLP over the given widths, e.g. [784, 300, 100, 10]."""
    layers: list[Layer] = []
    for i in range(len(dims) - 1):
        layers.append(Dense(dims[i], dims[i + 1], rng=rng, name=f"dense{i}"))
        if i < len(dims) - 2:
            layers.append(ReLU())
    return Network(layers, rng_label)


# ---------------------------------------------------------------------------
# Forward / loss / backward
# ---------------------------------------------------------------------------


def forward(net: Network, batch: np.ndarray) -> list[np.ndarray]:
    """All intermediate activations: [input, layer0 out, ..., logits]."""
    acts = [batch]
    x = batch
    for layer in net.layers:
        x = layer.forward(x)
        if not np.isfinite(x).all():
            raise NumericalError(f"non-finite activations out of {layer.name}")
        acts.append(x)
    return acts


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. logits."""
    if logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"batch size {logits.shape[0]} != label count {labels.shape[0]}")
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(-np.mean(np.log(p[idx, labels] + 1e-300)))
    grad = p.copy()
    grad[idx, labels] -= 1.0
    grad /= n
    return loss, grad


def backward(net: Network, activations: list[np.ndarray], labels: np.ndarray,
             return_activation_grads: bool = False):
    """Per-layer parameter gradients for mean softmax cross-entropy.

    Gradients are computed for every entry, including ones whose trainability
    mask is 0; the mask is consulted only at update time. With
    ``return_activation_grads`` the loss gradient w.r.t. each layer's output
    is returned as well (used by saliency scoring).
    """
    logits = activations[-1]
    _, grad = softmax_cross_entropy(logits, labels)
    grads: list[dict | None] = [None] * len(net.layers)
    act_grads: list[np.ndarray | None] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        act_grads[i] = grad
        grad, pg = net.layers[i].backward(grad)
        grads[i] = pg
    if return_activation_grads:
        return grads, act_grads
    return grads


def sgd_step(net: Network, grads: list, cfg: SgdConfig) -> None:
    """Momentum-SGD update respecting trainability and sparsity masks."""
    for layer, g in zip(net.layers, grads):
        if g is not None:
            layer.apply_sgd(g, cfg)


def loss_on_batch(net: Network, batch: np.ndarray, labels: np.ndarray) -> float:
    acts = forward(net, batch)
    loss, _ = softmax_cross_entropy(acts[-1], labels)
    return loss


# ---------------------------------------------------------------------------
# Evaluation / verification
# ---------------------------------------------------------------------------


def predict(net: Network, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], batch_size):
        logits = forward(net, x[s : s + batch_size])[-1]
        out[s : s + batch_size] = np.argmax(logits, axis=1)  # ties -> lowest index
    return out


def evaluate(net: Network, dataset) -> float:
    """Fraction of argmax-correct predictions (ties to the lowest class)."""
    x, y = dataset.images, dataset.labels
    if x.shape[0] == 0:
        raise ValueError("evaluate: empty dataset")
    return float(np.mean(predict(net, x) == y))


def gradient_check(net: Network, batch: np.ndarray, labels: np.ndarray,
                   eps: float = 1e-5, max_params: int = 200,
                   rng: np.random.Generator | None = None) -> float:
    """Worst relative error, central finite differences vs. analytic gradient.

    Samples up to ``max_params`` coordinates across all weights and biases
    (at least 200 by default, or every parameter if fewer exist).
    """
    rng = rng or np.random.default_rng(0)
    acts = forward(net, batch)
    grads = backward(net, acts, labels)
    worst = 0.0
    for (i, layer) in net.weight_layers():
        for pname in ("w", "b"):
            arr = getattr(layer, pname)
            analytic = grads[i][pname]
            n = arr.size
            k = min(n, max(1, max_params // (2 * len(net.weight_layers()))))
            flat_idx = rng.choice(n, size=k, replace=False)
            for fi in flat_idx:
                mi = np.unravel_index(fi, arr.shape)
                orig = arr[mi]
                arr[mi] = orig + eps
                lp = loss_on_batch(net, batch, labels)
                arr[mi] = orig - eps
                lm = loss_on_batch(net, batch, labels)
                arr[mi] = orig
                num = (lp - lm) / (2 * eps)
                ana = analytic[mi]
                denom = max(abs(num), abs(ana), 1e-10)
                worst = max(worst, abs(num - ana) / denom)
    return worst


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def train_sgd(net: Network, train, cfg: SgdConfig, shuffle_rng: np.random.Generator,
              val=None, epoch_hook=None) -> list[dict]:
    """Plain epoch loop; returns one metrics row per epoch."""
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in iterate_minibatches(len(train.labels), cfg.batch_size, shuffle_rng):
            xb, yb = train.images[idx], train.labels[idx]
            acts = forward(net, xb)
            loss, _ = softmax_cross_entropy(acts[-1], yb)
            grads = backward(net, acts, yb)
            sgd_step(net, grads, cfg)
            losses.append(loss)
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        if val is not None:
            row["val_accuracy"] = evaluate(net, val)
        history.append(row)
        if epoch_hook is not None:
            epoch_hook(epoch + 1, row)
    return history
