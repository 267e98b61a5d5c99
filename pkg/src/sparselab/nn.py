"""Forward and backward passes for masked MLPs with batch or layer normalization.

Everything operates on float64 arrays with samples along axis 0. Weight
matrices are stored ``out x in`` so row ``i`` holds the incoming weights of
neuron ``i`` and its mask row sum is that neuron's fan-in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng

__all__ = [
    "SparseLinear",
    "BatchNorm",
    "LayerNorm",
    "ReLU",
    "BnCache",
    "LnCache",
    "MLP",
    "linear_forward",
    "linear_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "layernorm_forward",
    "layernorm_backward",
    "relu_forward",
    "relu_backward",
    "mse_loss",
    "softmax_cross_entropy",
    "mlp_forward_backward",
    "build_mlp",
]


def _check_cols(x: np.ndarray, n: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != n:
        raise ValueError(f"dimension mismatch: {what} expects {n} columns, got shape {x.shape}")


# ---------------------------------------------------------------- linear ---

class SparseLinear:
    """Linear map whose weights are multiplied by a fixed binary mask."""

    def __init__(self, weights, mask=None, bias=None):
        weights = np.array(weights, dtype=np.float64)
        if weights.ndim != 2:
            raise ValueError("weights must be 2-D (out x in)")
        if mask is None:
            mask = np.ones_like(weights)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != weights.shape:
            raise ValueError(f"mask shape {mask.shape} != weight shape {weights.shape}")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        self.mask = mask.copy()
        self.weights = weights * self.mask
        self.bias = None if bias is None else np.array(bias, dtype=np.float64).reshape(-1)
        if self.bias is not None and self.bias.shape[0] != weights.shape[0]:
            raise ValueError("bias length must equal out_neurons")
        self.grads: dict[str, np.ndarray] = {}
        self.dense_grad: np.ndarray | None = None
        self._h: np.ndarray | None = None

    @property
    def out_neurons(self) -> int:
        return self.weights.shape[0]

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    def set_mask(self, mask) -> None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != self.weights.shape:
            raise ValueError("mask shape mismatch")
        self.mask = mask.copy()
        self.weights *= self.mask

    def params(self) -> dict[str, np.ndarray]:
        p = {"weight": self.weights}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, h, train: bool = True) -> np.ndarray:
        self._h = h
        return linear_forward(self, h)

    def backward(self, d_out) -> np.ndarray:
        dW, dh, db = linear_backward(self, self._h, d_out)
        self.grads = {"weight": dW}
        if db is not None:
            self.grads["bias"] = db
        # gradient with the mask lifted, used for gradient-based regrowth
        self.dense_grad = d_out.T @ self._h
        return dh


def linear_forward(layer: SparseLinear, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h.reshape(1, -1)
    _check_cols(h, layer.in_features, "linear_forward")
    x = h @ (layer.weights * layer.mask).T
    if layer.bias is not None:
        x = x + layer.bias
    return x


def linear_backward(layer: SparseLinear, h, d_out):
    """Returns ``(dW, dh, db)``; ``dW`` is zero on masked entries, ``db`` is None without bias."""
    h = np.asarray(h, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    _check_cols(h, layer.in_features, "linear_backward input")
    _check_cols(d_out, layer.out_neurons, "linear_backward upstream gradient")
    if h.shape[0] != d_out.shape[0]:
        raise ValueError("batch size mismatch between input and upstream gradient")
    w_eff = layer.weights * layer.mask
    dW = (d_out.T @ h) * layer.mask
    dh = d_out @ w_eff
    db = d_out.sum(axis=0) if layer.bias is not None else None
    return dW, dh, db


# --------------------------------------------------------- normalization ---

@dataclass
class BnCache:
    input: np.ndarray
    mean: np.ndarray
    std: np.ndarray  # sqrt(var + eps)
    xhat: np.ndarray


@dataclass
class LnCache:
    input: np.ndarray
    mean: np.ndarray  # per sample
    std: np.ndarray
    xhat: np.ndarray


def _normalize(x: np.ndarray, axis: int, eps: float):
    mean = x.mean(axis=axis, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=axis, keepdims=True)
    std = np.sqrt(var + eps)
    return mean, std, (x - mean) / std


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, std: np.ndarray, axis: int) -> np.ndarray:
    # (1/std) * (g - mean(g) - xhat * mean(g * xhat)), exact including eps
    return (g - g.mean(axis=axis, keepdims=True)
            - xhat * (g * xhat).mean(axis=axis, keepdims=True)) / std


class BatchNorm:
    def __init__(self, n: int, eps: float = 1e-5, momentum: float = 0.1):
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.gamma = np.ones(n)
        self.beta = np.zeros(n)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.mode = "train"
        self.cache: BnCache | None = None
        self.grads: dict[str, np.ndarray] = {}

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x, train: bool = True) -> np.ndarray:
        self.mode = "train" if train else "eval"
        y, self.cache = batchnorm_forward(self, x)
        return y

    def backward(self, d_y) -> np.ndarray:
        if self.cache is None:
            # eval mode: affine in x
            self.grads = {"gamma": np.zeros_like(self.gamma), "beta": d_y.sum(axis=0)}
            return d_y * self.gamma / np.sqrt(self.running_var + self.eps)
        d_x, d_gamma, d_beta = batchnorm_backward(d_y, self.cache, self.gamma)
        self.grads = {"gamma": d_gamma, "beta": d_beta}
        return d_x


def batchnorm_forward(bn: BatchNorm, x):
    """Train mode uses biased batch statistics and returns a cache; eval mode returns ``(y, None)``."""
    x = np.asarray(x, dtype=np.float64)
    _check_cols(x, bn.gamma.shape[0], "batchnorm_forward")
    if bn.eps <= 0:
        raise ValueError(f"eps must be positive, got {bn.eps}")
    if bn.mode == "eval":
        xhat = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        return bn.gamma * xhat + bn.beta, None
    m = x.shape[0]
    if m < 2:
        raise ValueError("batchnorm in train mode needs at least 2 samples")
    mean, std, xhat = _normalize(x, 0, bn.eps)
    var = std[0] ** 2 - bn.eps
    bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mean[0]
    bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * var * m / (m - 1)
    return bn.gamma * xhat + bn.beta, BnCache(x, mean[0], std[0], xhat)


def batchnorm_backward(d_y, cache: BnCache, gamma):
    d_y = np.asarray(d_y, dtype=np.float64)
    if d_y.shape != cache.xhat.shape:
        raise ValueError(f"dimension mismatch: {d_y.shape} vs cached {cache.xhat.shape}")
    d_gamma = (d_y * cache.xhat).sum(axis=0)
    d_beta = d_y.sum(axis=0)
    d_x = _normalize_backward(d_y * gamma, cache.xhat, cache.std, axis=0)
    return d_x, d_gamma, d_beta


class LayerNorm:
    def __init__(self, n: int, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        if n < 2:
            raise ValueError("layernorm needs at least 2 features")
        self.gamma = np.ones(n)
        self.beta = np.zeros(n)
        self.eps = float(eps)
        self.cache: LnCache | None = None
        self.grads: dict[str, np.ndarray] = {}

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x, train: bool = True) -> np.ndarray:
        y, self.cache = layernorm_forward(self, x)
        return y

    def backward(self, d_y) -> np.ndarray:
        d_x, d_gamma, d_beta = layernorm_backward(d_y, self.cache, self.gamma)
        self.grads = {"gamma": d_gamma, "beta": d_beta}
        return d_x


def layernorm_forward(ln: LayerNorm, x):
    x = np.asarray(x, dtype=np.float64)
    _check_cols(x, ln.gamma.shape[0], "layernorm_forward")
    if x.shape[1] < 2:
        raise ValueError("layernorm needs at least 2 features")
    mean, std, xhat = _normalize(x, 1, ln.eps)
    return ln.gamma * xhat + ln.beta, LnCache(x, mean[:, 0], std[:, 0], xhat)


def layernorm_backward(d_y, cache: LnCache, gamma):
    """Per-sample gradients.

    For feature ``i`` of one sample with ``N`` features,
    ``dL/dx_i = sum_j g_j [(delta_ij - 1/N)/sigma - (x_i-mu)(x_j-mu)/(N sigma^3)]``
    with ``g_j = gamma_j dL/dy_j``; this collapses to the same centred form
    as batch norm with the roles of the axes swapped.
    """
    d_y = np.asarray(d_y, dtype=np.float64)
    if d_y.shape != cache.xhat.shape:
        raise ValueError(f"dimension mismatch: {d_y.shape} vs cached {cache.xhat.shape}")
    d_gamma = (d_y * cache.xhat).sum(axis=0)
    d_beta = d_y.sum(axis=0)
    d_x = _normalize_backward(d_y * gamma, cache.xhat, cache.std[:, None], axis=1)
    return d_x, d_gamma, d_beta


# ------------------------------------------------------------ activation ---

def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, d_out) -> np.ndarray:
    # subgradient at 0 is 0
    return np.where(np.asarray(x) > 0, d_out, 0.0)


class ReLU:
    def __init__(self):
        self._x = None
        self.grads: dict[str, np.ndarray] = {}

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, train: bool = True) -> np.ndarray:
        self._x = x
        return relu_forward(x)

    def backward(self, d_out) -> np.ndarray:
        return relu_backward(self._x, d_out)


# ----------------------------------------------------------------- losses ---

def mse_loss(pred, target):
    """``(1/2m) sum (target - pred)^2`` and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    m = pred.shape[0]
    diff = target - pred
    return float((diff ** 2).sum() / (2 * m)), -diff / m


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch for integer ``labels``; returns ``(loss, dlogits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    m = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(m), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(m), labels] -= 1.0
    return float(loss), grad / m


# -------------------------------------------------------------------- mlp ---

class MLP:
    """Ordered layer stack with a terminal loss (``"ce"`` or ``"mse"``).

    Parameters and gradients are addressed as ``"<layer index>.<name>"``.
    """

    def __init__(self, layers, loss: str = "ce"):
        if loss not in ("ce", "mse"):
            raise ValueError(f"unknown loss {loss!r}")
        self.layers = list(layers)
        self.loss = loss
        width = None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, SparseLinear):
                if width is not None and layer.in_features != width:
                    raise ValueError(f"layer {i} expects {layer.in_features} inputs, previous width is {width}")
                width = layer.out_neurons
            elif isinstance(layer, (BatchNorm, LayerNorm)):
                if width is not None and layer.gamma.shape[0] != width:
                    raise ValueError(f"layer {i} normalizes {layer.gamma.shape[0]} features, previous width is {width}")

    def params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params().items()}

    def sparse_layers(self) -> dict[str, SparseLinear]:
        return {f"{i}.weight": layer for i, layer in enumerate(self.layers) if isinstance(layer, SparseLinear)}

    def masks(self) -> dict[str, np.ndarray]:
        return {k: layer.mask for k, layer in self.sparse_layers().items()}

    def forward(self, X, train: bool = True) -> np.ndarray:
        out = np.asarray(X, dtype=np.float64)
        for layer in self.layers:
            out = layer.forward(out, train)
        return out

    def loss_and_grad(self, out, targets):
        if self.loss == "ce":
            return softmax_cross_entropy(out, targets)
        return mse_loss(out, targets)

    def backward(self, d_out) -> np.ndarray:
        d = d_out
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def dense_grads(self) -> dict[str, np.ndarray]:
        return {k: layer.dense_grad for k, layer in self.sparse_layers().items()}

    def predict(self, X) -> np.ndarray:
        return self.forward(X, train=False)


def mlp_forward_backward(model: MLP, batch):
    """Loss and exact gradients of every parameter for one ``(X, targets)`` batch."""
    X, targets = batch
    out = model.forward(X, train=True)
    loss, d_out = model.loss_and_grad(out, targets)
    model.backward(d_out)
    return loss, model.grads()


def build_mlp(dims, rng: Rng, normalization: str = "batchnorm", masks=None,
              init: str = "dense-kaiming", loss: str = "ce", eps: float = 1e-5,
              momentum: float = 0.1, last_sparse: bool = False) -> MLP:
    """Stack ``Linear -> [Norm] -> ReLU`` blocks ending in a plain linear readout.

    ``masks`` maps hidden-layer position (0, 1, ...) to a binary mask; the
    readout stays dense unless ``last_sparse`` is set and a mask is given for it.
    Weights are drawn from N(0, std^2) with std set by :func:`sparse_init_scale`.
    """
    from .sparsity import sparse_init_scale

    masks = masks or {}
    layers = []
    n_linear = len(dims) - 1
    for k in range(n_linear):
        fan_in, fan_out = dims[k], dims[k + 1]
        mask = masks.get(k)
        if k == n_linear - 1 and not last_sparse:
            mask = None
        if mask is None:
            mask = np.ones((fan_out, fan_in))
        std = sparse_init_scale(mask, init)
        w = rng.gaussian(fan_out, fan_in) * std[:, None]
        layers.append(SparseLinear(w, mask))
        if k < n_linear - 1:
            if normalization == "batchnorm":
                layers.append(BatchNorm(fan_out, eps=eps, momentum=momentum))
            elif normalization == "layernorm":
                layers.append(LayerNorm(fan_out, eps=eps))
            elif normalization != "none":
                raise ValueError(f"unknown normalization {normalization!r}")
            layers.append(ReLU())
    return MLP(layers, loss=loss)
