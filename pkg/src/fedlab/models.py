"""Loss models: per-block gradients, full local gradients, and metrics.

Normalization is mean-form throughout: a client's loss is the mean of its
blocks' losses, each block loss is the mean over that block's samples, and a
block gradient is the gradient of that block-mean loss. The optional L2 term
``mu_reg / 2 * ||params||^2`` is added to every block loss (hence also to the
local loss).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, Unsupported


def split_blocks(n, M):
    """Contiguous index blocks of sizes differing by at most one."""
    if M < 1:
        raise InvalidInput(f"M must be >= 1, got {M}")
    if n < M:
        raise InvalidInput(f"cannot split {n} samples into {M} blocks")
    return [np.asarray(b, dtype=np.int64) for b in np.array_split(np.arange(n), M)]


@dataclass
class LocalDataset:
    features: np.ndarray
    labels: np.ndarray
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if len(self.features) != len(self.labels):
            raise InvalidInput("features and labels differ in length")
        if not self.blocks:
            self.blocks = split_blocks(len(self.labels), 1)

    @classmethod
    def with_blocks(cls, features, labels, M=1):
        return cls(features, labels, split_blocks(len(labels), M))

    @property
    def n(self):
        return len(self.labels)

    @property
    def M(self):
        return len(self.blocks)

    def block(self, j):
        if not 0 <= j < self.M:
            raise InvalidInput(f"block index {j} out of range [0, {self.M})")
        idx = self.blocks[j]
        return self.features[idx], self.labels[idx]


class LossModel:
    """Evaluation contract shared by every model.

    Subclasses implement ``_value_and_grad(params, X, y)`` returning the mean
    (unregularized) loss over the given samples and its gradient.
    """

    classification = False
    prox_kind = "l1"

    def __init__(self, mu_reg=0.0):
        if mu_reg < 0:
            raise InvalidInput(f"mu_reg must be >= 0, got {mu_reg}")
        self.mu_reg = float(mu_reg)

    @property
    def param_shape(self):
        raise NotImplementedError

    def init_params(self, rng=None):
        return np.zeros(self.param_shape)

    def _value_and_grad(self, params, X, y):
        raise NotImplementedError

    def _check(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != self.param_shape:
            raise InvalidInput(
                f"params shape {params.shape} does not match model shape {self.param_shape}"
            )
        return params

    def _reg(self, params):
        return 0.5 * self.mu_reg * float(np.sum(params * params))

    def loss(self, params, data):
        """Mean loss over all samples of ``data`` plus the L2 term."""
        params = self._check(params)
        value, _ = self._value_and_grad(params, data.features, data.labels)
        return value + self._reg(params)

    def block_loss(self, params, data, j):
        params = self._check(params)
        X, y = data.block(j)
        value, _ = self._value_and_grad(params, X, y)
        return value + self._reg(params)

    def block_gradient(self, params, data, j):
        params = self._check(params)
        X, y = data.block(j)
        _, grad = self._value_and_grad(params, X, y)
        return grad + self.mu_reg * params

    def full_gradient(self, params, data):
        """Mean of the block gradients, summed in block order."""
        total = self.block_gradient(params, data, 0)
        for j in range(1, data.M):
            total = total + self.block_gradient(params, data, j)
        return total / data.M

    def predict(self, params, features):
        raise Unsupported(f"{type(self).__name__} is not a classifier")

    def accuracy(self, params, data):
        if not self.classification:
            raise Unsupported(f"{type(self).__name__} is not a classifier")
        params = self._check(params)
        pred = self.predict(params, data.features)
        return float(np.mean(pred == data.labels))


def _log1pexp(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_z - shifted[np.arange(len(y)), y]))


class BinaryLogistic(LossModel):
    """Logistic regression on labels {0, 1}, no intercept."""

    classification = True

    def __init__(self, n_features, mu_reg=0.0):
        super().__init__(mu_reg)
        self.n_features = int(n_features)

    @property
    def param_shape(self):
        return (self.n_features,)

    def _value_and_grad(self, w, X, y):
        z = X @ w
        value = float(np.mean(_log1pexp(z) - y * z))
        grad = X.T @ (_sigmoid(z) - y) / len(y)
        return value, grad

    def sample_gradient(self, w, x, y):
        """Gradient of the single-sample loss with respect to ``w``."""
        return (_sigmoid(x @ w) - y) * x

    def predict(self, w, features):
        return (features @ w > 0).astype(np.int64)


class MultinomialLogistic(LossModel):
    """Softmax regression with intercept. Params are ``[W.ravel(), b]``,
    ``W`` of shape (classes, n_features)."""

    classification = True

    def __init__(self, n_features, n_classes, mu_reg=0.0):
        super().__init__(mu_reg)
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)

    @property
    def param_shape(self):
        return (self.n_classes * (self.n_features + 1),)

    def _unpack(self, params):
        k = self.n_classes * self.n_features
        return params[:k].reshape(self.n_classes, self.n_features), params[k:]

    def _value_and_grad(self, params, X, y):
        W, b = self._unpack(params)
        logits = X @ W.T + b
        value = _cross_entropy(logits, y)
        p = softmax(logits)
        p[np.arange(len(y)), y] -= 1.0
        p /= len(y)
        return value, np.concatenate([(p.T @ X).ravel(), p.sum(axis=0)])

    def predict(self, params, features):
        W, b = self._unpack(params)
        return np.argmax(features @ W.T + b, axis=1)


class TwoLayerMLP(LossModel):
    """Fully connected net: two ReLU hidden layers and a softmax output."""

    classification = True

    def __init__(self, n_features, n_classes, hidden=200, mu_reg=0.0):
        super().__init__(mu_reg)
        self.sizes = [int(n_features), int(hidden), int(hidden), int(n_classes)]

    @property
    def param_shape(self):
        n = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        return (n,)

    def _unpack(self, params):
        layers, offset = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            W = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = params[offset:offset + fan_out]
            offset += fan_out
            layers.append((W, b))
        return layers

    def init_params(self, rng=None):
        rng = np.random.default_rng(rng)
        chunks = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def _forward(self, params, X):
        acts = [X]
        layers = self._unpack(params)
        h = X
        for W, b in layers[:-1]:
            h = np.maximum(h @ W + b, 0.0)
            acts.append(h)
        W, b = layers[-1]
        return layers, acts, h @ W + b

    def _value_and_grad(self, params, X, y):
        layers, acts, logits = self._forward(params, X)
        value = _cross_entropy(logits, y)
        delta = softmax(logits)
        delta[np.arange(len(y)), y] -= 1.0
        delta /= len(y)
        grads = []
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            a = acts[k]
            grads.append(delta.sum(axis=0))
            grads.append((a.T @ delta).ravel())
            if k > 0:
                delta = (delta @ W.T) * (a > 0)
        return value, np.concatenate(grads[::-1])

    def predict(self, params, features):
        return np.argmax(self._forward(params, features)[2], axis=1)


class LeastSquares(LossModel):
    """Per-sample loss ``0.5 * (w @ x - y)^2``."""

    def __init__(self, n_features, mu_reg=0.0):
        super().__init__(mu_reg)
        self.n_features = int(n_features)

    @property
    def param_shape(self):
        return (self.n_features,)

    def _value_and_grad(self, w, X, y):
        r = X @ w - y
        return 0.5 * float(np.mean(r * r)), X.T @ r / len(y)


class TraceRegression(LossModel):
    """Low-rank matrix estimation: per-sample loss ``(<X, D> - y)^2`` with
    ``D`` a d-by-d sensing matrix. Regularized with the nuclear norm."""

    prox_kind = "nuclear"

    def __init__(self, d, mu_reg=0.0):
        super().__init__(mu_reg)
        self.d = int(d)

    @property
    def param_shape(self):
        return (self.d, self.d)

    def _value_and_grad(self, X, D, y):
        r = np.einsum("nij,ij->n", D, X) - y
        value = float(np.mean(r * r))
        grad = 2.0 * np.einsum("n,nij->ij", r, D) / len(y)
        return value, grad


MODELS = {
    "binary_logistic": BinaryLogistic,
    "multinomial_logistic": MultinomialLogistic,
    "mlp": TwoLayerMLP,
    "least_squares": LeastSquares,
    "trace_regression": TraceRegression,
}
