"""Softmax-linear and 3-layer ReLU MLP classifiers with exact per-sample grads.

Parameters live in one flat float64 vector. The linear head stores a
``(classes, features + 1)`` matrix row-major with the bias as the last
column. The MLP stores ``W1, b1, W2, b2, W3, b3`` in that order, each weight
matrix shaped ``(fan_out, fan_in)``.

Every per-sample gradient of a dense layer is a rank-one outer product, so
norms and clipped sums are computed from the factors without materializing an
``(n, P)`` gradient matrix. The ``*_lanes`` methods evaluate many independent
parameter vectors (one per training run) at once.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from subaudit import numerics


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _onehot(y: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((y.size, classes))
    out[np.arange(y.size), y] = 1.0
    return out


def _clip_scales(sq_norms: np.ndarray, clip: float) -> np.ndarray:
    norms = np.sqrt(sq_norms)
    return np.minimum(1.0, clip / np.maximum(norms, 1e-300))


@dataclasses.dataclass(frozen=True)
class LinearSoftmax:
    """Multinomial logistic regression head."""

    n_features: int
    n_classes: int
    kind = 'linear'

    @property
    def n_params(self) -> int:
        return self.n_classes * (self.n_features + 1)

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(self.n_params)

    def _weights(self, theta):
        return theta.reshape(self.n_classes, self.n_features + 1)

    def logits(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        w = self._weights(theta)
        return X @ w[:, :-1].T + w[:, -1]

    def per_sample_grads(self, theta, X, y) -> np.ndarray:
        err = softmax(self.logits(theta, X)) - _onehot(y, self.n_classes)
        xt = np.hstack([X, np.ones((X.shape[0], 1))])
        return (err[:, :, None] * xt[:, None, :]).reshape(X.shape[0], -1)

    def logits_lanes(self, thetas: np.ndarray, X: np.ndarray) -> np.ndarray:
        w = thetas.reshape(-1, self.n_classes, self.n_features + 1)
        return np.matmul(X, w[:, :, :-1].transpose(0, 2, 1)) + w[:, None, :, -1]

    def clipped_grad_sum_lanes(self, thetas, X, y, weights, clip) -> np.ndarray:
        """sum_i weights[l, i] * clip(grad_i(theta_l)) for every lane l."""
        n = X.shape[0]
        xt = np.hstack([X, np.ones((n, 1))])
        w = thetas.reshape(-1, self.n_classes, self.n_features + 1)
        # (lanes, classes, n): reductions over classes stay vectorized over n.
        err = np.matmul(w, np.ascontiguousarray(xt.T))
        err -= err.max(axis=1, keepdims=True)
        np.exp(err, out=err)
        err /= err.sum(axis=1, keepdims=True)
        err[:, y, np.arange(n)] -= 1.0
        sq = np.einsum('lkn,lkn->ln', err, err) * (xt**2).sum(axis=1)
        err *= (_clip_scales(sq, clip) * weights)[:, None, :]
        return np.matmul(err, xt).reshape(thetas.shape[0], -1)


@dataclasses.dataclass(frozen=True)
class MLP3:
    """Three fully connected layers with ReLU activations."""

    n_features: int
    n_classes: int
    hidden: tuple[int, int] = (128, 128)
    kind = 'mlp3'

    @property
    def _shapes(self):
        h1, h2 = self.hidden
        return [(h1, self.n_features), (h1,), (h2, h1), (h2,),
                (self.n_classes, h2), (self.n_classes,)]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self._shapes)

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """He-normal weights and zero biases."""
        if rng is None:
            raise ValueError('MLP initialization needs a random generator')
        parts = []
        for shape in self._shapes:
            if len(shape) == 2:
                parts.append(rng.standard_normal(shape).ravel()
                             * np.sqrt(2.0 / shape[1]))
            else:
                parts.append(np.zeros(shape))
        return np.concatenate(parts)

    def unpack(self, theta):
        out, offset = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(theta[..., offset:offset + size].reshape(
                theta.shape[:-1] + shape))
            offset += size
        return out

    def _forward(self, theta, X):
        w1, b1, w2, b2, w3, b3 = self.unpack(theta)
        a1 = X @ w1.T + b1
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ w2.T + b2
        h2 = np.maximum(a2, 0.0)
        return h1, h2, h2 @ w3.T + b3

    def logits(self, theta, X):
        return self._forward(theta, X)[2]

    def _deltas(self, theta, X, y):
        _, _, w2, _, w3, _ = self.unpack(theta)
        h1, h2, z = self._forward(theta, X)
        d3 = softmax(z)
        d3[np.arange(y.size), y] -= 1.0
        d2 = (d3 @ w3) * (h2 > 0)
        d1 = (d2 @ w2) * (h1 > 0)
        return (d1, X), (d2, h1), (d3, h2)

    def per_sample_grads(self, theta, X, y) -> np.ndarray:
        n = X.shape[0]
        parts = []
        for delta, inp in self._deltas(theta, X, y):
            parts.append((delta[:, :, None] * inp[:, None, :]).reshape(n, -1))
            parts.append(delta)
        return np.hstack(parts)

    def clipped_grad_sum(self, theta, X, y, weights, clip) -> np.ndarray:
        layers = self._deltas(theta, X, y)
        sq = sum((d**2).sum(axis=1) * ((a**2).sum(axis=1) + 1.0)
                 for d, a in layers)
        s = _clip_scales(sq, clip) * weights
        parts = []
        for delta, inp in layers:
            ds = delta * s[:, None]
            parts.append((ds.T @ inp).ravel())
            parts.append(ds.sum(axis=0))
        return np.concatenate(parts)

    def logits_lanes(self, thetas, X):
        return np.stack([self.logits(t, X) for t in thetas])

    def clipped_grad_sum_lanes(self, thetas, X, y, weights, clip):
        return np.stack([self.clipped_grad_sum(t, X, y, w, clip)
                         for t, w in zip(thetas, weights)])


ARCHITECTURES = {'linear': LinearSoftmax, 'mlp3': MLP3}


@dataclasses.dataclass
class Model:
    """An architecture together with its current flat parameter vector."""

    arch: LinearSoftmax | MLP3
    params: np.ndarray

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.arch.n_params,):
            raise ValueError(
                f'{self.arch.kind} model expects {self.arch.n_params} '
                f'parameters, got shape {self.params.shape}')

    @property
    def kind(self) -> str:
        return self.arch.kind

    def copy(self) -> 'Model':
        return Model(self.arch, self.params.copy())


def make_model(kind: str, n_features: int, n_classes: int, *,
               hidden: tuple[int, int] = (128, 128),
               rng: np.random.Generator | None = None) -> Model:
    if kind == 'linear':
        arch = LinearSoftmax(n_features, n_classes)
    elif kind == 'mlp3':
        arch = MLP3(n_features, n_classes, tuple(hidden))
    else:
        raise ValueError(f'unknown model kind {kind!r}; expected linear or mlp3')
    return Model(arch, arch.init_params(rng))


def _as_matrix(model: Model, x) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.arch.n_features:
        raise ValueError(
            f'expected {model.arch.n_features} features, got {X.shape[1]}')
    return X, single


def forward_logits(model: Model, x) -> np.ndarray:
    X, single = _as_matrix(model, x)
    out = model.arch.logits(model.params, X)
    return out[0] if single else out


def per_sample_grads(model: Model, X, y) -> np.ndarray:
    """Cross-entropy gradient of every row of `X`, shape ``(n, n_params)``."""
    X, _ = _as_matrix(model, X)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    grads = model.arch.per_sample_grads(model.params, X, y)
    return numerics.check_finite(grads, 'per-sample gradient')


def per_sample_grad(model: Model, sample) -> np.ndarray:
    return per_sample_grads(model, sample.x, [sample.y])[0]


def cross_entropy(model: Model, X, y) -> np.ndarray:
    """Per-sample cross-entropy losses."""
    X, _ = _as_matrix(model, X)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    z = model.arch.logits(model.params, X)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return lse - z[np.arange(y.size), y]


def accuracy(model: Model, X, y) -> float:
    return float(np.mean(np.argmax(forward_logits(model, X), axis=-1) == y))
