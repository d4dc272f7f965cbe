"""Canary construction for the gradient-space and input-space scenarios.

Scenario tags:

* ``S2`` crafted gradient pair ``(g_z, g_z')`` on the least-updated
  coordinate of a reference run,
* ``S3`` crafted input ``(x', y)`` whose gradient opposes the target's,
* ``S4`` mislabeled copy ``(x, y')`` of the target,
* ``S5`` natural auxiliary sample with the most opposed gradient.

Input-space crafting relies on a reference model trained without DP.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Any

import numpy as np

from subaudit import mechanism, models, numerics
from subaudit.data import Dataset, Sample
from subaudit.mechanism import DpParams, OptState, TrainConfig

SCENARIOS = ('S2', 'S3', 'S4', 'S5')
INPUT_SCENARIOS = ('S3', 'S4', 'S5')


class CraftingError(ValueError):
    """Canary construction is undefined for the given inputs."""


@dataclasses.dataclass(frozen=True)
class CanarySpec:
    """A canary pair: arm 0 uses the first payload, arm 1 the second.

    For S2 the payloads are gradient vectors, otherwise `Sample` objects.
    """

    scenario: str
    payload: tuple[Any, Any]
    metadata: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f'unknown scenario {self.scenario!r}; '
                             f'expected one of {SCENARIOS}')
        a, b = self.payload
        if self.scenario == 'S2':
            a = np.asarray(a, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if a.shape != b.shape or a.ndim != 1:
                raise ValueError('gradient canaries must be equal-length vectors')
            object.__setattr__(self, 'payload', (a, b))
        elif not (isinstance(a, Sample) and isinstance(b, Sample)):
            raise ValueError(f'{self.scenario} payload must be two Samples')

    @property
    def is_gradient(self) -> bool:
        return self.scenario == 'S2'

    def arm(self, b: int):
        return self.payload[int(b)]

    def to_json(self) -> str:
        if self.is_gradient:
            payload = [p.tolist() for p in self.payload]
        else:
            payload = [{'x': s.x.tolist(), 'y': s.y} for s in self.payload]
        return json.dumps({'scenario': self.scenario, 'payload': payload,
                           'metadata': self.metadata}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> 'CanarySpec':
        obj = json.loads(text)
        if obj['scenario'] == 'S2':
            payload = tuple(np.asarray(p, dtype=np.float64)
                            for p in obj['payload'])
        else:
            payload = tuple(Sample(np.asarray(p['x']), p['y'])
                            for p in obj['payload'])
        return cls(obj['scenario'], payload, obj.get('metadata', {}))


@dataclasses.dataclass
class ReferenceRun:
    """Output of a noiseless reference training run."""

    theta: np.ndarray            # final parameters
    abs_updates: np.ndarray      # S_j = sum_t |theta_{t+1}^j - theta_t^j|
    confidence: np.ndarray       # mean true-class probability per record


def reference_train(arch, theta0: np.ndarray, dataset: Dataset, steps: int,
                    cfg: TrainConfig, gen: np.random.Generator, *,
                    q: float = 1.0, clip: float | None = None) -> ReferenceRun:
    """Noiseless training used by the crafting procedures.

    Each step averages the (optionally clipped) per-sample gradients of a
    Poisson batch drawn with rate `q`; an empty batch leaves the parameters
    unchanged. The true-class probability of every record is logged at each
    step before the update.
    """
    if len(dataset) == 0:
        raise CraftingError('reference training needs a non-empty dataset')
    bound = np.inf if clip is None else clip
    theta = np.array(theta0, dtype=np.float64)[None, :]
    opt = OptState.zeros(theta.shape)
    n = len(dataset)
    rows = np.arange(n)
    abs_updates = np.zeros(theta.shape[1])
    conf = np.zeros(n)
    for _ in range(steps):
        probs = models.softmax(arch.logits(theta[0], dataset.X))
        conf += probs[rows, dataset.y]
        mask = mechanism._inclusion_mask(n, q, gen)
        count = int(mask.sum())
        if count == 0:
            continue
        g = arch.clipped_grad_sum_lanes(theta, dataset.X, dataset.y,
                                        mask[None, :].astype(np.float64), bound)
        new = mechanism._optimizer_update(theta, g / count, opt, cfg)
        numerics.check_finite(new, 'reference training update')
        abs_updates += np.abs(new[0] - theta[0])
        theta = new
    if steps:
        conf /= steps
    return ReferenceRun(theta[0], abs_updates, conf)


def craft_gradient_pair(arch, theta0, dataset: Dataset, cfg: TrainConfig,
                        dp: DpParams, gen: np.random.Generator) -> CanarySpec:
    """Places ``+-C`` on the coordinate that moved least in a clipped run."""
    run = reference_train(arch, theta0, dataset, dp.steps, cfg, gen,
                          q=dp.q, clip=dp.clip)
    if not np.any(run.abs_updates > 0):
        raise CraftingError('reference training produced no parameter updates')
    j = int(np.argmin(run.abs_updates))
    g = np.zeros(arch.n_params)
    g[j] = dp.clip
    return CanarySpec('S2', (g, -g), {'coordinate': j,
                                      'coordinate_movement': float(run.abs_updates[j])})


def select_target(dataset: Dataset, run: ReferenceRun) -> int:
    """Index of the record with the lowest mean true-class probability."""
    if len(dataset) == 0:
        raise CraftingError('cannot select a target from an empty dataset')
    if run.confidence.shape != (len(dataset),):
        raise ValueError('reference run does not match the dataset')
    return int(np.argmin(run.confidence))


def _grad(arch, theta, x, y) -> np.ndarray:
    return arch.per_sample_grads(theta, np.atleast_2d(x), np.array([y]))[0]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise CraftingError('cosine similarity of a zero gradient is undefined')
    return float(a @ b / (na * nb))


def crafting_objective(arch, theta, target_grad, x, y, norm_mse=False) -> float:
    """Cosine similarity plus the scale-matching term at input `x`."""
    g = _grad(arch, theta, x, y)
    if norm_mse:
        scale = (np.linalg.norm(g) - np.linalg.norm(target_grad))**2
    else:
        scale = np.mean((g - target_grad)**2)
    return _cosine(target_grad, g) + float(scale)


def _linear_objective_grad(arch, theta, target_grad, x, y, norm_mse=False):
    """Analytic derivative of `crafting_objective` for the linear head."""
    K, d = arch.n_classes, arch.n_features
    w = theta.reshape(K, d + 1)
    xt = np.append(x, 1.0)
    p = models.softmax(w[:, :-1] @ x + w[:, -1])
    e = p.copy()
    e[y] -= 1.0
    g = np.outer(e, xt).ravel()
    ng, nt = np.linalg.norm(g), np.linalg.norm(target_grad)
    if ng == 0 or nt == 0:
        raise CraftingError('cosine similarity of a zero gradient is undefined')
    cos = g @ target_grad / (ng * nt)
    # A = dL/dg, then chain through g = e(x) outer [x, 1].
    A = target_grad / (ng * nt) - cos * g / ng**2
    if norm_mse:
        A = A + 2.0 * (ng - nt) * g / ng
    else:
        A = A + 2.0 * (g - target_grad) / g.size
    A = A.reshape(K, d + 1)
    J = np.diag(p) - np.outer(p, p)
    return w[:, :-1].T @ (J @ (A @ xt)) + (A.T @ e)[:d]


def _fd_objective_grad(arch, theta, target_grad, x, y, norm_mse=False,
                       step=1e-4):
    out = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        out[i] = (crafting_objective(arch, theta, target_grad, xp, y, norm_mse)
                  - crafting_objective(arch, theta, target_grad, xm, y, norm_mse)
                  ) / (2 * step)
    return out


def objective_grad(arch, theta, target_grad, x, y, norm_mse=False):
    """d objective / d x: closed form for the linear head, finite differences
    otherwise."""
    if isinstance(arch, models.LinearSoftmax):
        return _linear_objective_grad(arch, theta, target_grad, x, y, norm_mse)
    return _fd_objective_grad(arch, theta, target_grad, x, y, norm_mse)


def craft_input_canary(z: Sample, arch, theta_ref: np.ndarray, steps: int = 1000,
                       lr: float = 0.1, norm_mse: bool = False) -> CanarySpec:
    """Gradient descent on ``x'`` from zero, keeping the target's label.

    Args:
        z: target sample.
        arch: model architecture.
        theta_ref: reference model parameters.
        steps: number of descent steps on the input.
        lr: input-space step size.
        norm_mse: match gradient norms instead of full gradient vectors.
    """
    if steps < 0:
        raise ValueError('crafting steps must be non-negative')
    target = _grad(arch, theta_ref, z.x, z.y)
    if np.linalg.norm(target) == 0:
        raise CraftingError('target gradient is zero')
    x = np.zeros_like(z.x)
    start = crafting_objective(arch, theta_ref, target, x, z.y, norm_mse)
    for _ in range(steps):
        x = x - lr * objective_grad(arch, theta_ref, target, x, z.y, norm_mse)
        numerics.check_finite(x, 'crafted input')
    g = _grad(arch, theta_ref, x, z.y)
    meta = {'steps': steps, 'lr': lr, 'norm_mse': norm_mse,
            'objective_start': start,
            'objective_end': crafting_objective(arch, theta_ref, target, x, z.y,
                                                norm_mse),
            'cosine': _cosine(target, g),
            'norm_ratio': float(np.linalg.norm(g) / np.linalg.norm(target))}
    return CanarySpec('S3', (z, Sample(x, z.y)), meta)


def label_cosines(z: Sample, arch, theta_ref) -> np.ndarray:
    target = _grad(arch, theta_ref, z.x, z.y)
    X = np.repeat(z.x[None, :], arch.n_classes, axis=0)
    grads = arch.per_sample_grads(theta_ref, X, np.arange(arch.n_classes))
    return np.array([_cosine(target, g) for g in grads])


def craft_mislabel_canary(z: Sample, arch, theta_ref) -> CanarySpec:
    """Relabels the target with the label whose gradient opposes it most."""
    if arch.n_classes < 2:
        raise CraftingError('mislabeling needs at least two classes')
    cos = label_cosines(z, arch, theta_ref)
    label = int(np.argmin(cos))
    return CanarySpec('S4', (z, Sample(z.x, label)), {'cosine': float(cos[label])})


def select_natural_canary(z: Sample, arch, theta_ref, aux: Dataset) -> CanarySpec:
    """Auxiliary record whose gradient has the lowest cosine to the target's.

    Auxiliary records with a zero gradient are never chosen.
    """
    if len(aux) == 0:
        raise CraftingError('auxiliary dataset is empty')
    target = _grad(arch, theta_ref, z.x, z.y)
    nt = np.linalg.norm(target)
    if nt == 0:
        raise CraftingError('target gradient is zero')
    grads = arch.per_sample_grads(theta_ref, aux.X, aux.y)
    norms = np.linalg.norm(grads, axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        cos = np.where(norms > 0, grads @ target / (norms * nt), np.inf)
    if not np.isfinite(cos).any():
        raise CraftingError('every auxiliary gradient is zero')
    i = int(np.argmin(cos))
    return CanarySpec('S5', (z, aux[i]), {'aux_index': i,
                                          'aux_id': int(aux.ids[i]),
                                          'cosine': float(cos[i])})
