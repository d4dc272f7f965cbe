"""DP-SGD / DP-Adam with Poisson subsampling and a canary slot.

Each step sums clipped per-sample gradients of the Poisson batch, adds the
canary contribution when the canary's own inclusion coin comes up, adds
``N(0, sigma^2 C^2 I)`` noise and divides by the expected batch size.

A gradient-space canary is a raw vector added as-is; an input-space canary is
a `Sample` whose gradient is clipped like any other record.

Training runs are executed as "lanes": a stack of independent parameter
vectors advanced together, each lane drawing from its own generator in a fixed
order per step (batch mask, canary coin, noise). A single run is one lane, so
`train` and `train_lanes` produce the same trajectory for the same stream.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np

from subaudit import numerics
from subaudit.data import Dataset, Sample
from subaudit.models import Model

OPTIMIZERS = ('sgd', 'adam')


@dataclasses.dataclass(frozen=True)
class DpParams:
    q: float
    sigma: float
    clip: float
    steps: int
    delta_target: float = 1e-5

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError(f'q must be in (0, 1], got {self.q}')
        if not self.sigma >= 0:
            raise ValueError(f'sigma must be >= 0, got {self.sigma}')
        if not self.clip > 0:
            raise ValueError(f'clipping bound must be positive, got {self.clip}')
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError(f'steps must be a non-negative integer, got {self.steps}')
        if not 0 < self.delta_target < 1:
            raise ValueError(f'delta must be in (0, 1), got {self.delta_target}')


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.

    `batch_size` is the expected batch size used for normalization; when
    None it is ``q * (records + canary slot)``. `stride` is the snapshot
    interval for per-step observation (the final step is always observed).
    """

    lr: float
    optimizer: str = 'sgd'
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: float | None = None
    stride: int = 25

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f'learning rate must be positive, got {self.lr}')
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(
                f'optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError('Adam betas must lie in [0, 1)')
        if self.batch_size is not None and not self.batch_size > 0:
            raise ValueError('batch size must be positive')
        if self.stride < 1:
            raise ValueError('snapshot stride must be >= 1')


@dataclasses.dataclass(frozen=True)
class StepTrace:
    step: int
    delta: np.ndarray           # theta_t - theta_0
    canary_included: bool       # canary coin at this step


@dataclasses.dataclass
class OptState:
    """Adam moments for a stack of lanes (unused by SGD)."""

    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, shape) -> 'OptState':
        return cls(0, np.zeros(shape), np.zeros(shape))


def clip(g: np.ndarray, bound: float) -> np.ndarray:
    if not bound > 0:
        raise ValueError(f'clipping bound must be positive, got {bound}')
    g = numerics.check_finite(np.asarray(g, dtype=np.float64), 'gradient')
    norm = float(np.linalg.norm(g))
    if norm <= bound:
        return g
    return g * (bound / norm)


def _inclusion_mask(n: int, q: float, gen: np.random.Generator) -> np.ndarray:
    if q >= 1:
        return np.ones(n, dtype=bool)
    return gen.random(n) < q


def poisson_sample(indices, q: float, gen: np.random.Generator) -> np.ndarray:
    """Keeps each index independently with probability `q`."""
    if not 0 < q <= 1:
        raise ValueError(f'q must be in (0, 1], got {q}')
    indices = np.asarray(indices)
    if indices.ndim == 0:
        indices = np.arange(int(indices))
    return indices[_inclusion_mask(indices.size, q, gen)]


def _canary_coin(q: float, gen: np.random.Generator) -> bool:
    return True if q >= 1 else bool(gen.random() < q)


def _noise(n_params: int, sigma: float, gen: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return np.zeros(n_params)
    return gen.standard_normal(n_params)


def expected_batch_size(dp: DpParams, cfg: TrainConfig, n_records: int,
                        has_canary: bool) -> float:
    if cfg.batch_size is not None:
        return float(cfg.batch_size)
    size = dp.q * (n_records + (1 if has_canary else 0))
    if size <= 0:
        raise ValueError('expected batch size is zero; set batch_size')
    return size


def _optimizer_update(thetas, grads, opt: OptState, cfg: TrainConfig):
    if cfg.optimizer == 'sgd':
        return thetas - cfg.lr * grads
    opt.step += 1
    opt.m = cfg.beta1 * opt.m + (1 - cfg.beta1) * grads
    opt.v = cfg.beta2 * opt.v + (1 - cfg.beta2) * grads**2
    m_hat = opt.m / (1 - cfg.beta1**opt.step)
    v_hat = opt.v / (1 - cfg.beta2**opt.step)
    return thetas - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)


class _CanaryTable:
    """Per-lane canary payloads, grouped for vectorized evaluation."""

    def __init__(self, canaries: Sequence, n_lanes: int, n_params: int):
        if len(canaries) != n_lanes:
            raise ValueError('need exactly one canary entry per lane')
        self.vectors = np.zeros((n_lanes, n_params))
        self.has_vector = np.zeros(n_lanes, dtype=bool)
        self.sample_groups: list[tuple[Sample, np.ndarray]] = []
        by_sample: dict[int, tuple[Sample, list[int]]] = {}
        for lane, payload in enumerate(canaries):
            if payload is None:
                continue
            if isinstance(payload, Sample):
                by_sample.setdefault(id(payload), (payload, []))[1].append(lane)
            else:
                vec = np.asarray(payload, dtype=np.float64)
                if vec.shape != (n_params,):
                    raise ValueError(
                        f'gradient canary must have {n_params} entries, '
                        f'got shape {vec.shape}')
                self.vectors[lane] = vec
                self.has_vector[lane] = True
        self.sample_groups = [(s, np.asarray(lanes))
                              for s, lanes in by_sample.values()]
        self.any = bool(self.has_vector.any() or self.sample_groups)

    def contribution(self, arch, thetas, coins, clip_bound):
        out = self.vectors * coins[:, None]
        for sample, lanes in self.sample_groups:
            out[lanes] += arch.clipped_grad_sum_lanes(
                thetas[lanes], sample.x[None, :], np.array([sample.y]),
                coins[lanes][:, None].astype(np.float64), clip_bound)
        return out


def _step_lanes(arch, thetas, opt, X, y, masks, coins, noise, canaries,
                dp: DpParams, cfg: TrainConfig, batch_size):
    grads = arch.clipped_grad_sum_lanes(thetas, X, y,
                                        masks.astype(np.float64), dp.clip)
    if canaries.any:
        grads += canaries.contribution(arch, thetas, coins, dp.clip)
    grads += (dp.sigma * dp.clip) * noise
    return _optimizer_update(thetas, grads / batch_size, opt, cfg)


def dp_step(model: Model, batch: Dataset, canary, dp: DpParams,
            cfg: TrainConfig, gen: np.random.Generator, *,
            batch_size: float, opt_state: OptState | None = None,
            step: int | None = None) -> tuple[Model, bool]:
    """One noisy update of `model` on an already-sampled `batch`.

    Draws the canary's inclusion coin and the noise from `gen` (in that
    order). `opt_state` carries Adam moments across calls and is updated in
    place. Returns the updated model and whether the canary was included.

    Raises:
        NumericalError: if the update is not finite.
    """
    arch = model.arch
    coin = _canary_coin(dp.q, gen) if canary is not None else False
    noise = _noise(arch.n_params, dp.sigma, gen)
    opt = opt_state if opt_state is not None else OptState.zeros(
        (1, arch.n_params))
    table = _CanaryTable([canary], 1, arch.n_params)
    new = _step_lanes(arch, model.params[None, :], opt, batch.X, batch.y,
                      np.ones((1, len(batch)), dtype=bool), np.array([coin]),
                      noise[None, :], table, dp, cfg, batch_size)
    numerics.check_finite(new, 'parameter update', step=step)
    return Model(arch, new[0]), coin


@dataclasses.dataclass
class LaneResult:
    thetas: np.ndarray            # (lanes, P) final parameters
    inclusions: np.ndarray        # (lanes, T) canary coin per step
    aborted_at: np.ndarray        # (lanes,) first non-finite step, 0 if none


def train_lanes(arch, theta0: np.ndarray, dataset: Dataset, dp: DpParams,
                cfg: TrainConfig, generators: Sequence[np.random.Generator],
                canaries: Sequence | None = None,
                observe: Callable[[int, np.ndarray], None] | None = None,
                ) -> LaneResult:
    """Trains `len(generators)` independent runs in lockstep.

    Args:
        arch: model architecture.
        theta0: initial parameters, ``(P,)`` shared or ``(lanes, P)``.
        dataset: training records, excluding the canary slot.
        dp: mechanism parameters.
        cfg: optimizer settings.
        generators: one random generator per lane.
        canaries: per-lane canary payload (None, gradient vector, or Sample).
        observe: called as ``observe(t, thetas)`` at every `cfg.stride`-th
            step and at the final step, with the current parameter stack.

    Returns:
        A `LaneResult`. Lanes whose parameters become non-finite are frozen
        and reported in `aborted_at`.
    """
    n_lanes = len(generators)
    P = arch.n_params
    thetas = np.array(np.broadcast_to(theta0, (n_lanes, P)), dtype=np.float64)
    canaries = [None] * n_lanes if canaries is None else list(canaries)
    table = _CanaryTable(canaries, n_lanes, P)
    batch_size = expected_batch_size(dp, cfg, len(dataset), table.any)
    opt = OptState.zeros((n_lanes, P))
    n = len(dataset)
    has_canary = np.array([c is not None for c in canaries])
    inclusions = np.zeros((n_lanes, dp.steps), dtype=bool)
    aborted = np.zeros(n_lanes, dtype=np.int64)
    masks = np.empty((n_lanes, n), dtype=bool)
    coins = np.zeros(n_lanes, dtype=bool)
    noise = np.empty((n_lanes, P))
    for t in range(1, dp.steps + 1):
        for lane, gen in enumerate(generators):
            masks[lane] = _inclusion_mask(n, dp.q, gen)
            coins[lane] = _canary_coin(dp.q, gen) if has_canary[lane] else False
            noise[lane] = _noise(P, dp.sigma, gen)
        inclusions[:, t - 1] = coins
        # Overflow is expected on divergent lanes; they are frozen below.
        with np.errstate(over='ignore', invalid='ignore'):
            new = _step_lanes(arch, thetas, opt, dataset.X, dataset.y, masks,
                              coins, noise, table, dp, cfg, batch_size)
        bad = ~np.all(np.isfinite(new), axis=1) & (aborted == 0)
        aborted[bad] = t
        frozen = aborted > 0
        if frozen.any():
            new[frozen] = thetas[frozen]
        thetas = new
        if observe is not None and (t % cfg.stride == 0 or t == dp.steps):
            observe(t, thetas)
    return LaneResult(thetas, inclusions, aborted)


@dataclasses.dataclass
class TrainResult:
    model: Model
    traces: list[StepTrace]
    inclusions: np.ndarray


def train(model0: Model, dataset: Dataset, dp: DpParams, cfg: TrainConfig,
          rng: np.random.Generator | numerics.RngStream,
          canary=None) -> TrainResult:
    """A single DP training run; `canary` is the payload for the chosen arm."""
    gen = rng.generator() if isinstance(rng, numerics.RngStream) else rng
    theta0 = model0.params.copy()
    snapshots: list[tuple[int, np.ndarray]] = []
    result = train_lanes(
        model0.arch, theta0, dataset, dp, cfg, [gen], [canary],
        observe=lambda t, th: snapshots.append((t, th[0] - theta0)))
    if result.aborted_at[0]:
        raise numerics.NumericalError('non-finite parameter update',
                                      step=int(result.aborted_at[0]))
    traces = [StepTrace(t, d, bool(result.inclusions[0, t - 1]))
              for t, d in snapshots]
    return TrainResult(Model(model0.arch, result.thetas[0]), traces,
                       result.inclusions[0])
