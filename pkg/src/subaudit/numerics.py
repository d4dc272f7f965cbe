"""Numerical primitives: normal CDF/quantile, reproducible RNG streams, errors."""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.special


class NumericalError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f'{message} (step {step})'
        super().__init__(message)
        self.step = step


def std_normal_cdf(t):
    """Standard normal CDF, accurate to double precision in both tails."""
    return scipy.special.ndtr(t)


def std_normal_logcdf(t):
    return scipy.special.log_ndtr(t)


def std_normal_quantile(p):
    """Inverse of `std_normal_cdf` on the open unit interval.

    Raises:
        ValueError: if any `p` lies outside (0, 1).
    """
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(~((p_arr > 0.0) & (p_arr < 1.0))):
        raise ValueError(f'quantile requires p in (0, 1), got {p!r}')
    out = scipy.special.ndtri(p_arr)
    return float(out) if out.ndim == 0 else out


def check_finite(values: np.ndarray, what: str, step: int | None = None):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f'non-finite {what}', step=step)
    return values


@dataclasses.dataclass(frozen=True)
class RngStream:
    """An addressable, reproducible random stream.

    A stream is identified by a master `seed` and a `stream` id. Streams are
    derived through `numpy.random.SeedSequence` spawn keys, so `(seed, stream)`
    always maps to the same draws and distinct ids are statistically
    independent. `child` derives nested streams (e.g. repeat -> purpose).
    """

    seed: int
    stream: int = 0
    path: tuple[int, ...] = ()

    def child(self, index: int) -> 'RngStream':
        return dataclasses.replace(self, path=self.path + (int(index),))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=int(self.seed) & (2**64 - 1),
            spawn_key=(int(self.stream) & (2**64 - 1),) + self.path,
        )
        return np.random.Generator(np.random.PCG64(seq))
