import typing

import numpy as np
from scipy import special

SeedLike = typing.Union[int, np.random.Generator, np.random.SeedSequence, None]

LOG_2PI = float(np.log(2.0 * np.pi))


def make_rng(seed: SeedLike) -> np.random.Generator:
    """
    Return a `Generator` for `seed`.
    An existing generator is returned as is, so callers can thread one stream through several
    operations.
    """
    if isinstance(seed, np.random.Generator):
        return seed

    return np.random.default_rng(seed)


def spawn_seeds(seed: int, count: int) -> typing.List[np.random.SeedSequence]:
    """Derive `count` independent child seed sequences from a master seed"""
    return np.random.SeedSequence(seed).spawn(count)


def softmax(values: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (the maximum is subtracted before exponentiation)"""
    scaled = np.asarray(values, dtype=np.float64) / temperature
    shifted = scaled - np.max(scaled, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=axis, keepdims=True)


def log_softmax(values: np.ndarray, axis: int = -1) -> np.ndarray:
    return values - special.logsumexp(values, axis=axis, keepdims=True)


def symlog(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.log1p(np.abs(values))


def symexp(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.expm1(np.abs(values))


def symexp_derivative(values: np.ndarray) -> np.ndarray:
    return np.exp(np.abs(values))
