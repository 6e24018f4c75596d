"""
Helper functions
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, is_dataclass
from functools import lru_cache
from typing import Any, Sequence

import numpy as np


def _seed_sequence(seed: int, key: Sequence[int] = ()) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))


def _generator(seed: int, key: Sequence[int] = ()) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(_seed_sequence(seed, key)))


def _lorentzian(x: np.ndarray, gamma: float) -> np.ndarray:
    hw = gamma / 2
    return hw / np.pi / (hw * hw + x * x)


def _lorentzian_cdf(x: np.ndarray, gamma: float) -> np.ndarray:
    return 0.5 + np.arctan(2 * x / gamma) / np.pi


@lru_cache(maxsize=8)
def _gauss_legendre(n: int = 8) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(n)
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return nodes, weights


def _bin_integrals(func, edges: np.ndarray, n: int = 8) -> np.ndarray:
    """
    Integral of func over each [edges[i], edges[i+1]] with n-point Gauss-Legendre.
    """
    nodes, weights = _gauss_legendre(n)
    lo, hi = edges[:-1], edges[1:]
    half = (hi - lo) / 2
    mid = (hi + lo) / 2
    x = mid[:, None] + half[:, None] * nodes[None, :]
    return half * (func(x.ravel()).reshape(x.shape) @ weights)


def _fwhm(x: np.ndarray, y: np.ndarray) -> float:
    """
    Full width at half maximum between the outermost half-maximum crossings,
    linearly interpolated. 0 when y never drops below half of its maximum.
    """
    y = np.asarray(y, dtype=float)
    peak = y.max()
    if peak <= 0:
        return 0.0
    above = np.flatnonzero(y >= peak / 2)
    i0, i1 = above[0], above[-1]
    if i0 == 0 or i1 == len(y) - 1:
        return float(x[-1] - x[0])
    half = peak / 2
    left = x[i0 - 1] + (half - y[i0 - 1]) * (x[i0] - x[i0 - 1]) / (y[i0] - y[i0 - 1])
    right = x[i1] + (half - y[i1]) * (x[i1 + 1] - x[i1]) / (y[i1 + 1] - y[i1])
    return float(right - left)


def _jsonable(obj: Any) -> Any:
    if is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _config_id(*objs: Any) -> str:
    blob = json.dumps(_jsonable(list(objs)), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(blob.encode()).hexdigest()
