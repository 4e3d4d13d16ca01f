"""Gradient verification and Gaussian-statistics helpers.

Finite-difference checks run entirely in float64: central differences
(L(p+eps) - L(p-eps)) / (2 eps) per scalar parameter, compared against the
gradients produced by the autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, no_grad

REL_ERROR_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _rel_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERROR_FLOOR)
    return np.abs(a - b) / denom


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray | Tensor],
    epsilon: float = 1e-5,
) -> list[GradCheckReport]:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be a deterministic scalar function of the named
    parameters; it is re-invoked with perturbed copies, so it must not
    capture the tensors it is handed. All arithmetic is float64.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    base = {
        name: (p.data if isinstance(p, Tensor) else np.asarray(p)).astype(np.float64)
        for name, p in params.items()
    }

    live = {name: Tensor(arr.copy(), requires_grad=True) for name, arr in base.items()}
    loss = loss_fn(live)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"loss_fn returned a non-finite value: {loss.data}")
    loss.backward()
    analytic = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in live.items()
    }

    def eval_at(arrays: dict[str, np.ndarray]) -> float:
        with no_grad():
            value = loss_fn({n: Tensor(a) for n, a in arrays.items()})
        v = float(value.data)
        if not np.isfinite(v):
            raise FloatingPointError("loss_fn returned a non-finite value during FD probe")
        return v

    reports = []
    for name, arr in base.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = eval_at(base)
            flat[k] = orig - epsilon
            down = eval_at(base)
            flat[k] = orig
            num_flat[k] = (up - down) / (2.0 * epsilon)
        err = _rel_error(analytic[name], numeric)
        reports.append(GradCheckReport(name, analytic[name], numeric, float(err.max(initial=0.0))))
    return reports


def fit_gaussian(features: np.ndarray | Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased (n-1) covariance of n x d feature rows."""
    x = features.data if isinstance(features, Tensor) else np.asarray(features)
    x = x.astype(np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"fit_gaussian needs an (n>=2, d) matrix, got shape {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    cov = (cov + cov.T) / 2.0  # exact symmetry by construction
    return mean, cov


def sqrtm_psd(m: np.ndarray, sym_tol: float = 1e-8) -> np.ndarray:
    """Symmetric PSD matrix square root via eigendecomposition.

    Eigenvalues below zero are clamped to zero; asymmetry beyond
    ``sym_tol`` (scaled by max(1, |m|_max)) is rejected.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"sqrtm_psd needs a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    asym = float(np.abs(m - m.T).max(initial=0.0))
    if asym > sym_tol * scale:
        raise ValueError(f"sqrtm_psd input asymmetric: max |m - m.T| = {asym:.3e}")
    sym = (m + m.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T
