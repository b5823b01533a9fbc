"""Dense kernels with closed-form backward passes, plus a gradient checker.

Everything runs in float64. Row-wise helpers (``*_rows``) operate on
``(n, dim)`` matrices and are what the training loop uses; the vector
functions are thin wrappers with the validation the public API promises.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Tuple

import numpy as np

from .errors import DomainError, NumericalError, StructuralError

LN_EPS = 1e-5


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise StructuralError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} has non-finite entries")
    return arr


def _same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise StructuralError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def cosine(a, b) -> float:
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    _same_dim(a, b)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine is undefined for a zero-norm vector")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def l2_normalize(v) -> np.ndarray:
    v = as_vector(v)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DomainError("cannot normalize a zero vector")
    return v / n


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> np.ndarray:
    x = as_vector(x, "x")
    gain = as_vector(gain, "gain")
    bias = as_vector(bias, "bias")
    _same_dim(x, gain)
    _same_dim(x, bias)
    if eps < 0:
        raise DomainError("eps must be non-negative")
    out, _ = layer_norm_rows(x[None, :], gain, bias, eps)
    return out[0]


# -- row-wise kernels -------------------------------------------------------


def normalize_rows(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise DomainError("cannot normalize a zero-norm row")
    return x / norms[:, None], norms


def normalize_rows_backward(y: np.ndarray, norms: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through ``y = x / ||x||`` given the forward outputs."""
    proj = np.sum(y * dy, axis=1, keepdims=True)
    return (dy - y * proj) / norms[:, None]


@dataclass
class LayerNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray


def layer_norm_rows(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    denom = var + eps
    if np.any(denom <= 0.0):
        raise DomainError("layer_norm of a constant vector needs eps > 0")
    inv_std = 1.0 / np.sqrt(denom)
    xhat = centered * inv_std
    return gain * xhat + bias, LayerNormCache(xhat, inv_std, gain)


def layer_norm_rows_backward(cache: LayerNormCache, dout: np.ndarray):
    """Return ``(dx, dgain, dbias)``."""
    xhat = cache.xhat
    dgain = np.sum(dout * xhat, axis=0)
    dbias = np.sum(dout, axis=0)
    dxhat = dout * cache.gain
    dx = cache.inv_std * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def sigmoid(z):
    # split branches so large |z| never overflows exp
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-tensor worst relative error of analytic vs central-difference gradients."""

    tol: float
    step: float
    per_tensor: Dict[str, float] = field(default_factory=dict)
    worst_index: Dict[str, tuple] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.per_tensor.values(), default=0.0)

    @property
    def failed(self) -> list:
        return [k for k, v in self.per_tensor.items() if v > self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed


LossAndGrad = Callable[[Mapping[str, np.ndarray]], Tuple[float, Mapping[str, np.ndarray]]]


def finite_diff_check(
    loss_fn: LossAndGrad,
    params: Mapping[str, np.ndarray],
    step: float = 1e-4,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradients with central differences.

    ``loss_fn(params)`` returns ``(loss, grads)`` where ``grads`` maps a
    subset of the tensor names to arrays of matching shape. Only tensors
    present in ``grads`` are checked. The error for one entry is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise DomainError("step must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, grads = loss_fn(work)
    report = GradCheckReport(tol=tol, step=step)
    for name, g in grads.items():
        p = work[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise StructuralError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        flat = p.reshape(-1)
        worst, worst_at = 0.0, ()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = loss_fn(work)
            flat[i] = orig - step
            lm, _ = loss_fn(work)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericalError(f"non-finite loss when perturbing {name}[{i}]")
            numeric = (lp - lm) / (2.0 * step)
            err = abs(g.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst, worst_at = err, np.unravel_index(i, p.shape)
        report.per_tensor[name] = float(worst)
        report.worst_index[name] = tuple(int(j) for j in worst_at)
    return report
