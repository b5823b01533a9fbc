"""Finite-difference check of the full training loss for every fusion variant."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional

import numpy as np

from .errors import ConfigError
from .fusion import FusionParams, Variant, init_params
from .numerics import GradCheckReport, finite_diff_check
from .objectives import LossConfig


@dataclass
class VariantCheck:
    variant: str
    seed: int
    report: GradCheckReport


def random_batch(rng: np.random.Generator, n: int, dim: int):
    """``n`` pairs over distinct queries and items with random labels."""
    from .trainer import BatchData

    def unit(m):
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    Q = unit(rng.standard_normal((n, dim)))
    T = unit(rng.standard_normal((n, dim)))
    V = unit(rng.standard_normal((n, dim)))
    ye = rng.integers(0, 3, size=n)
    yr = rng.integers(0, 3, size=n)
    return BatchData(Q, T, V, ye, yr, np.eye(n, dtype=bool))


def random_params(rng: np.random.Generator, dim: int, variant: Variant, heads: int = 2) -> FusionParams:
    """Parameters away from their initial values, so gates and layer norm are
    exercised off their neutral points."""
    p = init_params(dim, variant, heads=heads, proj_dim=max(1, dim // 4), hidden=dim,
                    seed=int(rng.integers(2**31)))
    for name in FusionParams.TENSORS:
        arr = getattr(p, name)
        scale = 0.3 if name.endswith("adapter") else 0.5
        setattr(p, name, arr + scale * rng.standard_normal(arr.shape))
    return p


def check_variant(variant, seed: int, loss_cfg: LossConfig = LossConfig(), dim: int = 8,
                  n_pairs: int = 4, step: float = 1e-4, tol: float = 1e-4,
                  corrupt: Optional[str] = None) -> GradCheckReport:
    from .trainer import Stage, batch_loss_and_grads

    variant = Variant.parse(variant)
    rng = np.random.default_rng([seed, 17])
    batch = random_batch(rng, n_pairs, dim)
    base = random_params(rng, dim, variant)
    names = ("query_adapter", "text_adapter", "image_adapter") + base.fusion_tensor_names()
    if corrupt is not None and corrupt not in names:
        raise ConfigError(f"cannot corrupt {corrupt!r}: not a tensor of {variant.value}")

    calls = []

    def loss_fn(tensors):
        # only the first call's gradients are compared; perturbed calls need the loss alone
        first = not calls
        calls.append(1)
        params = base.with_tensors(tensors)
        bl, grads, _ = batch_loss_and_grads(params, batch, Stage.FUSION, loss_cfg, "topk", need_grads=first)
        if not first:
            return bl.total, {}
        grads = {k: grads[k] for k in names}
        if corrupt is not None:
            # negative-control hook: a deliberately wrong gradient
            grads[corrupt] = grads[corrupt] * 1.5 + 1e-2
        return bl.total, grads

    return finite_diff_check(loss_fn, {k: getattr(base, k) for k in names}, step=step, tol=tol)


def gradcheck_all(loss_cfg: LossConfig = LossConfig(), seeds: Iterable[int] = range(20),
                  variants: Iterable = tuple(Variant), step: float = 1e-4, tol: float = 1e-4,
                  corrupt: Optional[str] = None) -> List[VariantCheck]:
    out = []
    for v in variants:
        v = Variant.parse(v)
        hook = corrupt if corrupt is not None and corrupt in _names(v) else None
        for s in seeds:
            out.append(VariantCheck(v.value, s, check_variant(v, s, loss_cfg, step=step, tol=tol, corrupt=hook)))
    return out


def _names(variant: Variant) -> tuple:
    from .fusion import _VARIANT_TENSORS, ADAPTERS
    return ADAPTERS + _VARIANT_TENSORS[variant]
