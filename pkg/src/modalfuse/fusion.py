"""Item-side fusion networks and modality adapters.

Five variants share one parameter container:

* ``MLP``           h_x = LN(MLP([t; v]))
* ``MoE``           h_x = LN(a t + (1 - a) v)
* ``MoE+MLP``       h_x = LN(a t + (1 - a) v + MLP([t; v]))
* ``Attention``     h_x = LN(w_t t + w_v v), (w_t, w_v) = softmax of per-modality affine scores
* ``MoE+Bilinear``  h_x = LN(a t + (1 - a) v + MLP(concat_k (Wt_k t * Wi_k v)))

with ``a = sigmoid(gate_w . [t; v] + gate_b)``. Batched forward passes
return a cache consumed by :func:`fuse_backward`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields
from typing import Dict, Iterable, List, Optional

import numpy as np

from .errors import ConfigError, StructuralError
from .numerics import (
    LN_EPS,
    as_vector,
    cosine,
    layer_norm_rows,
    layer_norm_rows_backward,
    sigmoid,
)


class Variant(str, enum.Enum):
    MLP = "MLP"
    MOE = "MoE"
    MOE_MLP = "MoE+MLP"
    ATTENTION = "Attention"
    MOE_BILINEAR = "MoE+Bilinear"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        for v in cls:
            if v.value.lower() == str(name).strip().lower():
                return v
        raise ConfigError(f"unknown fusion variant {name!r}; expected one of {[v.value for v in cls]}")

    @property
    def has_gate(self) -> bool:
        return self in (Variant.MOE, Variant.MOE_MLP, Variant.MOE_BILINEAR)

    @property
    def has_base(self) -> bool:
        """Whether a convex modality mix feeds the layer norm."""
        return self is not Variant.MLP

    @property
    def mlp_input(self) -> Optional[str]:
        if self in (Variant.MLP, Variant.MOE_MLP):
            return "concat"
        if self is Variant.MOE_BILINEAR:
            return "bilinear"
        return None


ADAPTERS = ("query_adapter", "text_adapter", "image_adapter")

_VARIANT_TENSORS = {
    Variant.MLP: ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln_gain", "ln_bias"),
    Variant.MOE: ("gate_w", "gate_b", "ln_gain", "ln_bias"),
    Variant.MOE_MLP: ("gate_w", "gate_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln_gain", "ln_bias"),
    Variant.ATTENTION: ("attn_w", "attn_b", "ln_gain", "ln_bias"),
    Variant.MOE_BILINEAR: ("gate_w", "gate_b", "bilinear_t", "bilinear_i",
                           "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln_gain", "ln_bias"),
}


@dataclass
class FusionParams:
    """All trainable tensors. ``gate_b`` and ``attn_b`` are kept as arrays so
    every field can be updated in place by the optimizer."""

    variant: Variant
    dim: int
    heads: int
    proj_dim: int
    hidden: int
    query_adapter: np.ndarray
    text_adapter: np.ndarray
    image_adapter: np.ndarray
    gate_w: np.ndarray          # (2*dim,)
    gate_b: np.ndarray          # (1,)
    attn_w: np.ndarray          # (2, dim) scorer rows for text, image
    attn_b: np.ndarray          # (2,)
    bilinear_t: np.ndarray      # (heads, proj_dim, dim)
    bilinear_i: np.ndarray      # (heads, proj_dim, dim)
    mlp_w1: np.ndarray          # (hidden, mlp_in)
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray          # (dim, hidden)
    mlp_b2: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    stages: List[str] = field(default_factory=list)

    TENSORS = ("query_adapter", "text_adapter", "image_adapter", "gate_w", "gate_b",
               "attn_w", "attn_b", "bilinear_t", "bilinear_i", "mlp_w1", "mlp_b1",
               "mlp_w2", "mlp_b2", "ln_gain", "ln_bias")

    @property
    def mlp_in(self) -> int:
        return 2 * self.dim if self.variant.mlp_input == "concat" else self.heads * self.proj_dim

    def tensors(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.TENSORS}

    def fusion_tensor_names(self) -> tuple:
        return _VARIANT_TENSORS[self.variant]

    def copy(self) -> "FusionParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in self.TENSORS:
            kw[name] = kw[name].copy()
        kw["stages"] = list(self.stages)
        return FusionParams(**kw)

    def with_tensors(self, tensors: Dict[str, np.ndarray]) -> "FusionParams":
        out = self.copy()
        for k, v in tensors.items():
            setattr(out, k, np.asarray(v, dtype=np.float64))
        return out

    def expected_shapes(self) -> Dict[str, tuple]:
        d, K, p, h = self.dim, self.heads, self.proj_dim, self.hidden
        return {
            "query_adapter": (d, d), "text_adapter": (d, d), "image_adapter": (d, d),
            "gate_w": (2 * d,), "gate_b": (1,), "attn_w": (2, d), "attn_b": (2,),
            "bilinear_t": (K, p, d), "bilinear_i": (K, p, d),
            "mlp_w1": (h, self.mlp_in), "mlp_b1": (h,), "mlp_w2": (d, h), "mlp_b2": (d,),
            "ln_gain": (d,), "ln_bias": (d,),
        }

    def validate(self) -> None:
        if self.heads < 1 or self.proj_dim < 1 or self.hidden < 1 or self.dim < 1:
            raise ConfigError("dim, heads, proj_dim and hidden must all be >= 1")
        for name, shape in self.expected_shapes().items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise StructuralError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise StructuralError(f"{name} has non-finite entries")


def init_params(dim: int, variant=Variant.MOE_BILINEAR, heads: int = 4,
                proj_dim: Optional[int] = None, hidden: Optional[int] = None,
                seed: int = 0) -> FusionParams:
    """Identity adapters, a neutral gate (a = 0.5), unit layer norm, and
    uniform(+-1/sqrt(fan_in)) interaction weights drawn from ``seed``."""
    variant = Variant.parse(variant)
    proj_dim = proj_dim or max(1, dim // 4)
    hidden = hidden or dim
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    mlp_in = 2 * dim if variant.mlp_input == "concat" else heads * proj_dim
    bil_t = uniform((heads, proj_dim, dim), dim)
    bil_i = uniform((heads, proj_dim, dim), dim)
    w1 = uniform((hidden, mlp_in), mlp_in)
    b1 = uniform((hidden,), mlp_in)
    w2 = uniform((dim, hidden), hidden)
    b2 = uniform((dim,), hidden)
    attn_w = uniform((2, dim), dim)
    params = FusionParams(
        variant=variant, dim=dim, heads=heads, proj_dim=proj_dim, hidden=hidden,
        query_adapter=np.eye(dim), text_adapter=np.eye(dim), image_adapter=np.eye(dim),
        gate_w=np.zeros(2 * dim), gate_b=np.zeros(1),
        attn_w=attn_w, attn_b=np.zeros(2),
        bilinear_t=bil_t, bilinear_i=bil_i,
        mlp_w1=w1, mlp_b1=b1, mlp_w2=w2, mlp_b2=b2,
        ln_gain=np.ones(dim), ln_bias=np.zeros(dim),
    )
    params.validate()
    return params


# -- single-item API ------------------------------------------------------------


@dataclass
class FusionTrace:
    alpha: float
    h_f: np.ndarray
    interaction_norm: float
    h_x: np.ndarray


def _check_item_dims(h_t, h_v, params: Optional[FusionParams] = None):
    h_t = as_vector(h_t, "h_t")
    h_v = as_vector(h_v, "h_v")
    if h_t.shape != h_v.shape:
        raise StructuralError(f"dimension mismatch: text {h_t.size} vs image {h_v.size}")
    if params is not None and h_t.size != params.dim:
        raise StructuralError(f"embedding dim {h_t.size} does not match params dim {params.dim}")
    return h_t, h_v


def gate_alpha(h_t, h_v, params: FusionParams) -> float:
    h_t, h_v = _check_item_dims(h_t, h_v, params)
    z = params.gate_w @ np.concatenate([h_t, h_v]) + params.gate_b[0]
    return float(sigmoid(np.array([z]))[0])


def moe_fuse(h_t, h_v, alpha: float) -> np.ndarray:
    h_t, h_v = _check_item_dims(h_t, h_v)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * h_t + (1.0 - alpha) * h_v


def bilinear_interact(h_t, h_v, params: FusionParams) -> np.ndarray:
    h_t, h_v = _check_item_dims(h_t, h_v, params)
    if params.variant.mlp_input != "bilinear":
        raise ConfigError(f"variant {params.variant.value} has no bilinear path")
    z = _bilinear_features(h_t[None, :], h_v[None, :], params)[0]
    out, _ = _mlp_forward(z, params)
    return out[0]


def fuse_item(h_t, h_v, params: FusionParams) -> FusionTrace:
    h_t, h_v = _check_item_dims(h_t, h_v, params)
    out = fuse_forward(h_t[None, :], h_v[None, :], params)
    return FusionTrace(alpha=float(out.alpha[0]), h_f=out.h_f[0],
                       interaction_norm=float(out.interaction_norm[0]), h_x=out.h_x[0])


def apply_adapter(v, which: str, params: FusionParams) -> np.ndarray:
    v = as_vector(v)
    if v.size != params.dim:
        raise StructuralError(f"embedding dim {v.size} does not match params dim {params.dim}")
    return adapter_matrix(params, which) @ v


def adapter_matrix(params: FusionParams, which: str) -> np.ndarray:
    try:
        return getattr(params, f"{which}_adapter")
    except AttributeError:
        raise ConfigError(f"unknown adapter {which!r}; expected query, text or image") from None


def score(q, h_x) -> float:
    return cosine(q, h_x)


# -- batched forward / backward ---------------------------------------------------


def _bilinear_features(T, V, params):
    pt = np.einsum("nd,kpd->nkp", T, params.bilinear_t)
    pv = np.einsum("nd,kpd->nkp", V, params.bilinear_i)
    return (pt * pv).reshape(T.shape[0], -1), pt, pv


def _mlp_forward(z, params):
    a1 = z @ params.mlp_w1.T + params.mlp_b1
    h1 = np.maximum(a1, 0.0)
    return h1 @ params.mlp_w2.T + params.mlp_b2, (z, a1, h1)


@dataclass
class FusionOutput:
    h_x: np.ndarray
    h_f: np.ndarray
    alpha: np.ndarray
    interaction: np.ndarray
    interaction_norm: np.ndarray
    cache: dict


def fuse_forward(T: np.ndarray, V: np.ndarray, params: FusionParams) -> FusionOutput:
    """Fuse a batch of (already adapted) text/image rows."""
    if T.shape != V.shape or T.ndim != 2 or T.shape[1] != params.dim:
        raise StructuralError(f"fusion inputs {T.shape} / {V.shape} do not match dim {params.dim}")
    var = params.variant
    n = T.shape[0]
    cache = {"T": T, "V": V}
    if var.has_gate:
        z = T @ params.gate_w[:params.dim] + V @ params.gate_w[params.dim:] + params.gate_b[0]
        alpha = sigmoid(z)
    elif var is Variant.ATTENTION:
        s_t = T @ params.attn_w[0] + params.attn_b[0]
        s_v = V @ params.attn_w[1] + params.attn_b[1]
        # two-way softmax reduces to a logistic of the score difference
        alpha = sigmoid(s_t - s_v)
    else:
        alpha = np.full(n, 0.5)
    cache["alpha"] = alpha

    if var.has_base:
        h_f = alpha[:, None] * T + (1.0 - alpha[:, None]) * V
    else:
        h_f = np.zeros_like(T)

    kind = var.mlp_input
    if kind is None:
        interaction = np.zeros_like(T)
    else:
        if kind == "bilinear":
            zin, pt, pv = _bilinear_features(T, V, params)
            cache["pt"], cache["pv"] = pt, pv
        else:
            zin = np.concatenate([T, V], axis=1)
        interaction, cache["mlp"] = _mlp_forward(zin, params)

    h_x, cache["ln"] = layer_norm_rows(h_f + interaction, params.ln_gain, params.ln_bias, LN_EPS)
    inorm = np.linalg.norm(interaction, axis=1) if kind is not None else np.zeros(n)
    return FusionOutput(h_x, h_f, alpha, interaction, inorm, cache)


def fuse_backward(out: FusionOutput, d_hx: np.ndarray, params: FusionParams):
    """Return ``(dT, dV, grads)`` with ``grads`` covering the variant's tensors."""
    var = params.variant
    c = out.cache
    T, V, alpha = c["T"], c["V"], c["alpha"]
    d = params.dim
    grads: Dict[str, np.ndarray] = {}

    dpre, grads["ln_gain"], grads["ln_bias"] = layer_norm_rows_backward(c["ln"], d_hx)
    dT = np.zeros_like(T)
    dV = np.zeros_like(V)

    kind = var.mlp_input
    if kind is not None:
        zin, a1, h1 = c["mlp"]
        grads["mlp_w2"] = dpre.T @ h1
        grads["mlp_b2"] = dpre.sum(axis=0)
        da1 = (dpre @ params.mlp_w2) * (a1 > 0.0)
        grads["mlp_w1"] = da1.T @ zin
        grads["mlp_b1"] = da1.sum(axis=0)
        dz = da1 @ params.mlp_w1
        if kind == "bilinear":
            pt, pv = c["pt"], c["pv"]
            dz = dz.reshape(pt.shape)
            dpt = dz * pv
            dpv = dz * pt
            grads["bilinear_t"] = np.einsum("nkp,nd->kpd", dpt, T)
            grads["bilinear_i"] = np.einsum("nkp,nd->kpd", dpv, V)
            dT += np.einsum("nkp,kpd->nd", dpt, params.bilinear_t)
            dV += np.einsum("nkp,kpd->nd", dpv, params.bilinear_i)
        else:
            dT += dz[:, :d]
            dV += dz[:, d:]

    if var.has_base:
        a = alpha[:, None]
        dT += a * dpre
        dV += (1.0 - a) * dpre
        dalpha = np.sum(dpre * (T - V), axis=1)
        dlogit = dalpha * alpha * (1.0 - alpha)
        if var.has_gate:
            grads["gate_w"] = np.concatenate([dlogit @ T, dlogit @ V])
            grads["gate_b"] = np.array([dlogit.sum()])
            dT += dlogit[:, None] * params.gate_w[:d]
            dV += dlogit[:, None] * params.gate_w[d:]
        else:
            grads["attn_w"] = np.stack([dlogit @ T, -(dlogit @ V)])
            grads["attn_b"] = np.array([dlogit.sum(), -dlogit.sum()])
            dT += dlogit[:, None] * params.attn_w[0]
            dV -= dlogit[:, None] * params.attn_w[1]
    return dT, dV, grads


def encode_items(text: np.ndarray, image: np.ndarray, params: FusionParams) -> FusionOutput:
    """Adapt raw item embeddings and fuse them."""
    T = text @ params.text_adapter.T
    V = image @ params.image_adapter.T
    out = fuse_forward(T, V, params)
    out.cache["raw_T"], out.cache["raw_V"] = text, image
    return out


def used_tensors(params: FusionParams, include_adapters: Iterable[str] = ADAPTERS) -> tuple:
    return tuple(include_adapters) + params.fusion_tensor_names()
