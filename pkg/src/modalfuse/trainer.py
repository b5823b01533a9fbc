"""Curriculum training (query-modality alignment, then fusion alignment),
Adam updates, run configs, and checkpoints."""
from __future__ import annotations

import dataclasses
import enum
import io
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, make_batches
from .errors import ConfigError, FormatError, NumericalError, StructuralError
from .fusion import ADAPTERS, FusionParams, Variant, encode_items, fuse_backward
from .kvconfig import coerce, parse_bool, parse_optional_float, read_kv
from .numerics import normalize_rows, normalize_rows_backward
from .objectives import NEGATIVE_MODES, BatchLoss, LossConfig, batch_objective, sample_negatives

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    QUERY_TEXT = "QueryTextAlign"
    QUERY_IMAGE = "QueryImageAlign"
    FUSION = "FusionAlign"

    @classmethod
    def parse(cls, name) -> "Stage":
        if isinstance(name, cls):
            return name
        for s in cls:
            if s.value.lower() == str(name).strip().lower():
                return s
        raise ConfigError(f"unknown stage {name!r}; expected one of {[s.value for s in cls]}")

    @property
    def modality(self) -> Optional[str]:
        return {Stage.QUERY_TEXT: "text", Stage.QUERY_IMAGE: "image"}.get(self)


@dataclass(frozen=True)
class TrainConfig:
    stage: Stage = Stage.FUSION
    batch_size: int = 64
    epochs: int = 20
    learning_rate: float = 1e-3
    seed: int = 7
    loss: LossConfig = LossConfig()
    variant: Variant = Variant.MOE_BILINEAR
    grad_clip: Optional[float] = 5.0
    finetune_adapters: bool = True
    negatives: str = "topk"
    heads: int = 4
    proj_dim: int = 0       # 0 -> dim // 4
    hidden: int = 0         # 0 -> dim
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage.parse(self.stage))
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.negatives not in NEGATIVE_MODES:
            raise ConfigError(f"negatives must be one of {NEGATIVE_MODES}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or none")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_kv(self) -> Dict[str, object]:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "loss":
                continue
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, enum.Enum) else ("none" if v is None else v)
        for f in dataclasses.fields(LossConfig):
            out[f.name] = getattr(self.loss, f.name)
        return out


_TRAIN_SCHEMA = {
    "stage": Stage.parse, "batch_size": int, "epochs": int, "learning_rate": float,
    "seed": int, "variant": Variant.parse, "grad_clip": parse_optional_float,
    "finetune_adapters": parse_bool, "negatives": str, "heads": int, "proj_dim": int,
    "hidden": int, "beta1": float, "beta2": float, "adam_eps": float,
}
_LOSS_SCHEMA = {"eps_plus": float, "eps_minus": float, "eps_zero": float, "m": float,
                "lambda_eng": float, "lambda_rel": float, "neg_k": int}


def train_config_from_kv(values: Dict[str, str], source: str = "<config>") -> TrainConfig:
    typed = coerce(values, {**_TRAIN_SCHEMA, **_LOSS_SCHEMA}, source)
    loss_kw = {k: typed.pop(k) for k in list(typed) if k in _LOSS_SCHEMA}
    return TrainConfig(loss=LossConfig(**loss_kw), **typed)


def load_train_config(path) -> TrainConfig:
    return train_config_from_kv(read_kv(path), str(path))


# -- optimizer ----------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def optimizer_step(params: FusionParams, grads: Dict[str, np.ndarray], state: OptimizerState,
                   cfg: TrainConfig) -> Tuple[FusionParams, OptimizerState]:
    """One bias-corrected Adam update of the tensors named in ``grads`` (in place)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        if g.shape != getattr(params, name).shape:
            raise StructuralError(f"gradient for {name} has shape {g.shape}")
    grads = {k: g.copy() for k, g in grads.items()}
    clip_global_norm(grads, cfg.grad_clip)
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p = getattr(params, name)
        p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return params, state


# -- loss and gradients for one batch ------------------------------------------------


@dataclass
class BatchData:
    queries: np.ndarray     # raw query embeddings, one row per pair
    text: np.ndarray
    image: np.ndarray
    y_eng: np.ndarray
    y_rel: np.ndarray
    exclude: np.ndarray     # cells that must not be mined as negatives


def gather_batch(ds_arrays, idx: np.ndarray) -> BatchData:
    Q, T, V, qi, ii, ye, yr = ds_arrays
    q, it = qi[idx], ii[idx]
    exclude = (q[:, None] == q[None, :]) | (it[:, None] == it[None, :])
    return BatchData(Q[q], T[it], V[it], ye[idx], yr[idx], exclude)


def dataset_arrays(ds: Dataset):
    qi, ii, ye, yr = ds.pair_arrays()
    return ds.query_matrix(), ds.text_matrix(), ds.image_matrix(), qi, ii, ye, yr


def batch_loss_and_grads(params: FusionParams, batch: BatchData, stage: Stage, loss_cfg: LossConfig,
                         negatives: str = "topk", rng: Optional[np.random.Generator] = None,
                         neg_k: Optional[int] = None, need_grads: bool = True):
    """Forward and backward for one batch.

    Returns ``(BatchLoss, grads, mean_alpha)``. ``grads`` covers every tensor
    on the stage's scoring path; callers drop the ones they keep frozen.
    With ``need_grads=False`` the backward pass is skipped and ``grads`` is empty.
    """
    Qa = batch.queries @ params.query_adapter.T
    Qn, qnorm = normalize_rows(Qa)
    out = None
    modality = stage.modality
    if modality == "text":
        X = batch.text @ params.text_adapter.T
    elif modality == "image":
        X = batch.image @ params.image_adapter.T
    else:
        out = encode_items(batch.text, batch.image, params)
        X = out.h_x
    Xn, xnorm = normalize_rows(X)
    sim = Qn @ Xn.T
    k = loss_cfg.neg_k if neg_k is None else neg_k
    negs = sample_negatives(sim, k, exclude=batch.exclude, mode=negatives, rng=rng)
    bl, dsim = batch_objective(sim, batch.y_eng, batch.y_rel, negs, loss_cfg)
    if not need_grads:
        return bl, {}, float(out.alpha.mean()) if out is not None else float("nan")

    grads: Dict[str, np.ndarray] = {}
    dQ = normalize_rows_backward(Qn, qnorm, dsim @ Xn)
    dX = normalize_rows_backward(Xn, xnorm, dsim.T @ Qn)
    grads["query_adapter"] = dQ.T @ batch.queries
    if modality == "text":
        grads["text_adapter"] = dX.T @ batch.text
        mean_alpha = float("nan")
    elif modality == "image":
        grads["image_adapter"] = dX.T @ batch.image
        mean_alpha = float("nan")
    else:
        dT, dV, fg = fuse_backward(out, dX, params)
        grads.update(fg)
        grads["text_adapter"] = dT.T @ batch.text
        grads["image_adapter"] = dV.T @ batch.image
        mean_alpha = float(out.alpha.mean())
    return bl, grads, mean_alpha


def trainable_tensors(params: FusionParams, stage: Stage, finetune_adapters: bool = True,
                      freeze: Iterable[str] = ()) -> Tuple[str, ...]:
    if stage is Stage.QUERY_TEXT:
        names = ("query_adapter", "text_adapter")
    elif stage is Stage.QUERY_IMAGE:
        names = ("query_adapter", "image_adapter")
    else:
        names = (ADAPTERS if finetune_adapters else ()) + params.fusion_tensor_names()
    frozen = set(freeze)
    return tuple(n for n in names if n not in frozen)


# -- stage loops ----------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_eng: float
    loss_rel: float
    mean_alpha: float
    reference_loss: Optional[float] = None


@dataclass
class TrainResult:
    params: FusionParams
    history: List[EpochStats]
    state: OptimizerState

    def __iter__(self):
        # allows ``params, history = run_stage2(...)``
        return iter((self.params, self.history))


def history_csv(history: Sequence[EpochStats]) -> str:
    buf = io.StringIO()
    buf.write("epoch,loss_total,loss_eng,loss_rel,mean_alpha\n")
    for h in history:
        alpha = "" if np.isnan(h.mean_alpha) else repr(h.mean_alpha)
        buf.write(f"{h.epoch},{h.loss_total!r},{h.loss_eng!r},{h.loss_rel!r},{alpha}\n")
    return buf.getvalue()


def reference_loss(ds: Dataset, params: FusionParams, stage: Stage, loss_cfg: LossConfig,
                   batch_size: int, seed: int = 0, arrays=None) -> float:
    """Mean total loss with every in-batch off-diagonal item as a negative,
    under a fixed partition. Independent of the mining mode used for training."""
    arrays = arrays if arrays is not None else dataset_arrays(ds)
    vals = []
    for idx in make_batches(len(arrays[3]), batch_size, seed):
        b = gather_batch(arrays, idx)
        bl, _, _ = batch_loss_and_grads(params, b, stage, loss_cfg, "topk", need_grads=False)
        vals.append(bl.total)
    return float(np.mean(vals))


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _run(ds: Dataset, params: FusionParams, cfg: TrainConfig, stage: Stage,
         trainable: Sequence[str], state: Optional[OptimizerState],
         track_reference: bool) -> TrainResult:
    if not ds.pairs:
        raise ConfigError("dataset has no labeled pairs to train on")
    if params.dim != ds.dim:
        raise StructuralError(f"params dim {params.dim} does not match dataset dim {ds.dim}")
    if len(ds.pairs) < 2:
        raise ConfigError("training needs at least 2 labeled pairs")
    params = params.copy()
    state = state if state is not None else OptimizerState()
    arrays = dataset_arrays(ds)
    rng = np.random.default_rng([cfg.seed, 1])
    history: List[EpochStats] = []
    trainable = tuple(trainable)
    for epoch in range(1, cfg.epochs + 1):
        totals, engs, rels, alphas, weights = [], [], [], [], []
        for b_idx, idx in enumerate(make_batches(len(ds.pairs), cfg.batch_size, _epoch_seed(cfg.seed, epoch))):
            batch = gather_batch(arrays, idx)
            bl, grads, alpha = batch_loss_and_grads(params, batch, stage, cfg.loss, cfg.negatives, rng)
            if not np.isfinite(bl.total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b_idx}")
            params, state = optimizer_step(params, {k: grads[k] for k in trainable}, state, cfg)
            totals.append(bl.total)
            engs.append(bl.eng)
            rels.append(bl.rel)
            alphas.append(alpha)
            weights.append(len(idx))
        w = np.asarray(weights, dtype=np.float64)
        stats = EpochStats(
            epoch=epoch,
            loss_total=float(np.average(totals, weights=w)),
            loss_eng=float(np.average(engs, weights=w)),
            loss_rel=float(np.average(rels, weights=w)),
            mean_alpha=float(np.average(alphas, weights=w)) if stage is Stage.FUSION else float("nan"),
        )
        if track_reference:
            stats.reference_loss = reference_loss(ds, params, stage, cfg.loss, cfg.batch_size, arrays=arrays)
        history.append(stats)
        log.debug("%s epoch %d loss %.6f", stage.value, epoch, stats.loss_total)
    params.stages = list(params.stages) + [stage.value]
    return TrainResult(params, history, state)


def run_stage2(ds: Dataset, modality: str, params: FusionParams, cfg: TrainConfig,
               state: Optional[OptimizerState] = None, track_reference: bool = False) -> TrainResult:
    """Align queries with one item modality; only the query adapter and that
    modality's adapter move."""
    stage = {"text": Stage.QUERY_TEXT, "image": Stage.QUERY_IMAGE}.get(modality)
    if stage is None:
        raise ConfigError(f"modality must be 'text' or 'image', got {modality!r}")
    if cfg.stage is not stage:
        raise ConfigError(f"config stage {cfg.stage.value} does not match modality {modality!r}")
    return _run(ds, params, cfg, stage, trainable_tensors(params, stage), state, track_reference)


def run_stage3(ds: Dataset, params: FusionParams, cfg: TrainConfig,
               state: Optional[OptimizerState] = None, freeze: Iterable[str] = (),
               track_reference: bool = False) -> TrainResult:
    """Align queries with fused item embeddings."""
    if cfg.stage is not Stage.FUSION:
        raise ConfigError(f"config stage {cfg.stage.value} is not {Stage.FUSION.value}")
    if params.variant is not cfg.variant:
        raise ConfigError(f"params variant {params.variant.value} differs from config {cfg.variant.value}")
    names = trainable_tensors(params, Stage.FUSION, cfg.finetune_adapters, freeze)
    return _run(ds, params, cfg, Stage.FUSION, names, state, track_reference)


def run_stage2_both(ds: Dataset, params: FusionParams, cfg: TrainConfig) -> FusionParams:
    """Text then image alignment sharing the query adapter."""
    params = run_stage2(ds, "text", params, cfg.replace(stage=Stage.QUERY_TEXT)).params
    return run_stage2(ds, "image", params, cfg.replace(stage=Stage.QUERY_IMAGE)).params


def new_params(ds_dim: int, cfg: TrainConfig) -> FusionParams:
    from .fusion import init_params
    return init_params(ds_dim, cfg.variant, heads=cfg.heads, proj_dim=cfg.proj_dim or None,
                       hidden=cfg.hidden or None, seed=cfg.seed)


def adopt_variant(params: FusionParams, cfg: TrainConfig) -> FusionParams:
    """Carry Stage II adapters into freshly initialized fusion tensors for ``cfg.variant``."""
    fresh = new_params(params.dim, cfg)
    for name in ADAPTERS:
        setattr(fresh, name, getattr(params, name).copy())
    fresh.stages = list(params.stages)
    return fresh


# -- checkpoints ----------------------------------------------------------------------

CKPT_MAGIC = "MMCK"
CKPT_VERSION = 1


def save_checkpoint(params: FusionParams, state: Optional[OptimizerState], cfg: Optional[TrainConfig], path) -> None:
    tensors = dict(params.tensors())
    if state is not None:
        for name in sorted(state.m):
            tensors[f"adam_m.{name}"] = state.m[name]
            tensors[f"adam_v.{name}"] = state.v[name]
    lines = [
        f"{CKPT_MAGIC} {CKPT_VERSION}",
        f"variant={params.variant.value}",
        f"dim={params.dim}",
        f"heads={params.heads}",
        f"proj_dim={params.proj_dim}",
        f"hidden={params.hidden}",
        f"stages={','.join(params.stages)}",
        f"adam_step={state.step if state is not None else 0}",
    ]
    if cfg is not None:
        lines += [f"config.{k}={v}" for k, v in cfg.to_kv().items()]
    offset = 0
    payload = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} {shape} {offset}")
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"".join(payload))


def load_checkpoint(path, expect_dim: Optional[int] = None):
    """Return ``(params, state, cfg)``; ``cfg`` is None when none was recorded."""
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise FormatError(f"{path}: checkpoint header is not terminated by a blank line")
    try:
        lines = raw[:sep].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: checkpoint header is not UTF-8") from exc
    body = raw[sep + 2:]
    first = lines[0].split()
    if len(first) != 2 or first[0] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if first[1] != str(CKPT_VERSION):
        raise FormatError(f"{path}: unsupported checkpoint version {first[1]}")
    meta: Dict[str, str] = {}
    cfg_kv: Dict[str, str] = {}
    entries = []
    for line in lines[1:]:
        if line.startswith("tensor "):
            try:
                _, name, shape, offset = line.split()
                dims = tuple(int(s) for s in shape.split("x")) if shape else ()
                entries.append((name, dims, int(offset)))
            except ValueError as exc:
                raise FormatError(f"{path}: malformed tensor line {line!r}") from exc
        elif "=" in line:
            k, v = line.split("=", 1)
            (cfg_kv if k.startswith("config.") else meta)[k.removeprefix("config.")] = v
        else:
            raise FormatError(f"{path}: malformed header line {line!r}")
    try:
        dim = int(meta["dim"])
        variant = Variant.parse(meta["variant"])
        heads, proj_dim, hidden = int(meta["heads"]), int(meta["proj_dim"]), int(meta["hidden"])
    except (KeyError, ValueError, ConfigError) as exc:
        raise FormatError(f"{path}: incomplete checkpoint metadata ({exc})") from exc
    if expect_dim is not None and dim != expect_dim:
        raise FormatError(f"{path}: checkpoint dim {dim} does not match expected dim {expect_dim}")

    arrays = {}
    for name, dims, offset in entries:
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if offset + nbytes > len(body):
            raise FormatError(f"{path}: payload truncated; tensor {name} is missing")
        arrays[name] = np.frombuffer(body[offset:offset + nbytes], dtype="<f8").reshape(dims).astype(np.float64)
    missing = [n for n in FusionParams.TENSORS if n not in arrays]
    if missing:
        raise FormatError(f"{path}: checkpoint lacks tensor {missing[0]}")
    stages = [s for s in meta.get("stages", "").split(",") if s]
    params = FusionParams(variant=variant, dim=dim, heads=heads, proj_dim=proj_dim, hidden=hidden,
                          stages=stages, **{n: arrays[n] for n in FusionParams.TENSORS})
    try:
        params.validate()
    except (StructuralError, ConfigError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    state = OptimizerState(step=int(meta.get("adam_step", 0)))
    for name, arr in arrays.items():
        if name.startswith("adam_m."):
            state.m[name[7:]] = arr
        elif name.startswith("adam_v."):
            state.v[name[7:]] = arr
    cfg = train_config_from_kv(cfg_kv, str(path)) if cfg_kv else None
    return params, state, cfg
