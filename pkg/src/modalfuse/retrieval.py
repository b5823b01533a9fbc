"""Exact cosine retrieval over fused item embeddings, nDCG, evaluation
reports, the fusion-ablation harness, and gate analysis."""
from __future__ import annotations

import hashlib
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, ItemRecord
from .errors import ConfigError, DomainError, StructuralError
from .fusion import ADAPTERS, FusionParams, Variant, encode_items
from .numerics import as_vector

DEFAULT_CUTOFFS = (1, 3, 9, 24)
OBJECTIVES = ("desirability", "relevance")
MODALITIES = ("fused", "text", "image")


@dataclass
class ItemIndex:
    item_ids: List[str]
    embeddings: np.ndarray      # unit-normalized rows
    dim: int
    modality: str = "fused"
    alpha: Optional[np.ndarray] = None
    interaction_norm: Optional[np.ndarray] = None
    _id_rank: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.item_ids)) != len(self.item_ids):
            raise StructuralError("index item ids must be unique")
        order = sorted(range(len(self.item_ids)), key=self.item_ids.__getitem__)
        self._id_rank = np.empty(len(self.item_ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.item_ids))

    def __len__(self):
        return len(self.item_ids)

    def rank(self, scores: np.ndarray, k: int) -> np.ndarray:
        """Indices of the top ``k`` scores; ties go to the smaller item id."""
        order = np.lexsort((self._id_rank, -scores))
        return order[:k]


def build_index(items: Sequence[ItemRecord], params: FusionParams, modality: str = "fused") -> ItemIndex:
    """Embed every item with frozen ``params``.

    ``modality='text'`` (or ``'image'``) indexes the adapted single-modality
    embedding instead of the fusion output; this is the text-only baseline.
    """
    if modality not in MODALITIES:
        raise ConfigError(f"modality must be one of {MODALITIES}")
    ids = [it.item_id for it in items]
    d = params.dim
    if not items:
        return ItemIndex(ids, np.zeros((0, d)), d, modality)
    T = np.stack([it.text_embedding for it in items]).astype(np.float64)
    V = np.stack([it.image_embedding for it in items]).astype(np.float64)
    if T.shape[1] != d:
        raise StructuralError(f"item dim {T.shape[1]} does not match params dim {d}")
    alpha = inorm = None
    if modality == "text":
        X = T @ params.text_adapter.T
    elif modality == "image":
        X = V @ params.image_adapter.T
    else:
        out = encode_items(T, V, params)
        X, alpha, inorm = out.h_x, out.alpha, out.interaction_norm
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0.0):
        bad = ids[int(np.argmin(norms))]
        raise DomainError(f"item {bad!r} has a zero-norm embedding")
    return ItemIndex(ids, X / norms[:, None], d, modality, alpha, inorm)


@dataclass
class RetrievalResult:
    query_id: str
    item_ids: List[str]
    scores: List[float]


def _adapted_queries(Q: np.ndarray, params: FusionParams) -> np.ndarray:
    Qa = Q @ params.query_adapter.T
    norms = np.linalg.norm(Qa, axis=1)
    if np.any(norms == 0.0):
        raise DomainError("zero-norm query embedding")
    return Qa / norms[:, None]


def retrieve_topk(index: ItemIndex, q, params: FusionParams, k: int, query_id: str = "") -> RetrievalResult:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    q = as_vector(q, "query")
    if q.size != index.dim:
        raise StructuralError(f"query dim {q.size} does not match index dim {index.dim}")
    qn = _adapted_queries(q[None, :], params)[0]
    if len(index) == 0:
        return RetrievalResult(query_id, [], [])
    scores = index.embeddings @ qn
    top = index.rank(scores, k)
    return RetrievalResult(query_id, [index.item_ids[i] for i in top], [float(scores[i]) for i in top])


# -- nDCG ------------------------------------------------------------------------------


def dcg(gains: Sequence[int], k: int) -> float:
    g = np.asarray(gains[:k], dtype=np.float64)
    discounts = np.log2(np.arange(2, g.size + 2))
    return float(np.sum((np.exp2(g) - 1.0) / discounts))


def ndcg_at_k(gains: Sequence[int], k: int, ideal: Optional[Sequence[int]] = None) -> float:
    """nDCG@k of ``gains`` (rank order). ``ideal`` is the query's full labeled
    gain pool; it defaults to ``gains`` itself. Zero IDCG gives 0."""
    if k < 1:
        raise ConfigError(f"cutoff must be >= 1, got {k}")
    pool = sorted(gains if ideal is None else ideal, reverse=True)
    idcg = dcg(pool, k)
    if idcg == 0.0:
        return 0.0
    return min(1.0, dcg(list(gains), k) / idcg)


# -- reports -----------------------------------------------------------------------------


@dataclass
class MetricReport:
    cutoffs: Tuple[int, ...]
    values: Dict[str, Dict[int, float]]
    query_count: int
    excluded_queries: int = 0
    zero_gain_queries: Dict[str, int] = field(default_factory=dict)

    def get(self, objective: str, cutoff: int) -> float:
        return self.values[objective][cutoff]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("objective,cutoff,value,query_count\n")
        for obj in OBJECTIVES:
            for c in self.cutoffs:
                buf.write(f"{obj},{c},{self.values[obj][c]!r},{self.query_count}\n")
        return buf.getvalue()

    def to_table(self, label: str = "Model") -> str:
        return format_table([(label, self)], self.cutoffs)


def format_table(rows: Sequence[Tuple[str, MetricReport]], cutoffs: Sequence[int]) -> str:
    """Aligned text table: one row per model, desirability then relevance columns."""
    width = max([len("Model")] + [len(r[0]) for r in rows])
    cells = [f"@{c}" for c in cutoffs]
    span = 7 * len(cutoffs) - 1
    lines = [
        f"{'':<{width}}  {'Desirability':^{span}}  {'Relevance':^{span}}",
        f"{'Model':<{width}}  " + " ".join(f"{c:>6}" for c in cells) + "  " + " ".join(f"{c:>6}" for c in cells),
    ]
    for name, rep in rows:
        d = " ".join(f"{rep.values['desirability'][c]:6.3f}" for c in cutoffs)
        r = " ".join(f"{rep.values['relevance'][c]:6.3f}" for c in cutoffs)
        lines.append(f"{name:<{width}}  {d}  {r}")
    return "\n".join(lines) + "\n"


def _threads() -> int:
    raw = os.environ.get("MODALFUSE_THREADS", "")
    if raw.strip():
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"MODALFUSE_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def evaluate(ds: Dataset, params: FusionParams, cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
             modality: str = "fused", query_ids: Optional[set] = None,
             index: Optional[ItemIndex] = None) -> MetricReport:
    """Mean nDCG per objective and cutoff, retrieving over every item in ``ds``.

    Retrieved items without a label for the query count as gain 0. Queries
    with no labeled pairs are excluded (and counted); queries whose labeled
    pool has zero gain score 0 and are counted per objective.
    """
    cutoffs = tuple(int(c) for c in cutoffs)
    if not cutoffs:
        raise ConfigError("at least one cutoff is required")
    if min(cutoffs) < 1:
        raise ConfigError("cutoffs must be >= 1")
    if params.dim != ds.dim:
        raise StructuralError(f"params dim {params.dim} does not match dataset dim {ds.dim}")
    index = index if index is not None else build_index(ds.items, params, modality)

    labels: Dict[str, Dict[str, Tuple[int, int]]] = {}
    for p in ds.pairs:
        labels.setdefault(p.query_id, {})[p.item_id] = (int(p.y_eng), int(p.y_rel))
    wanted = [q for q in ds.queries if query_ids is None or q.query_id in query_ids]
    evaluated = sorted((q for q in wanted if q.query_id in labels), key=lambda q: q.query_id)
    excluded = len(wanted) - len(evaluated)

    kmax = max(cutoffs)
    pos = {iid: i for i, iid in enumerate(index.item_ids)}

    def run(chunk):
        out = []
        if not chunk:
            return out
        Qn = _adapted_queries(np.stack([q.embedding for q in chunk]), params)
        S = Qn @ index.embeddings.T if len(index) else np.zeros((len(chunk), 0))
        for row, q in enumerate(chunk):
            lab = labels[q.query_id]
            top = index.rank(S[row], kmax) if len(index) else []
            ret = [index.item_ids[i] for i in top]
            res = {}
            for j, obj in enumerate(OBJECTIVES):
                gains = [lab.get(iid, (0, 0))[j] for iid in ret]
                pool = [v[j] for iid, v in lab.items() if iid in pos]
                res[obj] = ([ndcg_at_k(gains, c, ideal=pool) for c in cutoffs], sum(pool) == 0)
            out.append(res)
        return out

    n_workers = min(_threads(), max(1, len(evaluated) // 64))
    bounds = np.linspace(0, len(evaluated), n_workers + 1).astype(int)
    chunks = [evaluated[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    if n_workers == 1:
        results = [r for ch in chunks for r in run(ch)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            results = [r for part in ex.map(run, chunks) for r in part]

    values: Dict[str, Dict[int, float]] = {}
    zero = {}
    for obj in OBJECTIVES:
        mat = np.array([r[obj][0] for r in results]).reshape(len(results), len(cutoffs))
        means = mat.mean(axis=0) if len(results) else np.zeros(len(cutoffs))
        values[obj] = {c: float(means[i]) for i, c in enumerate(cutoffs)}
        zero[obj] = int(sum(r[obj][1] for r in results))
    return MetricReport(cutoffs, values, len(results), excluded, zero)


def evaluate_by_category(ds: Dataset, params: FusionParams, cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
                         modality: str = "fused") -> Dict[str, MetricReport]:
    cats = ds.query_categories()
    index = build_index(ds.items, params, modality)
    out = {}
    for tag in sorted(set(cats.values())):
        qids = {q for q, c in cats.items() if c == tag}
        out[tag] = evaluate(ds, params, cutoffs, modality, query_ids=qids, index=index)
    return out


# -- gate analysis ------------------------------------------------------------------------


@dataclass
class GateRow:
    category: str
    n_items: int
    mean_alpha: Optional[float]     # None when the variant has no learned mixing weight
    mean_interaction_norm: float


def analyze_gates(ds: Dataset, params: FusionParams) -> List[GateRow]:
    """Per-category mean mixing weight and interaction magnitude; last row is ``overall``."""
    index = build_index(ds.items, params, "fused")
    learned = params.variant is not Variant.MLP
    groups: Dict[str, List[int]] = {}
    for i, it in enumerate(ds.items):
        groups.setdefault(it.category_tag or "untagged", []).append(i)
    rows = []
    for tag in sorted(groups):
        idx = np.asarray(groups[tag])
        rows.append(GateRow(tag, idx.size, float(index.alpha[idx].mean()) if learned else None,
                            float(index.interaction_norm[idx].mean())))
    if ds.items:
        rows.append(GateRow("overall", len(ds.items), float(index.alpha.mean()) if learned else None,
                            float(index.interaction_norm.mean())))
    return rows


def gates_csv(rows: Sequence[GateRow]) -> str:
    buf = io.StringIO()
    buf.write("category,n_items,mean_alpha,mean_interaction_norm\n")
    for r in rows:
        a = "undefined" if r.mean_alpha is None else repr(r.mean_alpha)
        buf.write(f"{r.category},{r.n_items},{a},{r.mean_interaction_norm!r}\n")
    return buf.getvalue()


# -- fusion ablation ------------------------------------------------------------------------


def adapter_checksum(params: FusionParams) -> str:
    h = hashlib.sha256()
    for name in ADAPTERS:
        h.update(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class AblationResult:
    cutoffs: Tuple[int, ...]
    reports: Dict[str, MetricReport]
    params: Dict[str, FusionParams]
    histories: Dict[str, list]
    stage2_checksums: Dict[str, str]

    def table(self) -> str:
        return format_table(list(self.reports.items()), self.cutoffs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("variant,objective,cutoff,value,query_count\n")
        for name, rep in self.reports.items():
            for obj in OBJECTIVES:
                for c in self.cutoffs:
                    buf.write(f"{name},{obj},{c},{rep.values[obj][c]!r},{rep.query_count}\n")
        return buf.getvalue()


ABLATION_CUTOFFS = DEFAULT_CUTOFFS + (10,)


def ablate_fusions(ds: Dataset, base_cfg, variants: Sequence = tuple(Variant),
                   eval_ds: Optional[Dataset] = None, cutoffs: Sequence[int] = ABLATION_CUTOFFS,
                   stage2_params: Optional[FusionParams] = None) -> AblationResult:
    """Shared Stage II, then one Stage III run and evaluation per variant.

    Every variant starts from the same Stage II adapters and the same seed.
    """
    from .trainer import Stage, adopt_variant, new_params, run_stage2_both, run_stage3

    variants = [Variant.parse(v) for v in variants]
    if not variants:
        raise ConfigError("no variants requested")
    eval_ds = eval_ds if eval_ds is not None else ds
    if stage2_params is None:
        stage2_params = run_stage2_both(ds, new_params(ds.dim, base_cfg), base_cfg)
    shared = adapter_checksum(stage2_params)
    reports, trained, histories, sums = {}, {}, {}, {}
    for v in variants:
        cfg = base_cfg.replace(variant=v, stage=Stage.FUSION)
        start = adopt_variant(stage2_params, cfg)
        sums[v.value] = adapter_checksum(start)
        if sums[v.value] != shared:
            raise StructuralError(f"Stage II adapters changed before training {v.value}")
        res = run_stage3(ds, start, cfg)
        trained[v.value] = res.params
        histories[v.value] = res.history
        reports[v.value] = evaluate(eval_ds, res.params, cutoffs)
    return AblationResult(tuple(cutoffs), reports, trained, histories, sums)
