"""Graded three-part hinge, engagement/relevance task losses, and in-batch
negative mining."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .data import Label, LabeledPair
from .errors import ConfigError

NEGATIVE_MODES = ("topk", "uniform", "weighted")


@dataclass(frozen=True)
class LossConfig:
    eps_plus: float = 0.8
    eps_minus: float = 0.4
    eps_zero: float = 0.2
    m: float = 2.0
    lambda_eng: float = 0.7
    lambda_rel: float = 0.3
    neg_k: int = 3

    def __post_init__(self):
        if not self.eps_plus > self.eps_minus > self.eps_zero:
            raise ConfigError("margins must be ordered: eps_plus > eps_minus > eps_zero")
        if not self.m > 0:
            raise ConfigError(f"exponent m must be positive, got {self.m}")
        if not self.lambda_eng > self.lambda_rel:
            raise ConfigError("task weights must satisfy λ_eng > λ_rel (lambda_eng > lambda_rel)")
        if abs(self.lambda_eng + self.lambda_rel - 1.0) > 1e-12:
            raise ConfigError("task weights must sum to 1")
        if self.neg_k < 0:
            raise ConfigError(f"neg_k must be >= 0, got {self.neg_k}")


@dataclass
class BatchLoss:
    total: float
    eng: float
    rel: float
    per_pair: List[float] = field(default_factory=list)


def _hinge_terms(y_hat: np.ndarray, labels: np.ndarray, cfg: LossConfig):
    """Elementwise loss and derivative d loss / d y_hat."""
    high = labels == Label.HIGH
    low = labels == Label.LOW
    none = labels == Label.NONE
    # signed violation: positive means the margin is broken
    viol = np.where(high, cfg.eps_plus - y_hat,
                    np.where(low, y_hat - cfg.eps_minus, y_hat - cfg.eps_zero))
    sign = np.where(high, -1.0, 1.0)
    v = np.maximum(viol, 0.0)
    loss = v ** cfg.m
    with np.errstate(divide="ignore", invalid="ignore"):
        dv = np.where(viol > 0, cfg.m * v ** (cfg.m - 1.0), 0.0)
    valid = high | low | none
    if not np.all(valid):
        raise ConfigError("labels must be High, Low or None")
    return loss, sign * dv


def three_hinge(y_hat: float, y, cfg: LossConfig = LossConfig()) -> float:
    loss, _ = _hinge_terms(np.array([float(y_hat)]), np.array([int(Label(y))]), cfg)
    return float(loss[0])


def task_losses(scores: Sequence[float], pairs, cfg: LossConfig = LossConfig()):
    """Batch-mean hinge for engagement and relevance labels.

    ``pairs`` is a sequence of :class:`~modalfuse.data.LabeledPair` or of
    ``(y_eng, y_rel)`` tuples aligned with ``scores``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ConfigError("task_losses needs a non-empty batch")
    if len(pairs) != scores.size:
        raise ConfigError(f"{scores.size} scores for {len(pairs)} pairs")
    levels = [(p.y_eng, p.y_rel) if isinstance(p, LabeledPair) else tuple(p) for p in pairs]
    ye = np.array([int(Label(e)) for e, _ in levels])
    yr = np.array([int(Label(r)) for _, r in levels])
    le, _ = _hinge_terms(scores, ye, cfg)
    lr, _ = _hinge_terms(scores, yr, cfg)
    return float(le.mean()), float(lr.mean())


def total_loss(eng: float, rel: float, cfg: LossConfig = LossConfig()) -> float:
    return cfg.lambda_eng * eng + cfg.lambda_rel * rel


def sample_negatives(sim, k: int, exclude: Optional[np.ndarray] = None,
                     mode: str = "topk", rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """Per-row negative column indices from an ``N x N`` query-item similarity matrix.

    ``topk`` takes the ``min(k, candidates)`` largest off-diagonal entries,
    ties to the lower column. ``exclude`` masks extra cells (e.g. items that
    are labeled for the same query elsewhere in the batch). ``uniform`` and
    ``weighted`` draw without replacement from ``rng``; ``weighted`` uses
    softmax(sim) over candidates as the draw distribution.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ConfigError(f"similarity matrix must be square, got {sim.shape}")
    n = sim.shape[0]
    if n < 2:
        raise ConfigError("negative sampling needs a batch of at least 2")
    if k < 0:
        raise ConfigError("k must be >= 0")
    if mode not in NEGATIVE_MODES:
        raise ConfigError(f"unknown negative mode {mode!r}")
    if mode != "topk" and rng is None:
        raise ConfigError(f"mode {mode!r} needs an rng")
    blocked = np.eye(n, dtype=bool)
    if exclude is not None:
        blocked |= np.asarray(exclude, dtype=bool)
    out = []
    cols = np.arange(n)
    for i in range(n):
        cand = cols[~blocked[i]]
        take = min(k, cand.size)
        if take == 0:
            out.append(np.zeros(0, dtype=np.int64))
            continue
        vals = sim[i, cand]
        if mode == "topk":
            # stable sort on -value keeps the lower column first among ties
            order = np.argsort(-vals, kind="stable")[:take]
            out.append(cand[order].astype(np.int64))
        elif mode == "uniform":
            out.append(np.sort(rng.choice(cand, size=take, replace=False)).astype(np.int64))
        else:
            w = np.exp(vals - vals.max())
            out.append(np.sort(rng.choice(cand, size=take, replace=False, p=w / w.sum())).astype(np.int64))
    return out


def batch_objective(sim: np.ndarray, y_eng: np.ndarray, y_rel: np.ndarray,
                    negatives: Sequence[np.ndarray], cfg: LossConfig):
    """Weighted total over diagonal (labeled) cells plus mined negatives.

    Mined negatives carry label None for both tasks. Returns
    ``(BatchLoss, d_total/d_sim)``.
    """
    n = sim.shape[0]
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    for i, neg in enumerate(negatives):
        rows.append(np.full(len(neg), i))
        cols.append(np.asarray(neg, dtype=np.int64))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    n_neg = r.size - n
    ye = np.concatenate([np.asarray(y_eng), np.zeros(n_neg, dtype=np.int64)])
    yr = np.concatenate([np.asarray(y_rel), np.zeros(n_neg, dtype=np.int64)])
    s = sim[r, c]
    le, ge = _hinge_terms(s, ye, cfg)
    lr, gr = _hinge_terms(s, yr, cfg)
    count = r.size
    eng = float(le.mean())
    rel = float(lr.mean())
    per = cfg.lambda_eng * le + cfg.lambda_rel * lr
    dsim = np.zeros_like(sim)
    np.add.at(dsim, (r, c), (cfg.lambda_eng * ge + cfg.lambda_rel * gr) / count)
    return BatchLoss(total_loss(eng, rel, cfg), eng, rel, per.tolist()), dsim
