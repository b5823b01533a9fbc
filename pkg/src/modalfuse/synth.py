"""Seeded synthetic benchmark with planted modality structure.

Each query gets a latent intent vector ``u`` (a topic center plus a private
direction). Each of its items gets a latent vector ``z`` with
``cos(u, z) = a``, ``a ~ U(0, 1)``; relevance labels threshold ``a``.
Observed embeddings mix ``z`` with per-item nuisance directions::

    text  = normalize(w z + (1 - w) n_t + sigma e_t + gamma c_text[cat])
    image = normalize((1 - w) z + w n_v + sigma e_v + gamma c_image[cat])

where ``w`` is the category's text weight and ``c_*[cat]`` is a per-category
signature direction, which is what lets a content-conditioned gate tell
categories apart. Queries are ``normalize(u + sigma e_q)``. Image vectors are
finally rotated by a fixed orthogonal "image map" (``modality_gap`` sets how
far it is from the identity), so queries and images start misaligned.

Items in ``interaction_categories`` carry a random sign ``s = +-1``: the text
holds ``s z`` instead of ``z`` and the image gains ``interaction_cue * s`` along a
fixed cue direction. Undoing the sign needs a product of an image feature
and the text vector, so only a multiplicative cross-modal term can use the
text half of these items.

Random numbers come from numpy's PCG64 (``numpy.random.default_rng``). The
"world" (topic centers, category signatures) is drawn from stream
``[seed, 0]``; the ``train`` and ``eval`` splits draw queries and items from
streams ``[seed, 1]`` and ``[seed, 2]``, so both splits share one world.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .data import Dataset, ItemRecord, Label, LabeledPair, QueryRecord
from .errors import ConfigError
from .kvconfig import coerce, parse_kv, read_kv

SPLITS = {"train": 1, "eval": 2}


@dataclass(frozen=True)
class SyntheticSpec:
    dim: int = 64
    n_topics: int = 8
    n_queries: int = 200
    items_per_query: int = 20
    noise_sigma: float = 0.1
    categories: Tuple[Tuple[str, float], ...] = (("text_driven", 0.9), ("image_driven", 0.1), ("joint", 0.5))
    theta_high: float = 0.6
    theta_low: float = 0.3
    seed: int = 7
    label_flip: float = 0.05
    category_signal: float = 0.3
    topic_weight: float = 0.6
    interaction_categories: Tuple[str, ...] = ("joint",)
    interaction_cue: float = 0.5
    modality_gap: float = 0.0
    split: str = "train"

    def __post_init__(self):
        if self.dim < 1 or self.n_topics < 1:
            raise ConfigError("dim and n_topics must be >= 1")
        if self.n_topics > self.dim:
            raise ConfigError(f"n_topics ({self.n_topics}) cannot exceed dim ({self.dim})")
        if self.n_queries < 0 or self.items_per_query < 0:
            raise ConfigError("counts must be non-negative")
        if not 0 < self.theta_low < self.theta_high <= 1:
            raise ConfigError("thresholds must satisfy 0 < theta_low < theta_high <= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not self.categories:
            raise ConfigError("at least one category is required")
        for tag, w in self.categories:
            if not 0.0 <= w <= 1.0:
                raise ConfigError(f"text weight for {tag!r} must lie in [0, 1]")
        if not 0.0 <= self.label_flip <= 1.0:
            raise ConfigError("label_flip must lie in [0, 1]")
        if self.modality_gap < 0:
            raise ConfigError("modality_gap must be >= 0")
        if self.interaction_cue < 0:
            raise ConfigError("interaction_cue must be >= 0")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {sorted(SPLITS)}")


def _parse_categories(raw: str) -> Tuple[Tuple[str, float], ...]:
    out = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        tag, sep, w = part.partition(":")
        if not sep:
            raise ValueError(f"category entry {part!r} should be tag:weight")
        out.append((tag.strip(), float(w)))
    return tuple(out)


_SCHEMA = {
    "dim": int, "n_topics": int, "n_queries": int, "items_per_query": int,
    "noise_sigma": float, "categories": _parse_categories, "theta_high": float,
    "theta_low": float, "seed": int, "label_flip": float, "category_signal": float,
    "topic_weight": float, "split": str,
    "interaction_categories": lambda raw: tuple(t.strip() for t in raw.split(",") if t.strip()),
    "interaction_cue": float, "modality_gap": float,
}


def spec_from_kv(values: Dict[str, str], source: str = "<spec>") -> SyntheticSpec:
    return SyntheticSpec(**coerce(values, _SCHEMA, source))


def load_spec(path) -> SyntheticSpec:
    return spec_from_kv(read_kv(path), str(path))


def spec_to_kv(spec: SyntheticSpec) -> Dict[str, object]:
    out = dict(spec.__dict__)
    out["categories"] = ",".join(f"{t}:{w}" for t, w in spec.categories)
    out["interaction_categories"] = ",".join(spec.interaction_categories)
    return out


STANDARD_PRESET = """\
# standard synthetic benchmark
dim=64
n_topics=8
n_queries=200
items_per_query=20
noise_sigma=0.1
categories=text_driven:0.9,image_driven:0.1,joint:0.5
theta_high=0.6
theta_low=0.3
seed=7
label_flip=0.05
category_signal=0.3
topic_weight=0.6
interaction_categories=joint
interaction_cue=0.5
modality_gap=0.5
split=train
"""

PRESETS = {"standard": STANDARD_PRESET}


def preset(name: str = "standard", **overrides) -> SyntheticSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    spec = spec_from_kv(parse_kv(PRESETS[name], name), name)
    return SyntheticSpec(**{**spec.__dict__, **overrides}) if overrides else spec


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _rotation(rng: np.random.Generator, d: int, gap: float) -> np.ndarray:
    """Orthogonal polar factor of ``I + gap * G / sqrt(d)``; identity when gap is 0."""
    g = rng.standard_normal((d, d))
    if gap == 0.0:
        return np.eye(d)
    u, _, vt = np.linalg.svd(np.eye(d) + gap * g / np.sqrt(d))
    return u @ vt


def _f32(v: np.ndarray) -> np.ndarray:
    # datasets are stored in single precision; round now so write/load is exact
    return v.astype(np.float32).astype(np.float64)


def _grade(a: float, spec: SyntheticSpec) -> Label:
    if a >= spec.theta_high:
        return Label.HIGH
    if a >= spec.theta_low:
        return Label.LOW
    return Label.NONE


def generate(spec: SyntheticSpec) -> Dataset:
    d = spec.dim
    world = np.random.default_rng([spec.seed, 0])
    topics = _unit_rows(world, spec.n_topics, d)
    sig_text = _unit_rows(world, len(spec.categories), d)
    sig_image = _unit_rows(world, len(spec.categories), d)
    cue_dir = _unit_rows(world, 1, d)[0]
    image_map = _rotation(world, d, spec.modality_gap)

    rng = np.random.default_rng([spec.seed, SPLITS[spec.split]])
    prefix = "" if spec.split == "train" else "e"
    sigma = spec.noise_sigma
    scale = 1.0 / np.sqrt(d)
    queries, items, pairs = [], [], []
    for qn in range(spec.n_queries):
        c = qn % len(spec.categories)
        tag, w = spec.categories[c]
        topic = rng.integers(spec.n_topics)
        u = _unit(spec.topic_weight * topics[topic] + _unit_rows(rng, 1, d)[0])
        qid = f"{prefix}q{qn:05d}"
        queries.append(QueryRecord(qid, _f32(_unit(u + sigma * scale * rng.standard_normal(d)))))
        for j in range(spec.items_per_query):
            a = rng.uniform(0.0, 1.0)
            r = rng.standard_normal(d)
            r -= (r @ u) * u
            z = a * u + np.sqrt(1.0 - a * a) * _unit(r)
            n_t, n_v = _unit_rows(rng, 2, d)
            e_t, e_v = rng.standard_normal((2, d)) * scale
            sign = 1.0 - 2.0 * rng.integers(2) if tag in spec.interaction_categories else 1.0
            text = w * sign * z + (1.0 - w) * n_t + sigma * e_t + spec.category_signal * sig_text[c]
            image = (1.0 - w) * z + w * n_v + sigma * e_v + spec.category_signal * sig_image[c]
            if tag in spec.interaction_categories:
                image = image + spec.interaction_cue * sign * cue_dir
            iid = f"{prefix}x{qn:05d}_{j:03d}"
            items.append(ItemRecord(iid, _f32(_unit(text)), _f32(image_map @ _unit(image)), tag))
            y_rel = _grade(a, spec)
            y_eng = y_rel
            if rng.uniform() < spec.label_flip:
                others = [lv for lv in Label if lv is not y_rel]
                y_eng = others[rng.integers(len(others))]
            pairs.append(LabeledPair(qid, iid, y_eng, y_rel))
    return Dataset(d, queries, items, pairs)
