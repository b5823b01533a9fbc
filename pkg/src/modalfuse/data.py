"""Dataset records, the binary embedding/pairs formats, and batching.

On-disk layout (all little-endian)::

    embeddings: b"MMRE" u32 version=1, u32 dim, u64 n_queries, u64 n_items
                per query: str id, dim x f32
                per item:  str id, dim x f32 text, dim x f32 image, str category
    pairs:      b"MMPR" u32 version=1, u64 n_pairs
                per pair:  str query_id, str item_id, u8 y_eng, u8 y_rel

``str`` is a u16 byte length followed by UTF-8 bytes.
"""
from __future__ import annotations

import enum
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError

EMB_MAGIC = b"MMRE"
PAIRS_MAGIC = b"MMPR"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class Label(enum.IntEnum):
    """Graded interaction level. The integer value doubles as the nDCG gain."""

    NONE = 0
    LOW = 1
    HIGH = 2


@dataclass
class QueryRecord:
    query_id: str
    embedding: np.ndarray


@dataclass
class ItemRecord:
    item_id: str
    text_embedding: np.ndarray
    image_embedding: np.ndarray
    category_tag: str = ""


@dataclass(frozen=True)
class LabeledPair:
    query_id: str
    item_id: str
    y_eng: Label
    y_rel: Label


@dataclass
class Dataset:
    dim: int
    queries: List[QueryRecord]
    items: List[ItemRecord]
    pairs: List[LabeledPair]
    _qpos: Dict[str, int] = field(init=False, repr=False)
    _ipos: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dim < 1:
            raise IntegrityError(f"dataset dim must be >= 1, got {self.dim}")
        self._qpos = {}
        for i, q in enumerate(self.queries):
            if q.query_id in self._qpos:
                raise IntegrityError(f"duplicate query id {q.query_id!r}")
            self._qpos[q.query_id] = i
            _check_vec(q.embedding, self.dim, f"query {q.query_id!r}")
        self._ipos = {}
        for i, it in enumerate(self.items):
            if it.item_id in self._ipos:
                raise IntegrityError(f"duplicate item id {it.item_id!r}")
            self._ipos[it.item_id] = i
            _check_vec(it.text_embedding, self.dim, f"item {it.item_id!r} text")
            _check_vec(it.image_embedding, self.dim, f"item {it.item_id!r} image")
        for p in self.pairs:
            if p.query_id not in self._qpos:
                raise IntegrityError(f"pair references unknown query {p.query_id!r}")
            if p.item_id not in self._ipos:
                raise IntegrityError(f"pair references unknown item {p.item_id!r}")
            if not isinstance(p.y_eng, Label) or not isinstance(p.y_rel, Label):
                raise IntegrityError(f"pair ({p.query_id!r}, {p.item_id!r}) has a non-Label level")

    # dense views used by training and evaluation

    def query_index(self, query_id: str) -> int:
        return self._qpos[query_id]

    def item_index(self, item_id: str) -> int:
        return self._ipos[item_id]

    def query_matrix(self) -> np.ndarray:
        return _stack([q.embedding for q in self.queries], self.dim)

    def text_matrix(self) -> np.ndarray:
        return _stack([it.text_embedding for it in self.items], self.dim)

    def image_matrix(self) -> np.ndarray:
        return _stack([it.image_embedding for it in self.items], self.dim)

    def pair_arrays(self):
        """``(query_idx, item_idx, y_eng, y_rel)`` as integer arrays aligned with ``pairs``."""
        qi = np.fromiter((self._qpos[p.query_id] for p in self.pairs), dtype=np.int64, count=len(self.pairs))
        ii = np.fromiter((self._ipos[p.item_id] for p in self.pairs), dtype=np.int64, count=len(self.pairs))
        ye = np.fromiter((int(p.y_eng) for p in self.pairs), dtype=np.int64, count=len(self.pairs))
        yr = np.fromiter((int(p.y_rel) for p in self.pairs), dtype=np.int64, count=len(self.pairs))
        return qi, ii, ye, yr

    def query_categories(self) -> Dict[str, str]:
        """Most common category tag among each query's labeled items ("untagged" if none)."""
        counts: Dict[str, Counter] = {}
        for p in self.pairs:
            tag = self.items[self._ipos[p.item_id]].category_tag or "untagged"
            counts.setdefault(p.query_id, Counter())[tag] += 1
        # ties resolve to the lexicographically smallest tag
        return {q: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for q, c in counts.items()}


def _check_vec(v: np.ndarray, dim: int, what: str) -> None:
    if v.shape != (dim,):
        raise IntegrityError(f"{what} embedding has shape {v.shape}, dataset dim is {dim}")
    if not np.all(np.isfinite(v)):
        raise IntegrityError(f"{what} embedding has non-finite entries")


def _stack(rows: Sequence[np.ndarray], dim: int) -> np.ndarray:
    if not rows:
        return np.zeros((0, dim))
    return np.asarray(np.stack(rows), dtype=np.float64)


# -- binary I/O ---------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ConfigError(f"identifier too long ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<H", what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: {what} is not valid UTF-8") from exc

    def floats(self, n: int, what: str) -> np.ndarray:
        raw = self.take(4 * n, what)
        return np.frombuffer(raw, dtype=_F32).astype(np.float64)


def _header(r: _Reader, magic: bytes) -> None:
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"{r.path}: bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.path}: unsupported format version {version}")


def _f32(v: np.ndarray) -> bytes:
    return np.asarray(v, dtype=_F32).tobytes()


def write_dataset(ds: Dataset, embeddings_path, pairs_path) -> None:
    ds.validate()
    emb = [EMB_MAGIC, struct.pack("<IIQQ", FORMAT_VERSION, ds.dim, len(ds.queries), len(ds.items))]
    for q in ds.queries:
        emb += [_pack_str(q.query_id), _f32(q.embedding)]
    for it in ds.items:
        emb += [_pack_str(it.item_id), _f32(it.text_embedding), _f32(it.image_embedding),
                _pack_str(it.category_tag or "")]
    prs = [PAIRS_MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(ds.pairs))]
    for p in ds.pairs:
        prs += [_pack_str(p.query_id), _pack_str(p.item_id), struct.pack("<BB", int(p.y_eng), int(p.y_rel))]
    with open(embeddings_path, "wb") as fh:
        fh.write(b"".join(emb))
    with open(pairs_path, "wb") as fh:
        fh.write(b"".join(prs))


def load_dataset(embeddings_path, pairs_path) -> Dataset:
    with open(embeddings_path, "rb") as fh:
        r = _Reader(fh.read(), str(embeddings_path))
    _header(r, EMB_MAGIC)
    dim, nq, ni = r.unpack("<IQQ", "counts")
    queries = []
    for _ in range(nq):
        qid = r.string("query id")
        queries.append(QueryRecord(qid, r.floats(dim, f"query {qid!r} embedding")))
    items = []
    for _ in range(ni):
        iid = r.string("item id")
        t = r.floats(dim, f"item {iid!r} text embedding")
        v = r.floats(dim, f"item {iid!r} image embedding")
        items.append(ItemRecord(iid, t, v, r.string(f"item {iid!r} category")))
    if r.pos != len(r.buf):
        raise FormatError(f"{r.path}: {len(r.buf) - r.pos} trailing bytes")

    with open(pairs_path, "rb") as fh:
        r = _Reader(fh.read(), str(pairs_path))
    _header(r, PAIRS_MAGIC)
    (n_pairs,) = r.unpack("<Q", "pair count")
    pairs = []
    for _ in range(n_pairs):
        qid = r.string("pair query id")
        iid = r.string("pair item id")
        ye, yr = r.unpack("<BB", "labels")
        try:
            pairs.append(LabeledPair(qid, iid, Label(ye), Label(yr)))
        except ValueError as exc:
            raise FormatError(f"{r.path}: invalid label level in pair ({qid!r}, {iid!r})") from exc
    if r.pos != len(r.buf):
        raise FormatError(f"{r.path}: {len(r.buf) - r.pos} trailing bytes")
    return Dataset(dim, queries, items, pairs)


def make_batches(ds_or_count, batch_size: int, seed: int) -> List[np.ndarray]:
    """Shuffle pair indices under ``seed`` and cut them into batches.

    A trailing batch shorter than 2 is dropped, since in-batch negatives
    need at least one off-diagonal entry.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    n = ds_or_count if isinstance(ds_or_count, (int, np.integer)) else len(ds_or_count.pairs)
    order = np.random.default_rng(seed).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def subset(ds: Dataset, query_ids: Optional[set] = None) -> Dataset:
    """Dataset restricted to pairs of the given queries (all items kept)."""
    if query_ids is None:
        return ds
    qs = [q for q in ds.queries if q.query_id in query_ids]
    ps = [p for p in ds.pairs if p.query_id in query_ids]
    return Dataset(ds.dim, qs, ds.items, ps)
