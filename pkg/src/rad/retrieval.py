"""Inverted index over categorical rows with IDF-weighted exact-match ranking."""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset

INDEX_MAGIC = b"RADI"
INDEX_VERSION = 1


class IndexEmptyError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievedSet:
    row_ids: np.ndarray
    scores: np.ndarray

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.row_ids.tolist(), self.scores.tolist()))

    def __len__(self) -> int:
        return len(self.row_ids)


class InvertedIndex:
    """Postings per ``(column, value)`` over an immutable :class:`Dataset`.

    Postings are held as positions into ``source``; ``postings(c, v)``
    exposes them as ascending row ids.
    """

    def __init__(self, source: Dataset):
        self.source = source
        self.doc_count = len(source)
        self._lock = threading.Lock()
        self.query_count = 0
        self._pos: list[list[np.ndarray]] = []
        self._counts: list[np.ndarray] = []
        for c, card in enumerate(source.schema.cardinalities):
            col = source.features[:, c]
            # stable sort by value then row id keeps every postings list ascending in row id
            order = np.lexsort((source.row_ids, col))
            counts = np.bincount(col, minlength=card)
            self._pos.append(np.split(order, np.cumsum(counts)[:-1]))
            self._counts.append(counts)
        self._row_order = np.argsort(source.row_ids, kind="stable")

    # -- statistics

    def value_count(self, column: int, value: int) -> int:
        counts = self._counts[column]
        return int(counts[value]) if 0 <= value < len(counts) else 0

    def postings(self, column: int, value: int) -> np.ndarray:
        if not 0 <= value < len(self._pos[column]):
            return np.empty(0, dtype=np.int64)
        return self.source.row_ids[self._pos[column][value]]

    def keys(self) -> Iterable[tuple[int, int]]:
        for c, counts in enumerate(self._counts):
            for v in np.flatnonzero(counts):
                yield c, int(v)

    def idf(self, column: int, value: int) -> float:
        if self.doc_count == 0:
            raise IndexEmptyError("idf undefined on an empty index")
        n, na = self.doc_count, self.value_count(column, value)
        return float(np.log((n - na + 0.5) / (na + 0.5)))

    def position_of(self, row_id: int) -> int:
        ids = self.source.row_ids
        k = np.searchsorted(ids, row_id, sorter=self._row_order)
        if k >= len(ids) or ids[self._row_order[k]] != row_id:
            raise KeyError(f"row_id {row_id} is not in the indexed dataset")
        return int(self._row_order[k])

    def positions_of(self, row_ids: np.ndarray) -> np.ndarray:
        ids = self.source.row_ids
        row_ids = np.asarray(row_ids, dtype=np.int64)
        k = np.searchsorted(ids, row_ids, sorter=self._row_order)
        k = np.minimum(k, len(ids) - 1)
        found = self._row_order[k]
        if row_ids.size and (len(ids) == 0 or (ids[found] != row_ids).any()):
            raise KeyError("row_id not in the indexed dataset")
        return found.astype(np.int64)

    # -- scoring

    def rank_score(self, query: Sequence[int], doc_row_id: int) -> float:
        doc = self.source.features[self.position_of(doc_row_id)]
        score = 0.0
        for c, (q, v) in enumerate(zip(query, doc)):
            if q == v:
                score += self.idf(c, int(q))
        return score

    def retrieve_topk(self, query: Sequence[int], k: int, exclude: Iterable[int] | None = None) -> RetrievedSet:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        with self._lock:
            self.query_count += 1
        empty = RetrievedSet(np.empty(0, dtype=np.int64), np.empty(0))
        if self.doc_count == 0:
            return empty
        # document-at-a-time accumulation into a dense buffer; column order fixed
        acc = np.zeros(self.doc_count)
        pieces = []
        for c, q in enumerate(query):
            q = int(q)
            if 0 <= q < len(self._pos[c]) and self._counts[c][q]:
                p = self._pos[c][q]
                acc[p] += self.idf(c, q)
                pieces.append(p)
        if not pieces:
            return empty
        if len(pieces) == 1:
            cand = pieces[0]
        else:
            seen = np.zeros(self.doc_count, dtype=bool)
            for p in pieces:
                seen[p] = True
            cand = np.flatnonzero(seen)
        if exclude is not None:
            ex = np.fromiter(exclude, dtype=np.int64)
            if ex.size:
                cand = cand[~np.isin(self.source.row_ids[cand], ex)]
        scores = acc[cand]
        if len(cand) > k:
            # everything tied with the k-th best score must survive to the tie-break
            kth = -np.partition(-scores, k - 1)[k - 1]
            keep = scores >= kth
            cand, scores = cand[keep], scores[keep]
        ids = self.source.row_ids[cand]
        order = np.lexsort((ids, -scores))[:k]
        return RetrievedSet(ids[order], scores[order])

    def retrieve_batch(self, queries: np.ndarray, k: int, exclude_ids: np.ndarray | None = None) -> list[RetrievedSet]:
        out = []
        for i, q in enumerate(queries):
            ex = None if exclude_ids is None or exclude_ids[i] < 0 else (int(exclude_ids[i]),)
            out.append(self.retrieve_topk(q, k, ex))
        return out


def build_index(d: Dataset) -> InvertedIndex:
    return InvertedIndex(d)


def idf(idx: InvertedIndex, column: int, value: int) -> float:
    return idx.idf(column, value)


def rank_score(idx: InvertedIndex, query: Sequence[int], doc_row_id: int) -> float:
    return idx.rank_score(query, doc_row_id)


def retrieve_topk(idx: InvertedIndex, query: Sequence[int], k: int,
                  exclude: Iterable[int] | None = None) -> RetrievedSet:
    return idx.retrieve_topk(query, k, exclude)


class NeighborCache:
    """Memoised top-K lookups for model code.

    ``requests`` counts every per-sample lookup (cache hits included), which
    is what the retrieval-freedom checks observe; the index's own
    ``query_count`` counts actual searches.
    """

    def __init__(self, index: InvertedIndex, k: int, memo: bool = True):
        self.index = index
        self.k = k
        self.memo = memo
        self.requests = 0
        self._memo: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def lookup(self, features: np.ndarray, exclude_ids: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Positions ``[B, k]`` into the source (-1 padded) and a validity mask."""
        b = len(features)
        self.requests += b
        pos = np.full((b, self.k), -1, dtype=np.int64)
        for i in range(b):
            ex = -1 if exclude_ids is None else int(exclude_ids[i])
            key = (features[i].tobytes(), ex)
            hit = self._memo.get(key) if self.memo else None
            if hit is None:
                res = self.index.retrieve_topk(features[i], self.k, None if ex < 0 else (ex,))
                hit = (self.index.positions_of(res.row_ids) if len(res) else np.empty(0, np.int64),)
                if self.memo:
                    self._memo[key] = hit
            p = hit[0]
            pos[i, :len(p)] = p
        return pos, pos >= 0


# ---------------------------------------------------------------- persistence


def save_index(idx: InvertedIndex, path: str | Path) -> None:
    out = bytearray(INDEX_MAGIC)
    out += struct.pack("<BQI", INDEX_VERSION, idx.doc_count, len(idx._counts))
    for c, counts in enumerate(idx._counts):
        out += struct.pack("<I", len(counts))
        for v in range(len(counts)):
            ids = idx.postings(c, v)
            out += struct.pack("<Q", len(ids)) + np.ascontiguousarray(ids, dtype="<i8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_index(path: str | Path, source: Dataset) -> InvertedIndex:
    """Rebuild an index from its file; ``source`` must be the dataset it was built on."""
    raw = Path(path).read_bytes()
    if raw[:4] != INDEX_MAGIC:
        raise ValueError(f"{path}: not an index file")
    version, doc_count, n_cols = struct.unpack_from("<BQI", raw, 4)
    if version != INDEX_VERSION:
        raise ValueError(f"{path}: unsupported index version {version}")
    if doc_count != len(source) or n_cols != source.schema.n_features:
        raise ValueError(f"{path}: index does not describe the given dataset")
    idx = InvertedIndex.__new__(InvertedIndex)
    idx.source, idx.doc_count = source, int(doc_count)
    idx._lock, idx.query_count = threading.Lock(), 0
    idx._row_order = np.argsort(source.row_ids, kind="stable")
    idx._pos, idx._counts = [], []
    pos = 4 + struct.calcsize("<BQI")
    for _ in range(n_cols):
        (nv,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        lists, counts = [], np.zeros(nv, dtype=np.int64)
        for v in range(nv):
            (m,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            ids = np.frombuffer(raw, dtype="<i8", count=m, offset=pos)
            pos += 8 * m
            lists.append(idx.positions_of(ids) if m else np.empty(0, dtype=np.int64))
            counts[v] = m
        idx._pos.append(lists)
        idx._counts.append(counts)
    return idx
