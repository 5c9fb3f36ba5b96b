"""Categorical CTR tables: loading, caching, temporal splitting and synthesis."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SECONDS_PER_DAY = 86400
CACHE_MAGIC = b"RADD"
CACHE_VERSION = 1


class SchemaError(ValueError):
    pass


class RowParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyDatasetError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Schema:
    feature_columns: tuple[str, ...]
    vocab: tuple[dict[str, int], ...]
    label_column: str = "label"
    timestamp_column: str = "timestamp"

    def __post_init__(self):
        cols = list(self.feature_columns)
        if len(set(cols)) != len(cols):
            raise SchemaError(f"duplicate feature columns in {cols}")
        if self.label_column in cols or self.timestamp_column in cols:
            raise SchemaError("label/timestamp column cannot also be a feature column")
        if self.label_column == self.timestamp_column:
            raise SchemaError("label and timestamp column must differ")
        if len(self.vocab) != len(cols):
            raise SchemaError("one vocabulary per feature column required")
        for name, voc in zip(cols, self.vocab):
            if sorted(voc.values()) != list(range(len(voc))):
                raise SchemaError(f"vocabulary of {name!r} is not contiguous from 0")

    @property
    def n_features(self) -> int:
        return len(self.feature_columns)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.vocab)

    def encode(self, values: Sequence[str]) -> np.ndarray:
        """Map raw strings to indices; values never seen map to 0."""
        return np.array([voc.get(v, 0) for voc, v in zip(self.vocab, values)], dtype=np.int64)

    def decode(self, features: Sequence[int]) -> list[str]:
        inverse = [list(v) for v in self.vocab]
        return [inv[i] for inv, i in zip(inverse, features)]


@dataclass(frozen=True)
class Sample:
    row_id: int
    features: tuple[int, ...]
    label: int
    timestamp: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable columnar table.  ``features`` is an ``[N, F]`` index matrix."""

    schema: Schema
    row_ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        n = len(self.row_ids)
        f = self.schema.n_features
        object.__setattr__(self, "row_ids", np.ascontiguousarray(self.row_ids, dtype=np.int64))
        object.__setattr__(self, "features",
                           np.ascontiguousarray(np.asarray(self.features, dtype=np.int64).reshape(n, f)))
        object.__setattr__(self, "labels", np.ascontiguousarray(self.labels, dtype=np.int8))
        object.__setattr__(self, "timestamps", np.ascontiguousarray(self.timestamps, dtype=np.int64))
        if not (len(self.labels) == len(self.timestamps) == n):
            raise SchemaError("row_ids, labels and timestamps must have equal length")
        if n and len(np.unique(self.row_ids)) != n:
            raise SchemaError("row_ids must be unique")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise SchemaError("labels must be 0 or 1")
        if n and f:
            card = np.asarray(self.schema.cardinalities)
            if (self.features < 0).any() or (self.features >= card).any():
                raise SchemaError("feature index outside its column vocabulary")
        for arr in (self.row_ids, self.features, self.labels, self.timestamps):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.row_ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(int(self.row_ids[i]), tuple(int(v) for v in self.features[i]),
                      int(self.labels[i]), int(self.timestamps[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def samples(self) -> list[Sample]:
        return list(self)

    def subset(self, mask_or_idx) -> "Dataset":
        return Dataset(self.schema, self.row_ids[mask_or_idx], self.features[mask_or_idx],
                       self.labels[mask_or_idx], self.timestamps[mask_or_idx])

    def days(self) -> np.ndarray:
        return day_of(self.timestamps)


@dataclass(frozen=True)
class TemporalSplit:
    shifting: Dataset
    train: Dataset
    test: Dataset
    boundaries: tuple[int, int, int]


def day_of(timestamps: np.ndarray) -> np.ndarray:
    """Integer day bucket.  Values below one day's worth of seconds are already day indices."""
    ts = np.asarray(timestamps, dtype=np.int64)
    if ts.size and ts.max() >= SECONDS_PER_DAY:
        return ts // SECONDS_PER_DAY
    return ts


# ---------------------------------------------------------------- CSV


def load_csv(path: str | Path, feature_columns: Sequence[str], label_column: str = "label",
             timestamp_column: str = "timestamp") -> Dataset:
    """Read a header-first UTF-8 CSV; vocabularies follow first appearance order."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyDatasetError(f"{path}: file is empty")
        needed = [*feature_columns, label_column, timestamp_column]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        pos = [header.index(c) for c in needed]
        vocab: list[dict[str, int]] = [{} for _ in feature_columns]
        feats, labels, stamps = [], [], []
        f = len(feature_columns)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RowParseError(line, f"expected {len(header)} fields, got {len(row)}")
            vals = [row[p] for p in pos]
            lab = vals[f]
            if lab not in ("0", "1"):
                raise RowParseError(line, f"label {lab!r} is not 0 or 1")
            try:
                ts = int(vals[f + 1])
            except ValueError:
                raise RowParseError(line, f"timestamp {vals[f + 1]!r} is not an integer") from None
            feats.append([voc.setdefault(v, len(voc)) for voc, v in zip(vocab, vals[:f])])
            labels.append(int(lab))
            stamps.append(ts)
    if not labels:
        raise EmptyDatasetError(f"{path}: no data rows")
    schema = Schema(tuple(feature_columns), tuple(vocab), label_column, timestamp_column)
    return Dataset(schema, np.arange(len(labels)), np.array(feats).reshape(len(labels), f),
                   np.array(labels), np.array(stamps))


def write_csv(d: Dataset, path: str | Path) -> None:
    s = d.schema
    inverse = [list(v) for v in s.vocab]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*s.feature_columns, s.label_column, s.timestamp_column])
    for feats, lab, ts in zip(d.features.tolist(), d.labels.tolist(), d.timestamps.tolist()):
        w.writerow([*(inv[i] for inv, i in zip(inverse, feats)), lab, ts])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def encode_csv(path: str | Path, schema: Schema) -> Dataset:
    """Load a CSV against an existing schema (unseen values map to index 0)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in (*schema.feature_columns, schema.label_column, schema.timestamp_column)
                   if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        feats, labels, stamps = [], [], []
        for line, row in enumerate(reader, start=2):
            if row[schema.label_column] not in ("0", "1"):
                raise RowParseError(line, f"label {row[schema.label_column]!r} is not 0 or 1")
            try:
                stamps.append(int(row[schema.timestamp_column]))
            except ValueError:
                raise RowParseError(line, "timestamp is not an integer") from None
            labels.append(int(row[schema.label_column]))
            feats.append(schema.encode([row[c] for c in schema.feature_columns]))
    if not labels:
        raise EmptyDatasetError(f"{path}: no data rows")
    return Dataset(schema, np.arange(len(labels)), np.array(feats), np.array(labels), np.array(stamps))


# ---------------------------------------------------------------- binary cache


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_dataset(d: Dataset, path: str | Path) -> None:
    s = d.schema
    out = bytearray(CACHE_MAGIC)
    out += struct.pack("<BI", CACHE_VERSION, s.n_features)
    out += _pack_str(s.label_column) + _pack_str(s.timestamp_column)
    for name, voc in zip(s.feature_columns, s.vocab):
        out += _pack_str(name) + struct.pack("<I", len(voc))
        for value in voc:  # dict order is index order
            out += _pack_str(value)
    out += struct.pack("<Q", len(d))
    for arr, dt in ((d.row_ids, "<i8"), (d.timestamps, "<i8"), (d.labels, "i1"), (d.features, "<i8")):
        out += np.ascontiguousarray(arr, dtype=dt).tobytes()
    Path(path).write_bytes(bytes(out))


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise SchemaError(f"{path}: not a dataset cache")
    version, f = struct.unpack_from("<BI", raw, 4)
    if version != CACHE_VERSION:
        raise SchemaError(f"{path}: unsupported cache version {version}")
    pos = 9

    def read_str():
        nonlocal pos
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        s = raw[pos:pos + n].decode("utf-8")
        pos += n
        return s

    label_col, ts_col = read_str(), read_str()
    names, vocab = [], []
    for _ in range(f):
        names.append(read_str())
        (v,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        vocab.append({read_str(): i for i in range(v)})
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    arrays = []
    for dt, count in (("<i8", n), ("<i8", n), ("i1", n), ("<i8", n * f)):
        a = np.frombuffer(raw, dtype=dt, count=count, offset=pos)
        pos += a.nbytes
        arrays.append(a)
    schema = Schema(tuple(names), tuple(vocab), label_col, ts_col)
    return Dataset(schema, arrays[0], arrays[3].reshape(n, f), arrays[2], arrays[1])


# ---------------------------------------------------------------- splitting


def split_temporal(d: Dataset, train_days: int, test_days: int) -> TemporalSplit:
    """Newest ``test_days`` day buckets are test, the ``train_days`` before are train."""
    if len(d) == 0:
        raise SplitError("cannot split an empty dataset")
    if train_days < 1 or test_days < 1:
        raise SplitError("train_days and test_days must be >= 1")
    days = d.days()
    first, last = int(days.min()), int(days.max())
    span = last - first + 1
    if span < train_days + test_days:
        raise SplitError(f"dataset spans {span} days, need at least {train_days + test_days}")
    test_start = last - test_days + 1
    train_start = test_start - train_days
    shifting = days < train_start
    train = (days >= train_start) & (days < test_start)
    test = days >= test_start
    return TemporalSplit(d.subset(shifting), d.subset(train), d.subset(test),
                         (train_start, test_start, last + 1))


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items: int = 400
    n_categories: int = 8
    n_clusters: int = 8
    days: int = 60
    rows_per_day: int = 1000
    drift_angle_per_day: float = math.pi / 45
    association_strength: float = 2.0
    drift_strength: float = 2.0
    noise_std: float = 0.5
    latent_dim: int = 4
    user_jitter: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_items", "n_categories", "n_clusters", "days", "rows_per_day", "latent_dim"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be at least 2")
        if not 0.0 <= self.drift_angle_per_day <= math.pi:
            raise ValueError(f"drift_angle_per_day must lie in [0, pi], got {self.drift_angle_per_day}")
        for name in ("association_strength", "drift_strength", "noise_std", "user_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def generate_synthetic_shift(cfg: SynthConfig) -> Dataset:
    """Users x items table whose click logit mixes a fixed cluster/category
    association with a drift term rotating in a 2-plane of a latent space."""
    rng = np.random.default_rng(cfg.seed)
    user_cluster = rng.integers(cfg.n_clusters, size=cfg.n_users)
    item_category = rng.integers(cfg.n_categories, size=cfg.n_items)
    assoc = rng.uniform(-1.0, 1.0, size=(cfg.n_clusters, cfg.n_categories))
    # user columns of the projection share their cluster's column, so the
    # drifting part of a user's behaviour is mostly a cluster property
    cluster_cols = rng.normal(0.0, 1.0, size=(cfg.latent_dim, cfg.n_clusters))
    user_cols = cluster_cols[:, user_cluster] + cfg.user_jitter * rng.normal(0.0, 1.0, size=(cfg.latent_dim, cfg.n_users))
    other_cols = rng.normal(0.0, 1.0, size=(cfg.latent_dim, cfg.n_items + cfg.n_categories))
    projection = np.concatenate([user_cols, other_cols], axis=1) / math.sqrt(3.0)
    theta0 = np.zeros(cfg.latent_dim)
    theta0[0] = 1.0

    n = cfg.days * cfg.rows_per_day
    day = np.repeat(np.arange(cfg.days), cfg.rows_per_day)
    users = rng.integers(cfg.n_users, size=n)
    items = rng.integers(cfg.n_items, size=n)
    cats = item_category[items]
    # phi(x) projected: sum of the projection columns of the three active one-hots
    latent = (projection[:, users] + projection[:, cfg.n_users + items]
              + projection[:, cfg.n_users + cfg.n_items + cats])
    angle = day * cfg.drift_angle_per_day
    # theta_t = rotation of theta0 in the (e0, e1) plane
    drift_score = np.cos(angle) * latent[0] + np.sin(angle) * latent[1]
    logit = (cfg.association_strength * assoc[user_cluster[users], cats]
             + cfg.drift_strength * drift_score
             + rng.normal(0.0, cfg.noise_std, size=n))
    labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int8)

    cols = ("user", "item", "category")
    raw = np.stack([users, items, cats], axis=1)
    # vocab follows first appearance so the table matches what load_csv would rebuild
    vocab, feats = [], np.empty_like(raw)
    for j, prefix in enumerate(("u", "i", "c")):
        uniq, first = np.unique(raw[:, j], return_index=True)
        order = uniq[np.argsort(first)]
        remap = np.empty(raw[:, j].max() + 1, dtype=np.int64)
        remap[order] = np.arange(len(order))
        feats[:, j] = remap[raw[:, j]]
        vocab.append({f"{prefix}{v}": k for k, v in enumerate(order.tolist())})
    schema = Schema(cols, tuple(vocab), "label", "timestamp")
    return Dataset(schema, np.arange(n), feats, labels, day)
