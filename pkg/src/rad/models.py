"""Networks of the retrieval-and-distill stack, built from :mod:`rad.nncore`.

Every network works on a batch of encoded rows ``X`` of shape ``[B, F]`` and
returns logits of shape ``[B]`` (or ``[B, E]`` for representation modules).
A single feature vector is accepted wherever a batch is.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import nncore as nn
from .nncore import Parameter, Tensor
from .retrieval import NeighborCache


def _as_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.int64)
    return X[None, :] if X.ndim == 1 else X


class Module:
    """Owns Parameters, directly or through child modules."""

    def named_parameters(self) -> Iterator[Parameter]:
        seen: set[int] = set()
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Parameter):
                    found = [item]
                elif isinstance(item, Module):
                    found = item.named_parameters()
                else:
                    continue
                for p in found:
                    if id(p) not in seen:
                        seen.add(id(p))
                        yield p

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def zero_(self) -> None:
        for p in self.parameters():
            p.data[...] = 0.0

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}


class Embeddings(Module):
    """One table per categorical column."""

    def __init__(self, cardinalities: Sequence[int], dim: int, rng: np.random.Generator, prefix: str):
        self.dim = dim
        self.tables = [nn.init_uniform(rng, (max(int(v), 1), dim), dim, f"{prefix}.emb{c}")
                       for c, v in enumerate(cardinalities)]

    def fields(self, X: np.ndarray) -> Tensor:
        """``[..., F]`` indices to ``[..., F, E]`` field embeddings."""
        cols = [nn.embedding_lookup(t, X[..., c]) for c, t in enumerate(self.tables)]
        return nn.stack(cols, axis=-2)


class MLP(Module):
    """Dense stack with relu between layers and a linear output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, prefix: str):
        self.weights, self.biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.weights.append(nn.init_uniform(rng, (n_out, n_in), n_in, f"{prefix}.w{i}"))
            self.biases.append(nn.init_uniform(rng, (n_out,), n_in, f"{prefix}.b{i}"))

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = nn.linear(x, w, b)
            if i < last:
                x = nn.relu(x)
        return x


def _flatten_fields(fields: Tensor) -> Tensor:
    return nn.reshape(fields, fields.shape[:-2] + (fields.shape[-2] * fields.shape[-1],))


# ---------------------------------------------------------------- original model


class OriginalModel(Module):
    """Embedding + two-hidden-layer relu MLP producing the logit ``w_o``."""

    def __init__(self, cardinalities: Sequence[int], dim: int = 16, hidden: int = 64, seed: int = 0,
                 prefix: str = "original"):
        rng = np.random.default_rng(seed)
        self.config = {"cardinalities": list(map(int, cardinalities)), "dim": dim, "hidden": hidden}
        self.emb = Embeddings(cardinalities, dim, rng, prefix)
        self.mlp = MLP([len(cardinalities) * dim, hidden, hidden, 1], rng, prefix + ".mlp")

    def logits(self, X, exclude_ids=None) -> Tensor:
        X = _as_batch(X)
        return nn.reshape(self.mlp(_flatten_fields(self.emb.fields(X))), (len(X),))

    def pooled_input(self, X: np.ndarray) -> Tensor:
        return nn.mean(self.emb.fields(X), axis=-2)


# ---------------------------------------------------------------- relevance network


class RelevanceNetwork(Module):
    """Retrieve top-K rows, encode them with their labels and attention-pool.

    ``emb`` is shared with the teacher that trains this network.  Rows that
    retrieve nothing get the zero vector.
    """

    def __init__(self, emb: Embeddings, neighbors: NeighborCache, rng: np.random.Generator, prefix: str):
        e = emb.dim
        self.emb = emb
        self.neighbors = neighbors
        self.attention = nn.init_uniform(rng, (e, e), e, f"{prefix}.attention")
        self.label_emb = nn.init_uniform(rng, (2, e), e, f"{prefix}.label_emb")
        self.last_weights: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.emb.dim

    def encode_rows(self, feats: np.ndarray, labels: np.ndarray) -> Tensor:
        return nn.add(nn.mean(self.emb.fields(feats), axis=-2), nn.embedding_lookup(self.label_emb, labels))

    def __call__(self, X, exclude_ids=None) -> Tensor:
        X = _as_batch(X)
        pos, valid = self.neighbors.lookup(X, exclude_ids)
        src = self.neighbors.index.source
        safe = np.where(valid, pos, 0)
        if len(src) == 0:
            return Tensor(np.zeros((len(X), self.dim)))
        keys = self.encode_rows(src.features[safe], src.labels[safe].astype(np.int64))
        query = nn.mean(self.emb.fields(X), axis=-2)
        # padded slots get a huge negative score so they take no attention mass
        proj = nn.matmul(self.attention, nn.reshape(query, query.shape + (1,)))
        scores = nn.reshape(nn.matmul(keys, proj), valid.shape)
        scores = nn.add(scores, np.where(valid, 0.0, -1e30))
        weights = nn.softmax(scores, axis=-1)
        pooled = nn.reshape(nn.matmul(nn.reshape(weights, (len(X), 1, valid.shape[1])), keys),
                            (len(X), self.dim))
        self.last_weights = weights.data
        has_any = valid.any(axis=1, keepdims=True).astype(np.float64)
        return nn.mul(pooled, has_any)


def relevance_forward(r: RelevanceNetwork, x, exclude=None) -> np.ndarray:
    x = np.asarray(x)
    ex = None if exclude is None else np.full(_as_batch(x).shape[0], exclude)
    out = r(x, ex).data
    return out[0] if x.ndim == 1 else out


class RelevanceHead(Module):
    """Relevance network followed by the teacher's two post-attention layers.

    Holds references to the teacher's parameters, not copies.
    """

    def __init__(self, relevance: RelevanceNetwork, post: MLP):
        self.relevance = relevance
        self.post = post

    @property
    def dim(self) -> int:
        return self.relevance.dim

    @property
    def neighbors(self) -> NeighborCache:
        return self.relevance.neighbors

    @property
    def emb(self) -> Embeddings:
        return self.relevance.emb

    def __call__(self, X, exclude_ids=None) -> Tensor:
        return nn.relu(self.post(self.relevance(X, exclude_ids)))


# ---------------------------------------------------------------- teachers


class TeacherRetrieval(Module):
    """Relevance network + FM cross layer over query fields and ``w_R``."""

    def __init__(self, cardinalities: Sequence[int], neighbors: NeighborCache, dim: int = 16, seed: int = 0,
                 prefix: str = "teacher"):
        rng = np.random.default_rng(seed)
        f = len(cardinalities)
        self.config = {"cardinalities": list(map(int, cardinalities)), "dim": dim, "k": neighbors.k,
                       "kind": "retrieval"}
        self.emb = Embeddings(cardinalities, dim, rng, prefix)
        self.relevance = RelevanceNetwork(self.emb, neighbors, rng, prefix + ".relevance")
        self.head = MLP([(f + 1) * dim, 1], rng, prefix + ".head")

    def logits(self, X, exclude_ids=None) -> Tensor:
        X = _as_batch(X)
        fields = self.emb.fields(X)
        w_r = self.relevance(X, exclude_ids)
        all_fields = nn.concat([fields, nn.reshape(w_r, (len(X), 1, self.emb.dim))], axis=-2)
        linear = nn.reshape(self.head(_flatten_fields(all_fields)), (len(X),))
        return nn.add(linear, nn.fm_second_order(all_fields))

    def extract_relevance(self) -> RelevanceNetwork:
        return self.relevance


class TeacherDistill(Module):
    """Teacher without the cross layer, with two relu layers after attention.

    The query -> attention -> two-layer path is what gets distilled.
    """

    def __init__(self, cardinalities: Sequence[int], neighbors: NeighborCache, dim: int = 16, seed: int = 0,
                 prefix: str = "teacher_distill"):
        rng = np.random.default_rng(seed)
        f = len(cardinalities)
        self.config = {"cardinalities": list(map(int, cardinalities)), "dim": dim, "k": neighbors.k,
                       "kind": "distill"}
        self.emb = Embeddings(cardinalities, dim, rng, prefix)
        self.relevance = RelevanceNetwork(self.emb, neighbors, rng, prefix + ".relevance")
        self.post = MLP([dim, dim, dim], rng, prefix + ".post")
        self.head = MLP([(f + 1) * dim, 1], rng, prefix + ".head")
        self._extracted = RelevanceHead(self.relevance, self.post)
        self.last_hidden: np.ndarray | None = None

    def logits(self, X, exclude_ids=None) -> Tensor:
        X = _as_batch(X)
        h = self._extracted(X, exclude_ids)
        self.last_hidden = h.data
        fields = _flatten_fields(self.emb.fields(X))
        return nn.reshape(self.head(nn.concat([fields, h], axis=-1)), (len(X),))

    def extract_relevance(self) -> RelevanceHead:
        return self._extracted


def extract_relevance(t: TeacherRetrieval | TeacherDistill):
    return t.extract_relevance()


# ---------------------------------------------------------------- student


class SearchDistillModule(Module):
    """Retrieval-free network mapping a row straight to an ``E``-dim logit vector."""

    def __init__(self, cardinalities: Sequence[int], dim: int = 16, hidden: int = 64, seed: int = 0,
                 prefix: str = "student"):
        rng = np.random.default_rng(seed)
        self.config = {"cardinalities": list(map(int, cardinalities)), "dim": dim, "hidden": hidden}
        self.dim = dim
        self.emb = Embeddings(cardinalities, dim, rng, prefix)
        self.mlp = MLP([len(cardinalities) * dim, hidden, hidden, dim], rng, prefix + ".mlp")

    def __call__(self, X, exclude_ids=None) -> Tensor:
        X = _as_batch(X)
        return self.mlp(_flatten_fields(self.emb.fields(X)))


class NoiseModule(SearchDistillModule):
    """Frozen stand-in for a student: seeded Gaussian noise unrelated to the input.

    Used to check that the distill framework gains nothing from an
    uninformative side input.
    """

    def __init__(self, cardinalities: Sequence[int], dim: int = 16, hidden: int = 64, seed: int = 0,
                 prefix: str = "noise"):
        super().__init__(cardinalities, dim, hidden, seed, prefix)
        self.freeze()
        self.pretrained = True
        self._rng = np.random.default_rng(seed)

    def __call__(self, X, exclude_ids=None) -> Tensor:
        X = _as_batch(X)
        return Tensor(self._rng.normal(size=(len(X), self.dim)))


# ---------------------------------------------------------------- frameworks


class _Framework(Module):
    def __init__(self, original: OriginalModel, side: Module, hidden: int, seed: int, prefix: str):
        rng = np.random.default_rng(seed)
        e = original.config["dim"]
        self.original = original
        self.side = side
        self.aggregate = MLP([1 + e + side.dim, hidden, 1], rng, prefix + ".aggregate")

    def logits(self, X, exclude_ids=None) -> Tensor:
        X = _as_batch(X)
        w_o = nn.reshape(self.original.logits(X), (len(X), 1))
        # the query's own embedding comes from the side module's tables
        pooled = nn.mean(self.side.emb.fields(X), axis=-2)
        w_side = self.side(X, exclude_ids)
        return nn.reshape(self.aggregate(nn.concat([w_o, pooled, w_side], axis=-1)), (len(X),))


class RetrievalFramework(_Framework):
    """Original model + pretrained relevance network + aggregation MLP."""

    def __init__(self, original: OriginalModel, relevance: RelevanceNetwork | RelevanceHead, hidden: int = 64,
                 seed: int = 0):
        super().__init__(original, relevance, hidden, seed, "retrieval_fw")
        self.relevance = relevance

    @property
    def retrieval_calls(self) -> int:
        return self.relevance.neighbors.requests


class DistillFramework(_Framework):
    """Original model + search-distill module + aggregation MLP; never retrieves."""

    def __init__(self, original: OriginalModel, student: SearchDistillModule, hidden: int = 64, seed: int = 0):
        super().__init__(original, student, hidden, seed, "distill_fw")
        self.student = student

    @property
    def retrieval_calls(self) -> int:
        return 0


def predict_proba(model, X, exclude_ids=None, batch_size: int = 4096) -> np.ndarray:
    """Probabilities in (0, 1) for any model exposing ``logits``; no tape is recorded."""
    X = _as_batch(X)
    out = np.empty(len(X))
    for start in range(0, len(X), batch_size):
        sl = slice(start, start + batch_size)
        ex = None if exclude_ids is None else exclude_ids[sl]
        z = model.logits(X[sl], ex)
        out[sl] = nn.sigmoid(z).data
    return np.clip(out, nn.PROB_EPS, 1.0 - nn.PROB_EPS)


def original_forward(m: OriginalModel, x) -> float | np.ndarray:
    p = predict_proba(m, x)
    return float(p[0]) if np.asarray(x).ndim == 1 else p


def teacher_forward(t: TeacherRetrieval | TeacherDistill, x, exclude=None):
    ex = None if exclude is None else np.full(_as_batch(x).shape[0], exclude)
    p = predict_proba(t, x, ex)
    return float(p[0]) if np.asarray(x).ndim == 1 else p


def framework_forward(f: RetrievalFramework | DistillFramework, x):
    p = predict_proba(f, x)
    return float(p[0]) if np.asarray(x).ndim == 1 else p


# ---------------------------------------------------------------- checkpoints


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


def save_model(model: Module, path: str | Path, config: dict) -> None:
    path = Path(path)
    nn.save_parameters(model.parameters(), path)
    _manifest_path(path).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def load_model(model: Module, path: str | Path, config: dict) -> None:
    """Restore parameters after checking the manifest matches ``config``."""
    path = Path(path)
    manifest = json.loads(_manifest_path(path).read_text())
    if manifest != json.loads(json.dumps(config, sort_keys=True)):
        raise ValueError(f"{path}: manifest {manifest} does not match architecture {config}")
    nn.assign_parameters(model.parameters(), nn.load_parameters(path))
