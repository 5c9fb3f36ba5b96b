"""Shared oracles.  None of these call into the code under test."""

from __future__ import annotations

import math

import numpy as np
import pytest

from rad import nncore as nn
from rad.data import Dataset, Schema


def numeric_grad(fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` (mutated in place, then restored)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return out


def tape_grads(build, tensors):
    """Run ``build()`` on a tape and return the gradient of each tensor."""
    for t in tensors:
        t.requires_grad = True
        if isinstance(t, nn.Parameter):
            t.zero_grad()
    with nn.Tape() as tape:
        out = build()
        tape.backward(out)
        grads = [np.array(tape.grad_of(t), copy=True) if tape.grad_of(t) is not None else np.zeros_like(t.data)
                 for t in tensors]
    for t in tensors:
        if isinstance(t, nn.Parameter):
            t.zero_grad()
    return grads


def max_fd_error(build, tensors) -> float:
    analytic = tape_grads(build, tensors)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        num = numeric_grad(lambda: float(build().data), t.data)
        worst = max(worst, float(np.max(np.abs(num - g))) if g.size else 0.0)
    return worst


def brute_idf(features: np.ndarray, column: int, value: int) -> float:
    n = len(features)
    na = sum(1 for row in features if row[column] == value)
    return math.log((n - na + 0.5) / (na + 0.5))


def brute_topk(features, row_ids, query, k, exclude=()):
    """Double loop over every row; only rows sharing a field value are candidates."""
    scored = []
    for row, rid in zip(features, row_ids):
        if int(rid) in exclude:
            continue
        matched = [c for c in range(len(query)) if row[c] == query[c]]
        if not matched:
            continue
        scored.append((sum(brute_idf(features, c, query[c]) for c in matched), int(rid)))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(rid, s) for s, rid in scored[:k]]


def brute_auc(labels, scores) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = 0.0
    for p in pos:
        for q in neg:
            credit += 1.0 if p > q else 0.5 if p == q else 0.0
    return credit / (len(pos) * len(neg))


def make_dataset(features, labels=None, timestamps=None, row_ids=None) -> Dataset:
    features = np.asarray(features, dtype=np.int64)
    n, f = features.shape
    card = [int(features[:, j].max()) + 1 if n else 1 for j in range(f)]
    schema = Schema(tuple(f"c{j}" for j in range(f)), tuple({str(v): v for v in range(c)} for c in card))
    labels = np.zeros(n, dtype=np.int8) if labels is None else labels
    timestamps = np.zeros(n, dtype=np.int64) if timestamps is None else timestamps
    row_ids = np.arange(n) if row_ids is None else row_ids
    return Dataset(schema, row_ids, features, labels, timestamps)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
