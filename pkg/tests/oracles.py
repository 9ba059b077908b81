"""Independent reference implementations used to check the vectorized paths.

Everything here is deliberately naive: double loops, scalar cosine calls,
math.exp/math.log without the log-sum-exp rearrangement. These stay separate
from the implementations they verify.
"""

from __future__ import annotations

import math

import numpy as np

from attralign.dataset import AlignmentDataset, Split
from attralign.losses import BatchViews
from attralign.numerics import cosine_sim


def naive_loss_oa_hn(batch: BatchViews) -> float:
    t = batch.temperature
    total = 0.0
    for i in range(batch.batch_size):
        pos = cosine_sim(batch.objects[i], batch.attributes[i]) / t
        den = 0.0
        for j in range(batch.batch_size):
            den += math.exp(cosine_sim(batch.objects[i], batch.attributes[j]) / t)
        for w in range(batch.attr_negatives[i].shape[0]):
            den += math.exp(cosine_sim(batch.objects[i], batch.attr_negatives[i][w]) / t)
        total += -math.log(math.exp(pos) / den)
    return total


def naive_loss_ao(batch: BatchViews) -> float:
    t = batch.temperature
    total = 0.0
    for i in range(batch.batch_size):
        pos = cosine_sim(batch.objects[i], batch.attributes[i]) / t
        den = 0.0
        for k in range(batch.batch_size):
            den += math.exp(cosine_sim(batch.objects[k], batch.attributes[i]) / t)
        total += -math.log(math.exp(pos) / den)
    return total


def naive_loss_ac_hn(batch: BatchViews) -> float:
    t = batch.temperature
    total = 0.0
    for i in range(batch.batch_size):
        pos = cosine_sim(batch.attributes[i], batch.categories[i]) / t
        den = 0.0
        for j in range(batch.batch_size):
            den += math.exp(cosine_sim(batch.attributes[i], batch.categories[j]) / t)
        for w in range(batch.cat_negatives[i].shape[0]):
            den += math.exp(cosine_sim(batch.attributes[i], batch.cat_negatives[i][w]) / t)
        total += -math.log(math.exp(pos) / den)
    return total


def naive_loss_ca_hn(batch: BatchViews) -> float:
    t = batch.temperature
    total = 0.0
    for i in range(batch.batch_size):
        pos = cosine_sim(batch.attributes[i], batch.categories[i]) / t
        den = 0.0
        for j in range(batch.batch_size):
            den += math.exp(cosine_sim(batch.attributes[j], batch.categories[i]) / t)
        for w in range(batch.attr_negatives[i].shape[0]):
            den += math.exp(cosine_sim(batch.attr_negatives[i][w], batch.categories[i]) / t)
        total += -math.log(math.exp(pos) / den)
    return total


def naive_loss_ccc(batch: BatchViews) -> float:
    t = batch.temperature
    total = 0.0
    for i in range(batch.batch_size):
        den = 0.0
        for w in range(batch.cat_negatives[i].shape[0]):
            den += math.exp(cosine_sim(batch.categories[i], batch.cat_negatives[i][w]) / t)
        total += -math.log(1.0 / den)
    return total


def naive_stage1_total(batch: BatchViews, aux: float = 0.0) -> float:
    oac = (naive_loss_oa_hn(batch) + naive_loss_ao(batch)) / 2.0
    acc = (naive_loss_ac_hn(batch) + naive_loss_ca_hn(batch)) / 2.0
    return aux + (oac + acc + naive_loss_ccc(batch)) / 2.0


def brute_force_mine(ds: AlignmentDataset, k: int) -> dict:
    """O(N*C*N) exhaustive scorer over (category, sample) pairs."""
    idx = ds.indices(Split.TRAIN)
    X, y = ds.object_matrix, ds.labels
    cats = sorted({int(y[i]) for i in idx})
    protos = {c: np.mean([X[i] for i in idx if y[i] == c], axis=0) for c in cats}
    out = {}
    for i in idx:
        ranked = sorted((-cosine_sim(X[i], protos[c]), c) for c in cats if c != y[i])
        row = []
        for _, c in ranked[:k]:
            best = sorted((-cosine_sim(X[i], X[j]), ds.samples[j].sample_id)
                          for j in idx if y[j] == c)
            row.append((c, best[0][1]))
        out[ds.samples[i].sample_id] = tuple(row)
    return out


def random_batch(rng: np.random.Generator, b: int, d: int, k_max: int,
                 temperature: float = 1.0, allow_empty_rows: bool = True) -> BatchViews:
    counts = rng.integers(0 if allow_empty_rows else 1, k_max + 1, size=b) if k_max else [0] * b
    return BatchViews(
        objects=rng.normal(size=(b, d)),
        attributes=rng.normal(size=(b, d)),
        categories=rng.normal(size=(b, d)),
        attr_negatives=tuple(rng.normal(size=(int(k), d)) for k in counts),
        cat_negatives=tuple(rng.normal(size=(int(k), d)) for k in counts),
        temperature=temperature,
    )
