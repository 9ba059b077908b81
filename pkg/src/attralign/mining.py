"""Hard-negative mining over raw (pre-projection) object embeddings.

For every training sample the miner ranks incorrect categories by the cosine
similarity of the sample's object embedding to each category's prototype
(the mean of that category's raw object embeddings over the train split),
keeps the top k, and from each picks the single most similar sample, ties
broken by lowest sample id. Mining runs once, before training, over the
train split only, and the result is frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .dataset import AlignmentDataset, Split
from .errors import FormatError, InvalidConfig, TooFewCategories


class MiningReference(str, Enum):
    """Similarity space used for mining; raw object embeddings stand in for
    a frozen visual encoder independent of the trainable heads."""

    OBJECT_EMBEDDING = "object_embedding"


@dataclass(frozen=True)
class HardNegativeSet:
    """Per-sample ordered negatives: sample id -> ((category id, sample id), ...).

    Entries are ordered by descending category similarity. A sample gets
    exactly k entries when at least k incorrect categories exist, otherwise
    one entry per incorrect category.
    """

    entries: dict[int, tuple[tuple[int, int], ...]]
    k: int
    reference: MiningReference = MiningReference.OBJECT_EMBEDDING
    method: str = "hard"

    def __post_init__(self):
        if self.k < 1:
            raise InvalidConfig("k must be >= 1")
        object.__setattr__(
            self, "entries",
            {int(sid): tuple((int(c), int(s)) for c, s in row) for sid, row in self.entries.items()},
        )

    def __len__(self) -> int:
        return len(self.entries)

    def covers(self, sample_ids) -> bool:
        return all(sid in self.entries for sid in sample_ids)

    def is_clamped(self) -> bool:
        return any(len(row) < self.k for row in self.entries.values())


def _train_view(ds: AlignmentDataset):
    idx = ds.indices(Split.TRAIN)
    if idx.size == 0:
        raise InvalidConfig("mining requires a non-empty train split")
    return idx


def mine(ds: AlignmentDataset, k: int = 3,
         reference: MiningReference = MiningReference.OBJECT_EMBEDDING) -> HardNegativeSet:
    """Mine the k most similar but incorrect categories for every train sample."""
    if k < 1:
        raise InvalidConfig("k must be >= 1")
    if ds.num_categories < 2:
        raise TooFewCategories(f"need >= 2 categories, dataset has {ds.num_categories}")

    idx = _train_view(ds)
    X = ds.object_matrix[idx]
    labels = ds.labels[idx]
    sample_ids = np.array([ds.samples[i].sample_id for i in idx])

    present = np.unique(labels)
    prototypes = np.stack([X[labels == c].mean(axis=0) for c in present])
    proto_norms = np.linalg.norm(prototypes, axis=1)
    x_norms = np.linalg.norm(X, axis=1)
    # cos(anchor, prototype) for every (train sample, present category) pair
    sims = (X @ prototypes.T) / np.outer(x_norms, proto_norms)

    members: dict[int, np.ndarray] = {int(c): np.flatnonzero(labels == c) for c in present}

    entries: dict[int, tuple[tuple[int, int], ...]] = {}
    for a in range(X.shape[0]):
        anchor_label = labels[a]
        cand = [(float(-sims[a, j]), int(c)) for j, c in enumerate(present) if c != anchor_label]
        cand.sort()
        row: list[tuple[int, int]] = []
        for _, c in cand[:k]:
            rows = members[c]
            cand_sims = (X[rows] @ X[a]) / (np.linalg.norm(X[rows], axis=1) * x_norms[a])
            order = np.lexsort((sample_ids[rows], -cand_sims))
            row.append((c, int(sample_ids[rows[order[0]]])))
        entries[int(sample_ids[a])] = tuple(row)
    return HardNegativeSet(entries=entries, k=k, reference=reference, method="hard")


def simple_negatives(ds: AlignmentDataset, k: int = 3, seed: int = 0) -> HardNegativeSet:
    """Ablation baseline: uniformly random incorrect categories and samples."""
    if k < 1:
        raise InvalidConfig("k must be >= 1")
    if ds.num_categories < 2:
        raise TooFewCategories(f"need >= 2 categories, dataset has {ds.num_categories}")
    idx = _train_view(ds)
    labels = ds.labels[idx]
    sample_ids = np.array([ds.samples[i].sample_id for i in idx])
    present = np.unique(labels)
    members = {int(c): sample_ids[labels == c] for c in present}

    rng = np.random.default_rng(seed)
    entries: dict[int, tuple[tuple[int, int], ...]] = {}
    for a in range(len(idx)):
        others = [int(c) for c in present if c != labels[a]]
        take = min(k, len(others))
        cats = rng.choice(np.array(others), size=take, replace=False)
        row = tuple((int(c), int(rng.choice(members[int(c)]))) for c in cats)
        entries[int(sample_ids[a])] = row
    return HardNegativeSet(entries=entries, k=k, method="simple")


def save_negatives(hn: HardNegativeSet, path) -> None:
    payload = {
        "kind": "hard-negative-set",
        "k": hn.k,
        "reference": hn.reference.value,
        "method": hn.method,
        "entries": {str(sid): [list(pair) for pair in row] for sid, row in sorted(hn.entries.items())},
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_negatives(path) -> HardNegativeSet:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"{p}: no such negatives file")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{p.name}: line {e.lineno} column {e.colno}: {e.msg}") from e
    for key in ("k", "entries"):
        if key not in payload:
            raise FormatError(f"{p.name}: missing key {key!r}")
    return HardNegativeSet(
        entries={int(sid): tuple((int(c), int(s)) for c, s in row)
                 for sid, row in payload["entries"].items()},
        k=int(payload["k"]),
        reference=MiningReference(payload.get("reference", "object_embedding")),
        method=payload.get("method", "hard"),
    )
