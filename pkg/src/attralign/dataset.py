"""Data model, file formats, pooling, and the synthetic-dataset generator.

On disk a dataset is a directory holding ``manifest.json`` (dims, pooling
mode, category names, super-category, per-sample metadata) plus little-endian
float64 binary blocks, row-major:

    objects.f64              N x dim_object
    attributes.f64           N x dim_text
    category_names.f64       C x dim_text
    object_sequences.f64     optional, concatenated per-sample rows
    attribute_sequences.f64  optional

Round-trips are lossless: save followed by load reproduces every float
bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptySequence,
    FormatError,
    InvalidConfig,
    UnknownCategory,
)
from .numerics import Vector, as_f64

FORMAT_VERSION = 1


class PoolingMode(str, Enum):
    """How a token-embedding sequence is reduced to one global vector.

    LAST takes the final element; a terminator appended upstream makes this
    equivalent to end-of-sequence pooling. MEAN averages elementwise.
    """

    LAST = "last"
    MEAN = "mean"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


def pool(seq: Sequence, mode: PoolingMode) -> Vector:
    """Reduce a non-empty sequence of equal-dimension vectors to one vector."""
    if len(seq) == 0:
        raise EmptySequence("cannot pool an empty sequence")
    rows = [v.data if isinstance(v, Vector) else as_f64(v, "sequence element") for v in seq]
    dim = rows[0].shape[0] if rows[0].ndim == 1 else -1
    for r in rows:
        if r.ndim != 1 or r.shape[0] != dim:
            raise DimensionMismatch("pool: sequence elements must share one dimension")
    if mode == PoolingMode.LAST:
        return Vector(rows[-1])
    return Vector(np.mean(np.stack(rows), axis=0))


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    name_embedding: Vector


@dataclass(frozen=True)
class CategoryTable:
    """Ordered category list with contiguous ids 0..C-1 and a super-category."""

    categories: tuple[Category, ...]
    super_category: str = ""

    def __post_init__(self):
        cats = tuple(self.categories)
        object.__setattr__(self, "categories", cats)
        if not cats:
            raise InvalidConfig("category table must be non-empty")
        ids = [c.id for c in cats]
        if ids != list(range(len(cats))):
            raise InvalidConfig(f"category ids must be contiguous 0..{len(cats) - 1}, got {ids}")
        dim = cats[0].name_embedding.dim
        for c in cats:
            if c.name_embedding.dim != dim:
                raise DimensionMismatch("category name embeddings must share one dimension")

    def __len__(self) -> int:
        return len(self.categories)

    @property
    def embedding_dim(self) -> int:
        return self.categories[0].name_embedding.dim

    @cached_property
    def name_matrix(self) -> np.ndarray:
        return np.stack([c.name_embedding.data for c in self.categories])

    def names(self) -> list[str]:
        return [c.name for c in self.categories]


@dataclass(frozen=True)
class SampleTriple:
    """One example: pooled object and attribute embeddings plus a category id.

    Optional raw sequences may ride along; when present, pooling them with
    the owning dataset's mode must reproduce the stored pooled vectors.
    """

    sample_id: int
    object_embedding: Vector
    attribute_embedding: Vector
    category_id: int
    object_sequence: tuple[Vector, ...] | None = None
    attribute_sequence: tuple[Vector, ...] | None = None


@dataclass(frozen=True)
class AlignmentDataset:
    """Immutable bundle of samples, per-sample split tags, and the table."""

    table: CategoryTable
    samples: tuple[SampleTriple, ...]
    splits: tuple[Split, ...]
    pooling: PoolingMode = PoolingMode.LAST

    def __post_init__(self):
        samples = tuple(self.samples)
        splits = tuple(Split(s) for s in self.splits)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "splits", splits)
        if not samples:
            raise InvalidConfig("dataset must contain at least one sample")
        if len(splits) != len(samples):
            raise InvalidConfig("one split tag per sample required")
        ids = [s.sample_id for s in samples]
        if len(set(ids)) != len(ids):
            raise InvalidConfig("sample ids must be unique")
        do = samples[0].object_embedding.dim
        dt = self.table.embedding_dim
        for s in samples:
            if s.object_embedding.dim != do:
                raise DimensionMismatch(f"sample {s.sample_id}: object dim {s.object_embedding.dim} != {do}")
            if s.attribute_embedding.dim != dt:
                raise DimensionMismatch(
                    f"sample {s.sample_id}: attribute dim {s.attribute_embedding.dim} "
                    f"!= category name dim {dt}"
                )
            if not 0 <= s.category_id < len(self.table):
                raise UnknownCategory(f"sample {s.sample_id} references category {s.category_id}")
            self._check_sequence(s, s.object_sequence, s.object_embedding, "object")
            self._check_sequence(s, s.attribute_sequence, s.attribute_embedding, "attribute")

    def _check_sequence(self, s: SampleTriple, seq, pooled: Vector, kind: str) -> None:
        if seq is None:
            return
        got = pool(seq, self.pooling)
        if got.dim != pooled.dim or float(np.max(np.abs(got.data - pooled.data))) > 1e-9:
            raise InvalidConfig(
                f"sample {s.sample_id}: {kind} sequence does not pool to the stored vector"
            )

    # -- access helpers ------------------------------------------------------

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def embedding_dim_object(self) -> int:
        return self.samples[0].object_embedding.dim

    @property
    def embedding_dim_text(self) -> int:
        return self.table.embedding_dim

    @property
    def num_categories(self) -> int:
        return len(self.table)

    @cached_property
    def object_matrix(self) -> np.ndarray:
        return np.stack([s.object_embedding.data for s in self.samples])

    @cached_property
    def attribute_matrix(self) -> np.ndarray:
        return np.stack([s.attribute_embedding.data for s in self.samples])

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([s.category_id for s in self.samples], dtype=np.int64)

    @cached_property
    def index_by_id(self) -> dict[int, int]:
        return {s.sample_id: i for i, s in enumerate(self.samples)}

    def indices(self, split: Split) -> np.ndarray:
        return np.array([i for i, sp in enumerate(self.splits) if sp == split], dtype=np.int64)

    def subset(self, split: Split) -> "AlignmentDataset":
        idx = self.indices(split)
        if idx.size == 0:
            raise InvalidConfig(f"dataset has no samples in the {split.value} split")
        return AlignmentDataset(
            table=self.table,
            samples=tuple(self.samples[i] for i in idx),
            splits=tuple(self.splits[i] for i in idx),
            pooling=self.pooling,
        )


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic cluster generator.

    inter_class_spread controls the mean pairwise angular separation of the
    class directions; intra_class_sigma the object noise; attribute noise is
    applied in text space and renormalized; modality_gap_offset is the norm
    of a constant shift shared by every object embedding.
    """

    num_classes: int
    samples_per_class: int
    dim_object: int = 32
    dim_text: int = 32
    inter_class_spread: float = 1.0
    intra_class_sigma: float = 0.1
    modality_gap_offset: float = 0.0
    attribute_noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise InvalidConfig("samples_per_class must be >= 1")
        if self.dim_object < 1 or self.dim_text < 1:
            raise InvalidConfig("embedding dimensions must be positive")
        for name in ("inter_class_spread", "intra_class_sigma",
                     "modality_gap_offset", "attribute_noise_sigma"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")

    def as_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "samples_per_class": self.samples_per_class,
            "dim_object": self.dim_object,
            "dim_text": self.dim_text,
            "inter_class_spread": self.inter_class_spread,
            "intra_class_sigma": self.intra_class_sigma,
            "modality_gap_offset": self.modality_gap_offset,
            "attribute_noise_sigma": self.attribute_noise_sigma,
            "seed": self.seed,
        }


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _semi_orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Seeded rows x cols map with orthonormal columns (rows >= cols) or rows."""
    if rows >= cols:
        q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
        return q
    q, _ = np.linalg.qr(rng.standard_normal((cols, rows)))
    return np.ascontiguousarray(q.T)


def generate_synthetic(cfg: SynthConfig) -> AlignmentDataset:
    """Build a deterministic clustered dataset with a controllable modality gap.

    Construction: C class directions on the unit sphere in text space fan out
    around a common axis by inter_class_spread; category name embeddings are
    the class directions. Each attribute embedding is its class direction
    plus Gaussian noise, renormalized. Each object embedding is a fixed
    seeded rotation of the class direction into object space, plus Gaussian
    noise, plus one constant offset vector of norm modality_gap_offset shared
    by all objects. Samples are split 80/20 train/test by a seeded shuffle.

    The RNG draw order (axis, class directions, rotation, offset, per-sample
    noise, split permutation) is fixed: same config, same dataset.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    axis = _unit(rng.standard_normal(cfg.dim_text))
    directions = []
    for _ in range(cfg.num_classes):
        g = _unit(rng.standard_normal(cfg.dim_text))
        raw = axis + cfg.inter_class_spread * g
        while np.linalg.norm(raw) < 1e-9:
            raw = axis + cfg.inter_class_spread * _unit(rng.standard_normal(cfg.dim_text))
        directions.append(_unit(raw))

    rotation = _semi_orthogonal(rng, cfg.dim_object, cfg.dim_text)
    if cfg.modality_gap_offset > 0:
        offset = cfg.modality_gap_offset * _unit(rng.standard_normal(cfg.dim_object))
    else:
        offset = np.zeros(cfg.dim_object)

    samples: list[SampleTriple] = []
    sid = 0
    for c, direction in enumerate(directions):
        projected = rotation @ direction
        for _ in range(cfg.samples_per_class):
            attr = _unit(direction + cfg.attribute_noise_sigma * rng.standard_normal(cfg.dim_text))
            obj = projected + cfg.intra_class_sigma * rng.standard_normal(cfg.dim_object) + offset
            samples.append(SampleTriple(sid, Vector(obj), Vector(attr), c))
            sid += 1

    n = len(samples)
    perm = rng.permutation(n)
    n_train = (4 * n) // 5
    train_ids = set(perm[:n_train].tolist())
    splits = tuple(Split.TRAIN if i in train_ids else Split.TEST for i in range(n))

    table = CategoryTable(
        categories=tuple(
            Category(c, f"class_{c:03d}", Vector(d)) for c, d in enumerate(directions)
        ),
        super_category="synthetic",
    )
    return AlignmentDataset(table=table, samples=tuple(samples), splits=splits)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_BLOCKS = {
    "objects": "objects.f64",
    "attributes": "attributes.f64",
    "category_names": "category_names.f64",
    "object_sequences": "object_sequences.f64",
    "attribute_sequences": "attribute_sequences.f64",
}


def _write_block(path: Path, arr: np.ndarray) -> dict:
    path.write_bytes(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return {"file": path.name, "rows": int(arr.shape[0]), "cols": int(arr.shape[1])}


def _read_block(directory: Path, meta: dict, name: str) -> np.ndarray:
    f = directory / meta["file"]
    if not f.exists():
        raise FormatError(f"{name}: missing block file {meta['file']}")
    rows, cols = int(meta["rows"]), int(meta["cols"])
    raw = f.read_bytes()
    expected = rows * cols * 8
    if len(raw) != expected:
        raise FormatError(
            f"{meta['file']}: truncated block: expected {expected} bytes "
            f"({rows}x{cols} float64), found {len(raw)}; data ends at offset {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)


def save(ds: AlignmentDataset, path) -> None:
    """Write manifest.json plus binary embedding blocks into a directory."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)

    blocks = {
        "objects": _write_block(directory / _BLOCKS["objects"], ds.object_matrix),
        "attributes": _write_block(directory / _BLOCKS["attributes"], ds.attribute_matrix),
        "category_names": _write_block(directory / _BLOCKS["category_names"], ds.table.name_matrix),
    }

    sample_meta = []
    obj_seq_rows, attr_seq_rows = [], []
    for s, sp in zip(ds.samples, ds.splits):
        entry = {"id": s.sample_id, "category": s.category_id, "split": sp.value}
        if s.object_sequence is not None:
            entry["object_seq_len"] = len(s.object_sequence)
            obj_seq_rows.extend(v.data for v in s.object_sequence)
        if s.attribute_sequence is not None:
            entry["attribute_seq_len"] = len(s.attribute_sequence)
            attr_seq_rows.extend(v.data for v in s.attribute_sequence)
        sample_meta.append(entry)
    if obj_seq_rows:
        blocks["object_sequences"] = _write_block(
            directory / _BLOCKS["object_sequences"], np.stack(obj_seq_rows))
    if attr_seq_rows:
        blocks["attribute_sequences"] = _write_block(
            directory / _BLOCKS["attribute_sequences"], np.stack(attr_seq_rows))

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "alignment-dataset",
        "super_category": ds.table.super_category,
        "pooling": ds.pooling.value,
        "dims": {"object": ds.embedding_dim_object, "text": ds.embedding_dim_text},
        "categories": [{"id": c.id, "name": c.name} for c in ds.table.categories],
        "samples": sample_meta,
        "blocks": blocks,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load(path) -> AlignmentDataset:
    """Load a dataset directory written by :func:`save`."""
    directory = Path(path)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: no such manifest")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest.json: line {e.lineno} column {e.colno}: {e.msg}") from e

    for key in ("dims", "categories", "samples", "blocks", "pooling"):
        if key not in manifest:
            raise FormatError(f"manifest.json: missing key {key!r}")
    dims = manifest["dims"]
    blocks = manifest["blocks"]

    objects = _read_block(directory, blocks["objects"], "objects")
    attributes = _read_block(directory, blocks["attributes"], "attributes")
    names = _read_block(directory, blocks["category_names"], "category_names")
    if objects.shape[1] != dims["object"]:
        raise DimensionMismatch(
            f"objects block has {objects.shape[1]} columns, manifest says {dims['object']}")
    if attributes.shape[1] != dims["text"] or names.shape[1] != dims["text"]:
        raise DimensionMismatch("text-space block columns disagree with manifest dims")
    if objects.shape[0] != len(manifest["samples"]) or attributes.shape[0] != len(manifest["samples"]):
        raise FormatError("block row counts disagree with manifest sample count")

    known_ids = {c["id"] for c in manifest["categories"]}
    for entry in manifest["samples"]:
        if entry["category"] not in known_ids:
            raise UnknownCategory(
                f"sample {entry['id']} references category {entry['category']}, "
                f"table has {len(known_ids)} categories"
            )

    obj_seqs = _read_block(directory, blocks["object_sequences"], "object_sequences") \
        if "object_sequences" in blocks else None
    attr_seqs = _read_block(directory, blocks["attribute_sequences"], "attribute_sequences") \
        if "attribute_sequences" in blocks else None

    table = CategoryTable(
        categories=tuple(
            Category(c["id"], c["name"], Vector(names[c["id"]]))
            for c in manifest["categories"]
        ),
        super_category=manifest.get("super_category", ""),
    )

    samples, splits = [], []
    obj_cursor = attr_cursor = 0
    for i, entry in enumerate(manifest["samples"]):
        oseq = aseq = None
        if "object_seq_len" in entry:
            if obj_seqs is None:
                raise FormatError("manifest lists object sequences but the block is absent")
            k = int(entry["object_seq_len"])
            oseq = tuple(Vector(obj_seqs[j]) for j in range(obj_cursor, obj_cursor + k))
            obj_cursor += k
        if "attribute_seq_len" in entry:
            if attr_seqs is None:
                raise FormatError("manifest lists attribute sequences but the block is absent")
            k = int(entry["attribute_seq_len"])
            aseq = tuple(Vector(attr_seqs[j]) for j in range(attr_cursor, attr_cursor + k))
            attr_cursor += k
        samples.append(SampleTriple(
            sample_id=int(entry["id"]),
            object_embedding=Vector(objects[i]),
            attribute_embedding=Vector(attributes[i]),
            category_id=int(entry["category"]),
            object_sequence=oseq,
            attribute_sequence=aseq,
        ))
        splits.append(Split(entry["split"]))

    return AlignmentDataset(
        table=table,
        samples=tuple(samples),
        splits=tuple(splits),
        pooling=PoolingMode(manifest["pooling"]),
    )
