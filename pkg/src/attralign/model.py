"""Trainable projection heads, the optimizer, and checkpointing.

Two MLP heads project raw embeddings into one shared space: an object head
for visual-object inputs and a text head shared by attributes and category
names (untie with an attribute head for ablations). Outputs are always L2
normalized so cosine similarity in the shared space equals the dot product.

Initialization is seeded Gaussian with std 1/sqrt(fan_in) and zero biases.
The optimizer is Adam with bias correction and a linear learning-rate warmup
(lr * min(1, step/warmup_steps), constant afterwards).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, FormatError, InvalidConfig, ShapeMismatch
from .losses import BatchViews, TapeViews, build_negative_slots
from .numerics import (
    Tape,
    Var,
    add_rowvec,
    as_f64,
    gelu,
    l2_normalize_rows,
    matmul,
)

_NONLINEARITIES = ("gelu", "identity")


@dataclass(frozen=True)
class HeadSpec:
    """Layer widths (input first, output last) and the hidden nonlinearity."""

    layer_dims: tuple[int, ...]
    nonlinearity: str = "gelu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise InvalidConfig(f"head needs >= 2 positive layer dims, got {dims}")
        if self.nonlinearity not in _NONLINEARITIES:
            raise InvalidConfig(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


class Head:
    """One MLP head: weights list [(d_in, d_out)] and biases, mutable in place."""

    def __init__(self, spec: HeadSpec, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.spec = spec
        self.weights = weights
        self.biases = biases
        expect = list(zip(spec.layer_dims[:-1], spec.layer_dims[1:]))
        if [w.shape for w in weights] != expect:
            raise DimensionMismatch("weight shapes disagree with the head spec")
        if [b.shape for b in biases] != [(d,) for _, d in expect]:
            raise DimensionMismatch("bias shapes disagree with the head spec")

    @classmethod
    def create(cls, spec: HeadSpec, rng: np.random.Generator) -> "Head":
        weights, biases = [], []
        for d_in, d_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
            weights.append(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)))
            biases.append(np.zeros(d_out))
        return cls(spec, weights, biases)

    @classmethod
    def identity(cls, dim: int) -> "Head":
        spec = HeadSpec((dim, dim), nonlinearity="identity")
        return cls(spec, [np.eye(dim)], [np.zeros(dim)])

    @property
    def in_dim(self) -> int:
        return self.spec.in_dim

    @property
    def out_dim(self) -> int:
        return self.spec.out_dim


class ProjectionModel:
    """Object head plus text head(s) mapping raw embeddings to a shared space."""

    def __init__(self, object_head: Head, text_head: Head, attribute_head: Head | None = None):
        heads = [object_head, text_head] + ([attribute_head] if attribute_head else [])
        if len({h.out_dim for h in heads}) != 1:
            raise DimensionMismatch("all heads must share one output dimension")
        if attribute_head is not None and attribute_head.in_dim != text_head.in_dim:
            raise DimensionMismatch("attribute and text heads must share the input dimension")
        self.object_head = object_head
        self.text_head = text_head
        self.attribute_head = attribute_head

    @property
    def tie_text_heads(self) -> bool:
        return self.attribute_head is None

    @property
    def out_dim(self) -> int:
        return self.object_head.out_dim

    @classmethod
    def create(cls, dim_object: int, dim_text: int, dim_shared: int = 64,
               hidden_multiplier: int = 2, num_layers: int = 2,
               nonlinearity: str = "gelu", tie_text_heads: bool = True,
               seed: int = 0) -> "ProjectionModel":
        if num_layers < 1:
            raise InvalidConfig("num_layers must be >= 1")
        rng = np.random.default_rng(seed)

        def dims(d_in: int) -> tuple[int, ...]:
            hidden = [hidden_multiplier * dim_shared] * (num_layers - 1)
            return tuple([d_in, *hidden, dim_shared])

        object_head = Head.create(HeadSpec(dims(dim_object), nonlinearity), rng)
        text_head = Head.create(HeadSpec(dims(dim_text), nonlinearity), rng)
        attribute_head = None
        if not tie_text_heads:
            attribute_head = Head.create(HeadSpec(dims(dim_text), nonlinearity), rng)
        return cls(object_head, text_head, attribute_head)

    @classmethod
    def identity(cls, dim: int) -> "ProjectionModel":
        return cls(Head.identity(dim), Head.identity(dim))

    def _heads(self) -> dict[str, Head]:
        out = {"object": self.object_head, "text": self.text_head}
        if self.attribute_head is not None:
            out["attribute"] = self.attribute_head
        return out

    def head_for(self, kind: str) -> Head:
        if kind == "object":
            return self.object_head
        if kind == "category" or kind == "text":
            return self.text_head
        if kind == "attribute":
            return self.attribute_head or self.text_head
        raise InvalidConfig(f"unknown head kind {kind!r}")

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> array mapping; the arrays are the live parameters."""
        out: dict[str, np.ndarray] = {}
        for name, head in self._heads().items():
            for i, (w, b) in enumerate(zip(head.weights, head.biases)):
                out[f"{name}.{i}.weight"] = w
                out[f"{name}.{i}.bias"] = b
        return out

    def parameter_count(self) -> int:
        return sum(int(a.size) for a in self.parameters().values())


def head_graph(tape: Tape, head: Head, x, param_vars: dict[str, Var] | None = None,
               prefix: str = "") -> Var:
    """Record one head application on a tape and return the normalized output.

    param_vars maps "{prefix}{i}.weight"/".bias" to existing leaf Vars so a
    trainer can share parameter leaves across several applications; when
    absent, fresh leaves are created from the head's current values.
    """
    arr = x if isinstance(x, Var) else tape.leaf(as_f64(x, "head input"))
    if arr.value.ndim != 2 or arr.value.shape[1] != head.in_dim:
        raise DimensionMismatch(
            f"head expects (B, {head.in_dim}) input, got {arr.value.shape}")
    h = arr
    last = len(head.weights) - 1
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        if param_vars is not None:
            wv = param_vars[f"{prefix}{i}.weight"]
            bv = param_vars[f"{prefix}{i}.bias"]
        else:
            wv, bv = tape.leaf(w), tape.leaf(b)
        h = add_rowvec(matmul(h, wv), bv)
        if i < last and head.spec.nonlinearity == "gelu":
            h = gelu(h)
    return l2_normalize_rows(h)


def project(model: ProjectionModel, kind: str, x) -> np.ndarray:
    """Project raw embeddings through one head (plain-array convenience)."""
    tape = Tape()
    return np.array(head_graph(tape, model.head_for(kind), np.atleast_2d(np.asarray(x, dtype=np.float64))).value)


def forward(model: ProjectionModel, objects, attributes, categories,
            attr_negatives: Sequence | None = None,
            cat_negatives: Sequence | None = None,
            temperature: float = 1.0) -> BatchViews:
    """Project a raw batch (and optional per-row negatives) into BatchViews."""
    if (attr_negatives is None) != (cat_negatives is None):
        raise DimensionMismatch("provide both negative lists or neither")
    O = project(model, "object", objects)
    A = project(model, "attribute", attributes)
    C = project(model, "category", categories)

    def project_rows(rows_per_sample, kind):
        counts = [np.atleast_2d(np.asarray(r, dtype=np.float64)).shape[0] if np.asarray(r).size else 0
                  for r in rows_per_sample]
        stacked = [np.atleast_2d(np.asarray(r, dtype=np.float64))
                   for r in rows_per_sample if np.asarray(r).size]
        if not stacked:
            return tuple(np.zeros((0, model.out_dim)) for _ in counts)
        flat = project(model, kind, np.concatenate(stacked, axis=0))
        out, cursor = [], 0
        for k in counts:
            out.append(flat[cursor:cursor + k])
            cursor += k
        return tuple(out)

    a_hn = project_rows(attr_negatives, "attribute") if attr_negatives is not None else ()
    c_hn = project_rows(cat_negatives, "category") if cat_negatives is not None else ()
    return BatchViews(objects=O, attributes=A, categories=C,
                      attr_negatives=a_hn, cat_negatives=c_hn,
                      temperature=temperature)


def views_graph(tape: Tape, model: ProjectionModel, param_vars: dict[str, Var],
                objects: np.ndarray, attributes: np.ndarray, categories: np.ndarray,
                attr_negative_rows: Sequence[np.ndarray],
                cat_negative_rows: Sequence[np.ndarray],
                temperature: float) -> TapeViews:
    """Record the full batch projection on a tape for end-to-end gradients."""
    attr_prefix = "attribute." if model.attribute_head is not None else "text."
    a_slots_raw, mask = build_negative_slots(attr_negative_rows, attributes)
    c_slots_raw, _ = build_negative_slots(cat_negative_rows, categories)
    return TapeViews(
        objects=head_graph(tape, model.object_head, objects, param_vars, "object."),
        attributes=head_graph(tape, model.head_for("attribute"), attributes,
                              param_vars, attr_prefix),
        categories=head_graph(tape, model.text_head, categories, param_vars, "text."),
        attr_neg_slots=tuple(
            head_graph(tape, model.head_for("attribute"), s, param_vars, attr_prefix)
            for s in a_slots_raw),
        cat_neg_slots=tuple(
            head_graph(tape, model.text_head, s, param_vars, "text.")
            for s in c_slots_raw),
        neg_mask=mask,
        temperature=temperature,
    )


class ClassifierHead:
    """Linear category classifier over projected object embeddings."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise DimensionMismatch(f"classifier shapes {weight.shape} / {bias.shape}")
        self.weight = weight  # (num_classes, dim)
        self.bias = bias

    @classmethod
    def create(cls, num_classes: int, dim: int, seed: int = 0) -> "ClassifierHead":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_classes, dim)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"classifier.weight": self.weight, "classifier.bias": self.bias}

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight.T + self.bias


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 2e-4
    warmup_steps: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class OptimizerState:
    """First/second moment accumulators plus the step counter."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0


def warmup_lr(base_lr: float, warmup_steps: int, step: int) -> float:
    """Linear ramp to base_lr over warmup_steps, constant afterwards."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


def adam_step(state: OptimizerState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], config: AdamConfig) -> float:
    """One in-place Adam update over every parameter; returns the lr used."""
    for name, p in params.items():
        if name not in grads:
            raise ShapeMismatch(f"missing gradient for parameter {name!r}")
        if grads[name].shape != p.shape:
            raise ShapeMismatch(
                f"gradient shape {grads[name].shape} != parameter shape {p.shape} for {name!r}")
    state.step += 1
    t = state.step
    lr = warmup_lr(config.lr, config.warmup_steps, t)
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        state.m[name] = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        state.v[name] = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p -= lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return lr


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: ProjectionModel, path, classifier: ClassifierHead | None = None,
                    step: int = 0, seed: int = 0) -> None:
    """Write manifest.json plus one binary block of all parameters."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    params = dict(model.parameters())
    if classifier is not None:
        params.update(classifier.parameters())

    entries, chunks, offset = [], [], 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr).astype("<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    (directory / "params.f64").write_bytes(b"".join(chunks))

    def spec_dict(head: Head | None):
        if head is None:
            return None
        return {"layer_dims": list(head.spec.layer_dims), "nonlinearity": head.spec.nonlinearity}

    manifest = {
        "format_version": 1,
        "kind": "projection-checkpoint",
        "object_head": spec_dict(model.object_head),
        "text_head": spec_dict(model.text_head),
        "attribute_head": spec_dict(model.attribute_head),
        "classifier": None if classifier is None else
            {"num_classes": classifier.num_classes, "dim": int(classifier.weight.shape[1])},
        "step": step,
        "seed": seed,
        "params": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[ProjectionModel, ClassifierHead | None, dict]:
    directory = Path(path)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: no such checkpoint manifest")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest.json: line {e.lineno} column {e.colno}: {e.msg}") from e

    raw = (directory / "params.f64").read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(raw):
            raise FormatError(
                f"params.f64: truncated at offset {len(raw)}, parameter {entry['name']!r} "
                f"needs bytes up to {end}")
        arrays[entry["name"]] = np.frombuffer(raw[start:end], dtype="<f8").astype(np.float64).reshape(shape)

    def build_head(meta) -> Head | None:
        if meta is None:
            return None
        return HeadSpec(tuple(meta["layer_dims"]), meta["nonlinearity"])

    def materialize(name: str, spec: HeadSpec | None) -> Head | None:
        if spec is None:
            return None
        n_layers = len(spec.layer_dims) - 1
        weights = [arrays[f"{name}.{i}.weight"] for i in range(n_layers)]
        biases = [arrays[f"{name}.{i}.bias"] for i in range(n_layers)]
        return Head(spec, weights, biases)

    model = ProjectionModel(
        object_head=materialize("object", build_head(manifest["object_head"])),
        text_head=materialize("text", build_head(manifest["text_head"])),
        attribute_head=materialize("attribute", build_head(manifest["attribute_head"])),
    )
    classifier = None
    if manifest.get("classifier"):
        classifier = ClassifierHead(arrays["classifier.weight"], arrays["classifier.bias"])
    return model, classifier, manifest
