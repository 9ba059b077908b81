"""Contrastive objectives over projected object/attribute/category views.

Five building blocks, each a sum over the batch of a -log softmax term on
temperature-scaled cosine similarities:

  l_oa  object anchored against in-batch attributes plus hard-negative
        attributes in the denominator
  l_ao  attribute anchored against in-batch objects only (the printed form
        carries no hard negatives in this direction)
  l_ac  attribute anchored against in-batch categories plus hard-negative
        categories
  l_ca  category anchored against in-batch attributes plus hard-negative
        attributes
  l_ccc pure repulsion among each anchor category and its hard-negative
        categories: sum of log-sum-exp over the negative similarities

The stage-one objective is aux + (l_oac + l_acc + l_ccc) / 2 with
l_oac = (l_oa + l_ao)/2 and l_acc = (l_ac + l_ca)/2; the aux hook stands in
for a generative description loss that needs a decoder and is out of scope.

Rows whose mined negative sets were clamped below k simply contribute fewer
terms: slots are padded and masked so padded entries carry exactly zero
weight and zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyNegativeSet, InvalidConfig
from .numerics import (
    MASKED,
    Matrix,
    Tape,
    Var,
    add,
    add_const,
    concat_cols,
    diag,
    gradients,
    l2_normalize_rows,
    logsumexp_rows,
    matmul,
    mul,
    scale,
    stack_cols,
    sum_all,
    sum_rows,
    transpose,
)


def _as_matrix(x, name: str) -> np.ndarray:
    if isinstance(x, Matrix):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


def _as_negative_rows(per_row, dim: int, name: str) -> tuple[np.ndarray, ...]:
    out = []
    for i, row in enumerate(per_row):
        arr = np.asarray(row, dtype=np.float64)
        if arr.size == 0:
            arr = np.zeros((0, dim))
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise DimensionMismatch(f"{name}[{i}] must be (k, {dim}), got {arr.shape}")
        out.append(arr)
    return tuple(out)


@dataclass(frozen=True)
class BatchViews:
    """Projected batch: B x d views plus per-row hard-negative vectors."""

    objects: np.ndarray
    attributes: np.ndarray
    categories: np.ndarray
    attr_negatives: tuple[np.ndarray, ...] = ()
    cat_negatives: tuple[np.ndarray, ...] = ()
    temperature: float = 1.0

    def __post_init__(self):
        O = _as_matrix(self.objects, "objects")
        A = _as_matrix(self.attributes, "attributes")
        C = _as_matrix(self.categories, "categories")
        if not (O.shape == A.shape == C.shape):
            raise DimensionMismatch(
                f"views must share one shape: {O.shape}, {A.shape}, {C.shape}")
        b, d = O.shape
        a_hn = self.attr_negatives or tuple(np.zeros((0, d)) for _ in range(b))
        c_hn = self.cat_negatives or tuple(np.zeros((0, d)) for _ in range(b))
        a_hn = _as_negative_rows(a_hn, d, "attr_negatives")
        c_hn = _as_negative_rows(c_hn, d, "cat_negatives")
        if len(a_hn) != b or len(c_hn) != b:
            raise DimensionMismatch("one negative list per batch row required")
        for i, (ar, cr) in enumerate(zip(a_hn, c_hn)):
            if ar.shape[0] != cr.shape[0]:
                raise DimensionMismatch(
                    f"row {i}: {ar.shape[0]} attribute vs {cr.shape[0]} category negatives")
        if not self.temperature > 0:
            raise InvalidConfig("temperature must be positive")
        object.__setattr__(self, "objects", O)
        object.__setattr__(self, "attributes", A)
        object.__setattr__(self, "categories", C)
        object.__setattr__(self, "attr_negatives", a_hn)
        object.__setattr__(self, "cat_negatives", c_hn)

    @property
    def batch_size(self) -> int:
        return self.objects.shape[0]

    @property
    def dim(self) -> int:
        return self.objects.shape[1]

    @property
    def negative_counts(self) -> tuple[int, ...]:
        return tuple(r.shape[0] for r in self.attr_negatives)


@dataclass(frozen=True)
class LossReport:
    l_oa: float
    l_ao: float
    l_oac: float
    l_ac: float
    l_ca: float
    l_acc: float
    l_ccc: float
    stage1_total: float

    def __post_init__(self):
        vals = [self.l_oa, self.l_ao, self.l_oac, self.l_ac, self.l_ca,
                self.l_acc, self.l_ccc, self.stage1_total]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("loss report contains non-finite values")
        if abs(self.l_oac - (self.l_oa + self.l_ao) / 2.0) > 1e-12:
            raise ValueError("l_oac must equal (l_oa + l_ao)/2")
        if abs(self.l_acc - (self.l_ac + self.l_ca) / 2.0) > 1e-12:
            raise ValueError("l_acc must equal (l_ac + l_ca)/2")

    def as_dict(self) -> dict[str, float]:
        return {
            "l_oa": self.l_oa, "l_ao": self.l_ao, "l_oac": self.l_oac,
            "l_ac": self.l_ac, "l_ca": self.l_ca, "l_acc": self.l_acc,
            "l_ccc": self.l_ccc, "stage1_total": self.stage1_total,
        }


@dataclass(frozen=True)
class ViewGradients:
    """Gradients of a scalar objective w.r.t. every projected view."""

    objects: np.ndarray
    attributes: np.ndarray
    categories: np.ndarray
    attr_negatives: tuple[np.ndarray, ...]
    cat_negatives: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class Stage1Result:
    report: LossReport
    gradients: ViewGradients


@dataclass
class TapeViews:
    """Tape-resident views: what loss graphs consume and aux hooks receive.

    Negative vectors are stacked per slot: attr_neg_slots[w] is a (B, d) Var
    whose row i is the w-th negative of row i, padded with that row's own
    view where no such negative exists; neg_mask marks genuine entries.
    """

    objects: Var
    attributes: Var
    categories: Var
    attr_neg_slots: tuple[Var, ...]
    cat_neg_slots: tuple[Var, ...]
    neg_mask: np.ndarray
    temperature: float


AuxHook = Callable[[Tape, TapeViews], Var]


def build_negative_slots(per_row: Sequence[np.ndarray], fill: np.ndarray):
    """Restack per-row (k_i, d) negatives into k_max slot matrices plus a mask.

    fill provides the padding row for batch rows with fewer than k_max
    negatives; padded entries must be masked out of any loss.
    """
    b = len(per_row)
    counts = [r.shape[0] for r in per_row]
    k_max = max(counts, default=0)
    mask = np.zeros((b, k_max), dtype=bool)
    slots = []
    for w in range(k_max):
        rows = np.array(fill, copy=True)
        for i, r in enumerate(per_row):
            if w < counts[i]:
                rows[i] = r[w]
                mask[i, w] = True
        slots.append(rows)
    return slots, mask


def batch_to_tape(tape: Tape, batch: BatchViews) -> TapeViews:
    """Record a batch's views as tape leaves."""
    a_slots, mask = build_negative_slots(batch.attr_negatives, batch.attributes)
    c_slots, _ = build_negative_slots(batch.cat_negatives, batch.categories)
    return TapeViews(
        objects=tape.leaf(batch.objects),
        attributes=tape.leaf(batch.attributes),
        categories=tape.leaf(batch.categories),
        attr_neg_slots=tuple(tape.leaf(s) for s in a_slots),
        cat_neg_slots=tuple(tape.leaf(s) for s in c_slots),
        neg_mask=mask,
        temperature=batch.temperature,
    )


class _LossGraphs:
    """Lazy builder for the loss graphs of one batch on one tape."""

    def __init__(self, tape: Tape, views: TapeViews):
        self.tape = tape
        self.views = views
        self.inv_t = 1.0 / views.temperature
        self._cache: dict[str, Var] = {}
        if views.neg_mask.size:
            self._mask_fill = np.where(views.neg_mask, 0.0, MASKED)
        else:
            self._mask_fill = None

    def _norm(self, key: str, var: Var) -> Var:
        if key not in self._cache:
            self._cache[key] = l2_normalize_rows(var)
        return self._cache[key]

    @property
    def On(self):
        return self._norm("On", self.views.objects)

    @property
    def An(self):
        return self._norm("An", self.views.attributes)

    @property
    def Cn(self):
        return self._norm("Cn", self.views.categories)

    def _neg_slots(self, which: str) -> list[Var]:
        key = f"{which}_slots_n"
        if key not in self._cache:
            slots = self.views.attr_neg_slots if which == "attr" else self.views.cat_neg_slots
            self._cache[key] = [l2_normalize_rows(s) for s in slots]
        return self._cache[key]

    def _pairs(self, a: Var, b: Var) -> Var:
        # per-row cos(a_i, b_i)/tau for unit-normalized inputs
        return scale(sum_rows(mul(a, b)), self.inv_t)

    def _cross(self, key: str, a: Var, b: Var) -> Var:
        # full matrix cos(a_i, b_j)/tau for unit-normalized inputs
        if key not in self._cache:
            self._cache[key] = scale(matmul(a, transpose(b)), self.inv_t)
        return self._cache[key]

    def _pos(self, key: str) -> Var:
        # positives come off the diagonal of the matrix they compete in,
        # so a lone anchor's softmax is exactly uniform and the loss exact
        pos_key = f"pos_{key}"
        if pos_key not in self._cache:
            self._cache[pos_key] = diag(self._cache[key])
        return self._cache[pos_key]

    def _hn_block(self, anchor_n: Var, which: str) -> Var | None:
        slots = self._neg_slots(which)
        if not slots:
            return None
        cols = stack_cols([self._pairs(anchor_n, s) for s in slots])
        return add_const(cols, self._mask_fill)

    def _nce(self, key: str, anchor: Var, other: Var, extra: Var | None) -> Var:
        in_batch = self._cross(key, anchor, other)
        pos = self._pos(key)
        cols = in_batch if extra is None else concat_cols(in_batch, extra)
        return sum_all(add(logsumexp_rows(cols), -pos))

    def oa(self) -> Var:
        return self._nce("oa", self.On, self.An, self._hn_block(self.On, "attr"))

    def ao(self) -> Var:
        return self._nce("ao", self.An, self.On, None)

    def ac(self) -> Var:
        return self._nce("ac", self.An, self.Cn, self._hn_block(self.An, "cat"))

    def ca(self) -> Var:
        return self._nce("ca", self.Cn, self.An, self._hn_block(self.Cn, "attr"))

    def ccc(self) -> Var:
        mask = self.views.neg_mask
        if mask.size == 0 or not mask.any(axis=1).all():
            raise EmptyNegativeSet(
                "category-category repulsion needs >= 1 hard negative per row")
        block = self._hn_block(self.Cn, "cat")
        return sum_all(logsumexp_rows(block))

    # object-category ablation variant: attributes dropped, objects contrast
    # directly against categories, keeping the same denominator structure
    def oc(self) -> Var:
        return self._nce("oc", self.On, self.Cn, self._hn_block(self.On, "cat"))

    def co(self) -> Var:
        return self._nce("co", self.Cn, self.On, None)


def stage1_graph(tape: Tape, views: TapeViews,
                 aux: AuxHook | None = None) -> tuple[dict[str, Var], Var]:
    """Assemble the full triple-contrastive objective on an existing tape."""
    g = _LossGraphs(tape, views)
    terms = {"l_oa": g.oa(), "l_ao": g.ao(), "l_ac": g.ac(), "l_ca": g.ca(),
             "l_ccc": g.ccc()}
    terms["l_oac"] = scale(add(terms["l_oa"], terms["l_ao"]), 0.5)
    terms["l_acc"] = scale(add(terms["l_ac"], terms["l_ca"]), 0.5)
    total = scale(add(add(terms["l_oac"], terms["l_acc"]), terms["l_ccc"]), 0.5)
    if aux is not None:
        total = add(aux(tape, views), total)
    terms["stage1_total"] = total
    return terms, total


def object_category_graph(tape: Tape, views: TapeViews) -> tuple[dict[str, Var], Var]:
    """Ablation objective with the attribute pathway removed."""
    g = _LossGraphs(tape, views)
    terms = {"l_oc": g.oc(), "l_co": g.co(), "l_ccc": g.ccc()}
    terms["l_occ"] = scale(add(terms["l_oc"], terms["l_co"]), 0.5)
    total = scale(add(terms["l_occ"], terms["l_ccc"]), 0.5)
    terms["stage1_total"] = total
    return terms, total


def _single(batch: BatchViews, build) -> float:
    tape = Tape()
    views = batch_to_tape(tape, batch)
    return float(build(_LossGraphs(tape, views)).value)


def loss_oa_hn(batch: BatchViews) -> float:
    """Object-anchored contrastive loss with hard-negative attributes."""
    return _single(batch, lambda g: g.oa())


def loss_ao(batch: BatchViews) -> float:
    """Attribute-anchored contrastive loss over the in-batch objects only."""
    return _single(batch, lambda g: g.ao())


def loss_ac_hn(batch: BatchViews) -> float:
    """Attribute-anchored loss with hard-negative categories."""
    return _single(batch, lambda g: g.ac())


def loss_ca_hn(batch: BatchViews) -> float:
    """Category-anchored loss with hard-negative attributes."""
    return _single(batch, lambda g: g.ca())


def loss_acc_hn(batch: BatchViews) -> float:
    """Mean of the two attribute-category directions."""
    return 0.5 * (loss_ac_hn(batch) + loss_ca_hn(batch))


def loss_ccc(batch: BatchViews) -> float:
    """Category repulsion: sum of log-sum-exp over hard-negative similarities."""
    return _single(batch, lambda g: g.ccc())


def _split_negative_grads(slot_grads: list[np.ndarray], counts, dim: int):
    per_row = []
    for i, k in enumerate(counts):
        if k == 0:
            per_row.append(np.zeros((0, dim)))
        else:
            per_row.append(np.stack([slot_grads[w][i] for w in range(k)]))
    return tuple(per_row)


def stage1_objective(batch: BatchViews, aux: AuxHook | None = None) -> Stage1Result:
    """Stage-one objective value plus gradients w.r.t. every projected view."""
    tape = Tape()
    views = batch_to_tape(tape, batch)
    terms, total = stage1_graph(tape, views, aux=aux)
    report = LossReport(
        l_oa=float(terms["l_oa"].value),
        l_ao=float(terms["l_ao"].value),
        l_oac=float(terms["l_oac"].value),
        l_ac=float(terms["l_ac"].value),
        l_ca=float(terms["l_ca"].value),
        l_acc=float(terms["l_acc"].value),
        l_ccc=float(terms["l_ccc"].value),
        stage1_total=float(total.value),
    )
    wrt = [views.objects, views.attributes, views.categories,
           *views.attr_neg_slots, *views.cat_neg_slots]
    grads = gradients(tape, total, wrt)
    n_slots = len(views.attr_neg_slots)
    counts = batch.negative_counts
    view_grads = ViewGradients(
        objects=grads[0],
        attributes=grads[1],
        categories=grads[2],
        attr_negatives=_split_negative_grads(grads[3:3 + n_slots], counts, batch.dim),
        cat_negatives=_split_negative_grads(grads[3 + n_slots:], counts, batch.dim),
    )
    return Stage1Result(report=report, gradients=view_grads)
