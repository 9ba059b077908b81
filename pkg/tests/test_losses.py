import math

import numpy as np
import pytest

from attralign import numerics as nm
from attralign.errors import DimensionMismatch, EmptyNegativeSet, InvalidConfig
from attralign.losses import (
    BatchViews,
    LossReport,
    loss_ac_hn,
    loss_acc_hn,
    loss_ao,
    loss_ca_hn,
    loss_ccc,
    loss_oa_hn,
    stage1_objective,
)
from oracles import (
    naive_loss_ac_hn,
    naive_loss_ao,
    naive_loss_ca_hn,
    naive_loss_ccc,
    naive_loss_oa_hn,
    naive_stage1_total,
    random_batch,
)

RNG = np.random.default_rng(20240311)


def _no_neg(b, d, rng=None):
    rng = rng or RNG
    return BatchViews(objects=rng.normal(size=(b, d)),
                      attributes=rng.normal(size=(b, d)),
                      categories=rng.normal(size=(b, d)))


class TestTrivialIdentities:
    def test_singleton_losses_exactly_zero(self):
        for seed in range(5):
            batch = _no_neg(1, 5, np.random.default_rng(seed))
            assert loss_oa_hn(batch) == 0.0
            assert loss_ao(batch) == 0.0
            assert loss_ac_hn(batch) == 0.0
            assert loss_ca_hn(batch) == 0.0
            assert loss_acc_hn(batch) == 0.0

    def test_uniform_two_row_batch_gives_2ln2(self):
        # identical rows make every pairwise similarity equal
        O = np.array([[1.0, 0.0], [1.0, 0.0]])
        A = np.array([[0.0, 1.0], [0.0, 1.0]])
        batch = BatchViews(O, A, A.copy())
        assert loss_oa_hn(batch) == pytest.approx(2 * math.log(2), abs=1e-12)
        assert loss_ao(batch) == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_equal_similarity_negative_gives_ln2_each_way(self):
        v = np.array([[1.0, 0.0]])
        batch = BatchViews(v, v.copy(), v.copy(),
                           attr_negatives=(v.copy(),), cat_negatives=(v.copy(),))
        assert loss_ac_hn(batch) == pytest.approx(math.log(2), abs=1e-12)
        assert loss_ca_hn(batch) == pytest.approx(math.log(2), abs=1e-12)
        assert loss_acc_hn(batch) == pytest.approx(math.log(2), abs=1e-12)

    def test_ccc_zero_similarity_negative(self):
        pos = np.array([[1.0, 0.0]])
        orth = np.array([[0.0, 1.0]])
        batch = BatchViews(pos, pos.copy(), pos.copy(),
                           attr_negatives=(orth.copy(),), cat_negatives=(orth.copy(),))
        assert loss_ccc(batch) == 0.0

    def test_ccc_is_similarity_for_single_negative(self):
        # -log(1/exp(s)) collapses to s
        pos = np.array([[1.0, 0.0]])
        neg = np.array([[0.5, math.sqrt(0.75)]])
        batch = BatchViews(pos, pos.copy(), pos.copy(),
                           attr_negatives=(neg.copy(),), cat_negatives=(neg.copy(),))
        assert loss_ccc(batch) == pytest.approx(0.5, abs=1e-12)

    def test_hand_evaluated_ao_row(self):
        # one anchor with similarity 2 to its own object and 0 to the other
        # two contributes -log(e^2 / (e^2 + 2)); verified against the oracle
        e1 = np.array([1.0, 0.0, 0.0])
        e2 = np.array([0.0, 1.0, 0.0])
        e3 = np.array([0.0, 0.0, 1.0])
        batch = BatchViews(np.stack([e1, e2, e3]), np.stack([e1, e2, e3]),
                           np.stack([e1, e2, e3]), temperature=0.5)
        hand_row = -math.log(math.exp(2) / (math.exp(2) + 2))
        assert loss_ao(batch) == pytest.approx(3 * hand_row, abs=1e-12)
        assert naive_loss_ao(batch) == pytest.approx(3 * hand_row, abs=1e-12)


class TestSingletonWithNegative:
    def test_stage1_on_lone_row_matches_enumeration(self):
        # one sample, one orthogonal (zero-similarity) negative everywhere
        e1 = np.array([[1.0, 0.0, 0.0]])
        e2 = np.array([[0.0, 1.0, 0.0]])
        batch = BatchViews(e1, e1.copy(), e1.copy(),
                           attr_negatives=(e2.copy(),), cat_negatives=(e2.copy(),))
        rep = stage1_objective(batch).report
        # l_oa = -log(e/(e + 1)) with positive similarity 1, negative 0
        expected_oa = -math.log(math.exp(1) / (math.exp(1) + 1))
        assert rep.l_oa == pytest.approx(expected_oa, abs=1e-12)
        assert rep.l_ao == 0.0 and rep.l_ccc == 0.0
        from oracles import naive_stage1_total
        assert rep.stage1_total == pytest.approx(naive_stage1_total(batch), abs=1e-12)


class TestOracleEquivalence:
    @pytest.mark.parametrize("tau", [1.0, 0.5, 0.07])
    def test_random_batches_match_enumeration(self, tau):
        rng = np.random.default_rng(int(tau * 1000))
        for _ in range(20):
            b = int(rng.integers(1, 33))
            d = int(rng.integers(2, 9))
            k = int(rng.integers(0, 4))
            batch = random_batch(rng, b, d, k, temperature=tau)
            assert abs(loss_oa_hn(batch) - naive_loss_oa_hn(batch)) < 1e-10
            assert abs(loss_ao(batch) - naive_loss_ao(batch)) < 1e-10
            assert abs(loss_ac_hn(batch) - naive_loss_ac_hn(batch)) < 1e-10
            assert abs(loss_ca_hn(batch) - naive_loss_ca_hn(batch)) < 1e-10
            if all(c >= 1 for c in batch.negative_counts):
                assert abs(loss_ccc(batch) - naive_loss_ccc(batch)) < 1e-10
                total = stage1_objective(batch).report.stage1_total
                assert abs(total - naive_stage1_total(batch)) < 1e-10


class TestProperties:
    def test_halving_identities_exact(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            batch = random_batch(rng, 6, 5, 2, allow_empty_rows=False)
            rep = stage1_objective(batch).report
            assert abs(rep.l_oac - (rep.l_oa + rep.l_ao) / 2) <= 1e-12
            assert abs(rep.l_acc - (rep.l_ac + rep.l_ca) / 2) <= 1e-12

    def test_hard_negatives_never_decrease_oa(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            batch = random_batch(rng, 5, 4, 3, allow_empty_rows=False)
            stripped = BatchViews(batch.objects, batch.attributes, batch.categories,
                                  temperature=batch.temperature)
            assert loss_oa_hn(batch) >= loss_oa_hn(stripped) - 1e-12

    def test_single_vector_rescaling_invariance(self):
        rng = np.random.default_rng(11)
        batch = random_batch(rng, 4, 5, 2, allow_empty_rows=False)
        base = stage1_objective(batch).report.stage1_total
        scaled_objects = batch.objects.copy()
        scaled_objects[2] *= 37.5
        scaled = BatchViews(scaled_objects, batch.attributes, batch.categories,
                            batch.attr_negatives, batch.cat_negatives, batch.temperature)
        assert stage1_objective(scaled).report.stage1_total == pytest.approx(base, abs=1e-9)

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(12)
        batch = random_batch(rng, 6, 4, 2, allow_empty_rows=False)
        base = stage1_objective(batch).report
        perm = rng.permutation(6)
        permuted = BatchViews(
            batch.objects[perm], batch.attributes[perm], batch.categories[perm],
            tuple(batch.attr_negatives[i] for i in perm),
            tuple(batch.cat_negatives[i] for i in perm),
            batch.temperature)
        for key, val in stage1_objective(permuted).report.as_dict().items():
            assert val == pytest.approx(base.as_dict()[key], abs=1e-12)

    def test_losses_finite_on_random_batches(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            batch = random_batch(rng, 8, 6, 3, allow_empty_rows=False)
            rep = stage1_objective(batch).report
            assert all(np.isfinite(v) for v in rep.as_dict().values())


class TestStage1Objective:
    def test_empty_negative_row_raises(self):
        batch = _no_neg(2, 4)
        with pytest.raises(EmptyNegativeSet):
            stage1_objective(batch)

    def test_aux_hook_enters_total(self):
        rng = np.random.default_rng(14)
        batch = random_batch(rng, 3, 4, 1, allow_empty_rows=False)
        base = stage1_objective(batch).report.stage1_total

        def aux(tape, views):
            return nm.scale(nm.sum_all(nm.mul(views.objects, views.objects)), 0.25)

        with_aux = stage1_objective(batch, aux=aux)
        expected_aux = 0.25 * float(np.sum(batch.objects ** 2))
        assert with_aux.report.stage1_total == pytest.approx(base + expected_aux, rel=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(15)
        batch = random_batch(rng, 4, 5, 3, temperature=0.8, allow_empty_rows=False)
        res = stage1_objective(batch)

        def repack(objects=None, attributes=None, categories=None, a0=None):
            a_hn = list(batch.attr_negatives)
            if a0 is not None:
                a_hn[0] = a0
            return BatchViews(
                batch.objects if objects is None else objects,
                batch.attributes if attributes is None else attributes,
                batch.categories if categories is None else categories,
                tuple(a_hn), batch.cat_negatives, batch.temperature)

        for name, grad, f in [
            ("objects", res.gradients.objects,
             lambda x: stage1_objective(repack(objects=x)).report.stage1_total),
            ("attributes", res.gradients.attributes,
             lambda x: stage1_objective(repack(attributes=x)).report.stage1_total),
            ("categories", res.gradients.categories,
             lambda x: stage1_objective(repack(categories=x)).report.stage1_total),
            ("attr_neg0", res.gradients.attr_negatives[0],
             lambda x: stage1_objective(repack(a0=x)).report.stage1_total),
        ]:
            target = {"objects": batch.objects, "attributes": batch.attributes,
                      "categories": batch.categories,
                      "attr_neg0": batch.attr_negatives[0]}[name]
            fd = nm.central_difference(f, target)
            assert nm.max_relative_error(grad, fd, floor=1e-4) < 1e-5, name


class TestValidation:
    def test_mismatched_view_shapes(self):
        with pytest.raises(DimensionMismatch):
            BatchViews(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)))

    def test_negative_count_mismatch(self):
        with pytest.raises(DimensionMismatch):
            BatchViews(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)),
                       attr_negatives=(np.zeros((2, 3)),),
                       cat_negatives=(np.zeros((1, 3)),))

    def test_bad_temperature(self):
        with pytest.raises(InvalidConfig):
            BatchViews(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)),
                       temperature=0.0)

    def test_loss_report_identity_enforced(self):
        with pytest.raises(ValueError):
            LossReport(l_oa=1.0, l_ao=1.0, l_oac=0.9, l_ac=0.0, l_ca=0.0,
                       l_acc=0.0, l_ccc=0.0, stage1_total=0.0)
