import numpy as np
import pytest

from attralign import numerics as nm
from attralign.errors import DimensionMismatch, InvalidConfig, ShapeMismatch
from attralign.losses import stage1_graph
from attralign.model import (
    AdamConfig,
    ClassifierHead,
    Head,
    HeadSpec,
    OptimizerState,
    ProjectionModel,
    adam_step,
    forward,
    head_graph,
    load_checkpoint,
    project,
    save_checkpoint,
    views_graph,
    warmup_lr,
)


class TestForward:
    def test_identity_head_normalizes(self):
        model = ProjectionModel.identity(3)
        out = project(model, "object", np.array([[3.0, 4.0, 0.0]]))
        assert np.allclose(out, [[0.6, 0.8, 0.0]], atol=1e-15)

    def test_tied_text_heads_project_identically(self):
        model = ProjectionModel.create(5, 4, dim_shared=6, seed=3)
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert np.array_equal(project(model, "attribute", x), project(model, "category", x))

    def test_untied_text_heads_differ(self):
        model = ProjectionModel.create(5, 4, dim_shared=6, seed=3, tie_text_heads=False)
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert not np.array_equal(project(model, "attribute", x), project(model, "category", x))

    def test_outputs_unit_norm(self):
        model = ProjectionModel.create(7, 5, dim_shared=8, seed=1)
        x = np.random.default_rng(1).normal(size=(10, 7))
        out = project(model, "object", x)
        assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)

    def test_forward_builds_batch_views(self):
        rng = np.random.default_rng(2)
        model = ProjectionModel.create(6, 4, dim_shared=5, seed=2)
        views = forward(model, rng.normal(size=(3, 6)), rng.normal(size=(3, 4)),
                        rng.normal(size=(3, 4)),
                        attr_negatives=[rng.normal(size=(2, 4)) for _ in range(3)],
                        cat_negatives=[rng.normal(size=(2, 4)) for _ in range(3)],
                        temperature=0.5)
        assert views.batch_size == 3 and views.dim == 5
        assert views.negative_counts == (2, 2, 2)
        assert views.temperature == 0.5

    def test_deterministic_given_parameters(self):
        model = ProjectionModel.create(4, 4, seed=9)
        x = np.random.default_rng(3).normal(size=(2, 4))
        assert np.array_equal(project(model, "object", x), project(model, "object", x))

    def test_input_dim_checked(self):
        model = ProjectionModel.create(4, 4, seed=9)
        with pytest.raises(DimensionMismatch):
            project(model, "object", np.zeros((2, 5)))

    def test_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        model = ProjectionModel.create(4, 4, dim_shared=4, seed=4)
        x = rng.normal(size=(3, 4))
        target = rng.normal(size=(3, 4))
        params = model.parameters()

        def build():
            tape = nm.Tape()
            pv = {k: tape.leaf(v) for k, v in params.items()}
            out = head_graph(tape, model.object_head, x, pv, "object.")
            return tape, pv, nm.sum_all(nm.mul(out, tape.leaf(target)))

        tape, pv, total = build()
        table = nm.backward(tape, total)
        for name in (k for k in params if k.startswith("object.")):
            arr = params[name]

            def f(v, name=name, arr=arr):
                old = arr.copy()
                arr[...] = v
                value = float(build()[2].value)
                arr[...] = old
                return value

            fd = nm.central_difference(f, arr)
            assert nm.max_relative_error(table[pv[name].index], fd, floor=1e-4) < 1e-5

    def test_end_to_end_stage1_parameter_gradients(self):
        rng = np.random.default_rng(5)
        model = ProjectionModel.create(5, 4, dim_shared=4, seed=5)
        O, A, C = rng.normal(size=(3, 5)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        a_hn = [rng.normal(size=(2, 4)) for _ in range(3)]
        c_hn = [rng.normal(size=(2, 4)) for _ in range(3)]
        params = model.parameters()

        def build():
            tape = nm.Tape()
            pv = {k: tape.leaf(v) for k, v in params.items()}
            views = views_graph(tape, model, pv, O, A, C, a_hn, c_hn, 0.8)
            _, total = stage1_graph(tape, views)
            return tape, pv, total

        tape, pv, total = build()
        table = nm.backward(tape, total)
        name = "text.0.weight"
        arr = params[name]

        def f(v):
            old = arr.copy()
            arr[...] = v
            value = float(build()[2].value)
            arr[...] = old
            return value

        fd = nm.central_difference(f, arr)
        assert nm.max_relative_error(table[pv[name].index], fd, floor=1e-4) < 1e-5


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        params = {"w": np.array([1.0, -2.0])}
        state = OptimizerState(params)
        before = params["w"].copy()
        adam_step(state, params, {"w": np.zeros(2)}, AdamConfig(lr=0.1, warmup_steps=0))
        assert np.array_equal(params["w"], before)

    def test_warmup_ramp(self):
        # step 30 of a 60-step warmup at base 2e-4 gives 1e-4
        assert warmup_lr(2e-4, 60, 30) == pytest.approx(1e-4, abs=1e-18)
        assert warmup_lr(2e-4, 60, 60) == pytest.approx(2e-4)
        assert warmup_lr(2e-4, 60, 600) == pytest.approx(2e-4)
        assert warmup_lr(2e-4, 0, 1) == pytest.approx(2e-4)

    def test_effective_lr_during_training_step(self):
        params = {"w": np.array([0.0])}
        state = OptimizerState(params)
        lr = adam_step(state, params, {"w": np.array([1.0])},
                       AdamConfig(lr=2e-4, warmup_steps=60))
        assert lr == pytest.approx(2e-4 / 60)

    def test_three_steps_match_hand_rolled_sequence(self):
        # single scalar parameter, constant gradient 1.0, no warmup
        cfg = AdamConfig(lr=0.1, warmup_steps=0)
        params = {"w": np.array([0.5])}
        state = OptimizerState(params)

        w, m, v = 0.5, 0.0, 0.0
        for t in range(1, 4):
            m = 0.9 * m + 0.1 * 1.0
            v = 0.999 * v + 0.001 * 1.0
            m_hat = m / (1 - 0.9 ** t)
            v_hat = v / (1 - 0.999 ** t)
            w -= 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
            adam_step(state, params, {"w": np.array([1.0])}, cfg)
            assert params["w"][0] == pytest.approx(w, abs=1e-15)

    def test_shape_mismatch_rejected(self):
        params = {"w": np.zeros((2, 2))}
        state = OptimizerState(params)
        with pytest.raises(ShapeMismatch):
            adam_step(state, params, {"w": np.zeros(3)}, AdamConfig())
        with pytest.raises(ShapeMismatch):
            adam_step(state, params, {}, AdamConfig())

    def test_one_step_decreases_stage1_loss(self):
        rng = np.random.default_rng(6)
        model = ProjectionModel.create(6, 6, dim_shared=8, seed=6)
        O, A, C = rng.normal(size=(8, 6)), rng.normal(size=(8, 6)), rng.normal(size=(8, 6))
        a_hn = [rng.normal(size=(1, 6)) for _ in range(8)]
        c_hn = [rng.normal(size=(1, 6)) for _ in range(8)]
        params = model.parameters()

        def total_and_grads():
            tape = nm.Tape()
            pv = {k: tape.leaf(v) for k, v in params.items()}
            views = views_graph(tape, model, pv, O, A, C, a_hn, c_hn, 1.0)
            _, total = stage1_graph(tape, views)
            table = nm.backward(tape, total)
            return float(total.value), {k: table[pv[k].index] for k in params}

        before, grads = total_and_grads()
        state = OptimizerState(params)
        adam_step(state, params, grads, AdamConfig(lr=1e-4, warmup_steps=0))
        after, _ = total_and_grads()
        assert after < before


class TestClassifier:
    def test_shapes_and_logits(self):
        head = ClassifierHead.create(num_classes=4, dim=6, seed=0)
        assert head.weight.shape == (4, 6)
        feats = np.random.default_rng(0).normal(size=(3, 6))
        assert head.logits(feats).shape == (3, 4)

    def test_bad_shapes_rejected(self):
        with pytest.raises(DimensionMismatch):
            ClassifierHead(np.zeros((3, 4)), np.zeros(2))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = ProjectionModel.create(5, 4, dim_shared=6, seed=7, tie_text_heads=False)
        clf = ClassifierHead.create(3, 6, seed=8)
        save_checkpoint(model, tmp_path / "ckpt", classifier=clf, step=17, seed=7)
        back, back_clf, manifest = load_checkpoint(tmp_path / "ckpt")
        for name, arr in model.parameters().items():
            assert np.array_equal(back.parameters()[name], arr)
        assert np.array_equal(back_clf.weight, clf.weight)
        assert manifest["step"] == 17
        assert back.tie_text_heads == model.tie_text_heads

    def test_checkpointed_model_projects_identically(self, tmp_path):
        model = ProjectionModel.create(4, 4, seed=11)
        save_checkpoint(model, tmp_path / "ckpt")
        back, _, _ = load_checkpoint(tmp_path / "ckpt")
        x = np.random.default_rng(1).normal(size=(3, 4))
        assert np.array_equal(project(model, "object", x), project(back, "object", x))


class TestSpecs:
    def test_init_statistics(self):
        # seeded Gaussian with std 1/sqrt(fan_in), zero biases
        rng = np.random.default_rng(0)
        head = Head.create(HeadSpec((400, 300)), rng)
        assert head.biases[0].sum() == 0.0
        assert head.weights[0].std() == pytest.approx(1 / np.sqrt(400), rel=0.05)

    def test_invalid_spec_rejected(self):
        with pytest.raises(InvalidConfig):
            HeadSpec((4,))
        with pytest.raises(InvalidConfig):
            HeadSpec((4, 3), nonlinearity="tanh")

    def test_default_shape(self):
        model = ProjectionModel.create(32, 32, dim_shared=64, seed=0)
        assert model.object_head.spec.layer_dims == (32, 128, 64)
        assert model.parameter_count() > 0
