import numpy as np
import pytest

from helpers import small_params
from maskcon import model as mdl
from maskcon.errors import ChecksumMismatch, ShapeMismatch
from maskcon.numerics import OptimState, finite_diff_grad, relative_error, sgd_step


def _zeroed(params):
    return params.replace({k: np.zeros_like(v) for k, v in params.tensors.items()})


class TestEncoder:
    def test_zero_params_give_zero_features(self, rng):
        params = _zeroed(small_params())
        feats, _ = mdl.encoder_forward(params, rng.normal(size=(4, 6)))
        np.testing.assert_array_equal(feats, 0.0)

    def test_identity_layer(self):
        params = mdl.ModelParams({"encoder.0.weight": np.eye(3), "encoder.0.bias": np.zeros((1, 3))})
        x = np.array([[0.5, 1.0, 2.0]])
        np.testing.assert_array_equal(mdl.encoder_forward(params, x)[0], x)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            mdl.encoder_forward(small_params(), rng.normal(size=(2, 5)))

    def test_deterministic(self, rng):
        x = rng.normal(size=(3, 6))
        p = small_params()
        np.testing.assert_array_equal(mdl.encoder_forward(p, x)[0], mdl.encoder_forward(p, x)[0])

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        params = small_params(seed, hidden=(5, 4))
        x = rng.normal(size=(4, 6))
        head = rng.normal(size=(4, 4))
        names = [k for k in params.tensors if k.startswith("encoder.")]

        def loss(t):
            return float(np.sum(head * mdl.encoder_forward(params.replace(t), x)[0]))

        feats, cache = mdl.encoder_forward(params, x)
        analytic = mdl.encoder_backward(params, cache, head)
        numeric = finite_diff_grad(loss, {k: params.tensors[k] for k in names})
        assert relative_error({k: analytic[k] for k in names}, numeric) <= 1e-4


class TestProject:
    def test_unit_norm_rows(self, rng):
        u, _ = mdl.project(small_params(), rng.normal(size=(10, 4)))
        np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)

    def test_positive_scaling_invariance_of_linear_projector(self, rng):
        w = rng.normal(size=(4, 3))
        params = mdl.ModelParams({"projector.0.weight": w, "projector.0.bias": np.zeros((1, 3))})
        f = rng.normal(size=(2, 4))
        np.testing.assert_allclose(mdl.project(params, 2 * f)[0], mdl.project(params, f)[0], atol=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_backward_through_normalisation(self, seed):
        rng = np.random.default_rng(seed)
        params = small_params(seed)
        f = rng.normal(size=(5, 4))
        head = rng.normal(size=(5, 3))
        u, cache = mdl.project(params, f)
        df, grads = mdl.project_backward(params, cache, head)
        num_f = finite_diff_grad(lambda ff: float(np.sum(head * mdl.project(params, ff)[0])), f)
        assert relative_error(df, num_f) <= 1e-4
        names = [k for k in params.tensors if k.startswith("projector.")]
        num = finite_diff_grad(
            lambda t: float(np.sum(head * mdl.project(params.replace(t), f)[0])),
            {k: params.tensors[k] for k in names},
        )
        assert relative_error({k: grads[k] for k in names}, num) <= 1e-4


class TestClassify:
    def test_zero_weights(self, rng):
        p = _zeroed(small_params())
        np.testing.assert_array_equal(mdl.classify(p, rng.normal(size=(2, 4))), 0.0)

    def test_one_hot_feature_selects_row(self):
        p = small_params()
        w, b = p.tensors["classifier.weight"], p.tensors["classifier.bias"]
        logits = mdl.classify(p, np.array([[0.0, 0.0, 1.0, 0.0]]))
        np.testing.assert_allclose(logits[0], w[2] + b[0], rtol=1e-15)

    def test_gradient(self, rng):
        p = small_params()
        f = rng.normal(size=(3, 4))
        head = rng.normal(size=(3, 3))
        df, grads = mdl.classify_backward(p, f, head)
        assert relative_error(df, finite_diff_grad(lambda ff: float(np.sum(head * mdl.classify(p, ff))), f)) <= 1e-4
        names = ["classifier.weight", "classifier.bias"]
        num = finite_diff_grad(
            lambda t: float(np.sum(head * mdl.classify(p.replace(t), f))), {k: p.tensors[k] for k in names}
        )
        assert relative_error({k: grads[k] for k in names}, num) <= 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            mdl.classify(small_params(), np.ones((2, 5)))


class TestMomentumUpdate:
    def _pair(self, key_value, query_value):
        t = {
            "encoder.0.weight": np.full((2, 2), query_value),
            "encoder.0.bias": np.full((1, 2), query_value),
            "key_encoder.0.weight": np.full((2, 2), key_value),
            "key_encoder.0.bias": np.full((1, 2), key_value),
        }
        return mdl.ModelParams(t)

    def test_m_zero_copies_query(self):
        p = mdl.momentum_update(self._pair(0.3, 1.7), 0.0)
        np.testing.assert_array_equal(p.tensors["key_encoder.0.weight"], 1.7)

    def test_m_one_keeps_key(self):
        p = mdl.momentum_update(self._pair(0.3, 1.7), 1.0)
        np.testing.assert_array_equal(p.tensors["key_encoder.0.weight"], 0.3)

    def test_formula(self):
        p = mdl.momentum_update(self._pair(0.0, 1.0), 0.99)
        np.testing.assert_allclose(p.tensors["key_encoder.0.bias"], 0.01, rtol=1e-14)

    def test_shape_mismatch(self):
        p = self._pair(0.0, 1.0)
        p.tensors["key_encoder.0.weight"] = np.zeros((3, 2))
        with pytest.raises(ShapeMismatch):
            mdl.momentum_update(p, 0.5)


def test_init_key_copies_match_query():
    p = mdl.init_params(6, 3, (5,), 4, (7,), 3, rng=0)
    for k, v in p.key_tensors().items():
        np.testing.assert_array_equal(v, p.tensors[k[len("key_"):]])
    assert p.proj_dim == 3 and p.feat_dim == 4 and p.input_dim == 6 and p.n_classes == 3


def test_sgd_step_never_touches_key_params(rng):
    p = small_params()
    key_names = list(p.key_tensors())
    before = p.checksum(key_names)
    grads = {k: rng.normal(size=v.shape) for k, v in p.trainable().items()}
    state = OptimState.zeros_like(p.trainable(), base_lr=0.1, weight_decay=0.01)
    new, _ = sgd_step(p.trainable(), grads, state)
    p2 = p.replace(new)
    assert p2.checksum(key_names) == before
    assert p2.checksum(list(p.trainable())) != p.checksum(list(p.trainable()))


class TestCheckpoint:
    def test_round_trip_is_byte_identical(self, tmp_path):
        p = small_params(7)
        a = mdl.save_checkpoint(p, tmp_path / "a.mkcn")
        q = mdl.load_checkpoint(a)
        b = mdl.save_checkpoint(q, tmp_path / "b.mkcn")
        assert a.read_bytes() == b.read_bytes()
        for k in p.tensors:
            np.testing.assert_array_equal(p.tensors[k], q.tensors[k])

    def test_layout(self, tmp_path):
        p = mdl.ModelParams({"x": np.arange(6.0).reshape(2, 3)})
        raw = mdl.checkpoint_bytes(p)
        assert raw[:4] == b"MKCN"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 1
        assert int.from_bytes(raw[12:16], "little") == 1 and raw[16:17] == b"x"
        assert np.frombuffer(raw[29:29 + 48], "<f8").tolist() == list(range(6))

    def test_corruption_detected(self, tmp_path):
        raw = bytearray(mdl.checkpoint_bytes(small_params()))
        raw[40] ^= 0xFF
        with pytest.raises(ChecksumMismatch):
            mdl.parse_checkpoint(bytes(raw))
        with pytest.raises(ChecksumMismatch):
            mdl.parse_checkpoint(bytes(raw[:30]))
