import numpy as np
import pytest

from lanerisk.architectures import (
    Model,
    ModelSpec,
    build_cnn_lstm,
    build_fbf_cnn,
    build_ft_lstm,
    build_ft_softmax,
    build_model,
    count_params,
    predict_clip,
    score_clips,
)
from lanerisk.errors import ConfigError, DimensionError
from lanerisk.layers import Dense
from lanerisk.lstm import count_lstm_params


def layer_shapes(model, shape):
    shapes = []
    x = np.zeros((1, *shape))
    for layer in model.layers:
        x = layer.forward(x)
        shapes.append(x.shape[1:])
    return shapes


class TestFbF:
    def test_layer_shapes_64(self):
        model = build_fbf_cnn((64, 64))
        assert layer_shapes(model, (64, 64, 3)) == [
            (64, 64, 64),
            (32, 32, 64),
            (32, 32, 32),
            (16, 16, 32),
            (16 * 16 * 32,),
            (1000,),
            (2,),
        ]

    def test_conv1_params(self):
        assert build_fbf_cnn((8, 8)).layers[0].param_count() == 4864

    def test_indivisible_resolution(self):
        with pytest.raises(ConfigError):
            build_fbf_cnn((30, 30))

    def test_output_is_distribution(self):
        out = build_fbf_cnn((8, 8)).forward(np.random.default_rng(0).uniform(size=(3, 8, 8, 3)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


class TestCnnLstm:
    def test_feature_width_is_50(self):
        for res in ((4, 4), (8, 6)):
            model = build_cnn_lstm(res, q=3)
            z = model.layers[0].forward(np.zeros((2, 3, *res, 3)))
            assert z.shape == (2, 3, 50)

    def test_lstm_block_params(self):
        assert build_cnn_lstm((4, 4), 2).layers[1].param_count() == 5680

    def test_q_one(self):
        out = build_cnn_lstm((4, 4), q=1).forward(np.zeros((1, 1, 4, 4, 3)))
        assert out.shape == (1, 2)

    def test_time_distribution_weight_sharing(self):
        model = build_cnn_lstm((4, 4), q=4, seed=1)
        frame = np.random.default_rng(0).uniform(size=(4, 4, 3))
        clip = np.broadcast_to(frame, (1, 4, 4, 4, 3)).copy()
        trunk = model.layers[0]
        trunk.layers[0].params["W"] += 0.1
        z = trunk.forward(clip)
        for j in range(1, 4):
            np.testing.assert_array_equal(z[0, j], z[0, 0])

    def test_head_equals_ft_lstm(self):
        a = build_cnn_lstm((4, 4), q=3, seed=0)
        b = build_ft_lstm(50, q=3, seed=0)
        assert sum(l.param_count() for l in a.layers[1:]) == count_params(b)


class TestFeatureTransfer:
    def test_softmax_count(self):
        assert count_params(build_ft_softmax(2048)) == 4098

    def test_zero_features_give_bias_output(self):
        model = build_ft_softmax(5)
        model.layers[0].params["b"][:] = [0.0, np.log(3.0)]
        np.testing.assert_allclose(model.forward(np.zeros((1, 5))), [[0.25, 0.75]])

    def test_lstm_shapes(self):
        assert build_ft_lstm(7, 4).forward(np.zeros((2, 4, 7))).shape == (2, 2)


class TestCounts:
    def test_dense(self):
        assert count_params(Model([Dense(10, 5)])) == 55

    def test_empty(self):
        assert count_params(Model([])) == 0

    @pytest.mark.parametrize(
        "spec",
        [
            ModelSpec("fbf-cnn", "raw", 1, (16, 16)),
            ModelSpec("cnn-lstm", "masked", 5, (16, 16)),
            ModelSpec("ft-softmax", "features", 1, feature_dim=12),
            ModelSpec("ft-lstm", "features", 4, feature_dim=12),
        ],
    )
    def test_closed_form(self, spec):
        model = build_model(spec)
        h, w = spec.resolution
        d = spec.feature_dim
        expected = {
            "fbf-cnn": 4864 + (64 * 25 * 32 + 32) + (h // 4) * (w // 4) * 32 * 1000 + 1000 + 2002,
            "cnn-lstm": (27 * 16 + 16) + (144 * 16 + 16) + ((h // 2) * (w // 2) * 16 * 200 + 200)
            + (200 * 50 + 50) + count_lstm_params(50, 20) + 42,
            "ft-softmax": 2 * (d or 0) + 2,
            "ft-lstm": count_lstm_params(d or 1, 20) + 42,
        }[spec.family]
        assert count_params(model) == expected


class TestSpec:
    def test_invalid_combinations(self):
        with pytest.raises(ConfigError):
            ModelSpec("ft-lstm", "raw", 3)
        with pytest.raises(ConfigError):
            ModelSpec("cnn-lstm", "features", 3)
        with pytest.raises(ConfigError):
            ModelSpec("fbf-cnn", "raw", 5)
        with pytest.raises(ConfigError):
            ModelSpec("nope")

    def test_names(self):
        assert ModelSpec("cnn-lstm", "masked", 10).name == "SMT+CNN+LSTM"
        assert ModelSpec("fbf-cnn").name == "FbF CNN"


class ConstantModel(Model):
    def __init__(self, probs, spec):
        super().__init__([], spec)
        self.probs = list(probs)

    def forward(self, x, training=False):
        n = len(x)
        p = np.array(self.probs[:n])
        self.probs = self.probs[n:]
        return np.stack([1 - p, p], axis=1)


class TestScoring:
    def test_constant_model(self):
        m = ConstantModel([0.5], ModelSpec("cnn-lstm", "raw", 3))
        assert predict_clip(m, np.zeros((3, 4, 4, 3))) == 0.5

    def test_fbf_mean(self):
        m = ConstantModel([0.2, 0.4, 0.9], ModelSpec("fbf-cnn"))
        assert predict_clip(m, np.zeros((3, 4, 4, 3))) == pytest.approx(0.5, abs=1e-15)

    def test_frame_count_mismatch(self):
        with pytest.raises(DimensionError):
            score_clips(build_cnn_lstm((4, 4), q=3), np.zeros((1, 4, 4, 4, 3)))

    def test_lstm_score_is_risky_component(self):
        model = build_cnn_lstm((4, 4), q=2, seed=3)
        x = np.random.default_rng(0).uniform(size=(2, 2, 4, 4, 3))
        np.testing.assert_array_equal(score_clips(model, x), model.forward(x)[:, 1])


def test_state_dict_roundtrip():
    a, b = build_cnn_lstm((4, 4), 2, seed=0), build_cnn_lstm((4, 4), 2, seed=1)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(0).uniform(size=(1, 2, 4, 4, 3))
    np.testing.assert_array_equal(a.forward(x), b.forward(x))
    with pytest.raises(ConfigError):
        b.load_state_dict({})
