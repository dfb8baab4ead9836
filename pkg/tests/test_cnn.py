import struct

import numpy as np
import pytest

from oracles import naive_conv, naive_fc, naive_forward, naive_lrn, naive_pool, rel_err
from tractscope.acquisition import RasterImage
from tractscope.cnn import (
    BASELINE_DIM,
    Conv,
    FullyConnected,
    NetworkError,
    NetworkSpec,
    ReLU,
    WeightFormatError,
    activation_maps,
    baseline_descriptor,
    conv2d,
    forward_to_layer,
    fully_connected,
    infer_shapes,
    lrn,
    max_pool,
    parse_weights,
    preprocess,
    random_network,
    relu,
    serialize_weights,
    to_pgm,
    write_activation_maps,
)


def conv_layer(rng, out, inp, k, stride=1, pad=0, name="c"):
    return Conv(name, rng.standard_normal((out, inp, k, k)).astype(np.float32),
                rng.standard_normal(out).astype(np.float32), stride, pad)


# ---------------------------------------------------------------------------


class TestConv:
    def test_scalar(self):
        layer = Conv("c", np.array([[[[3.0]]]], np.float32), np.array([0.5], np.float32))
        assert conv2d(np.array([[[2.0]]], np.float32), layer).item() == 6.5

    @pytest.mark.parametrize("h,k,s,p", [(224, 11, 4, 0), (27, 5, 1, 2), (13, 3, 1, 1), (10, 3, 2, 0),
                                         (7, 7, 1, 0), (9, 2, 3, 1), (16, 4, 4, 0), (5, 1, 1, 0)])
    def test_output_dims(self, h, k, s, p):
        layer = Conv("c", np.zeros((1, 1, k, k), np.float32), np.zeros(1, np.float32), s, p)
        out = conv2d(np.zeros((1, h, h), np.float32), layer)
        expected = (h + 2 * p - k) // s + 1
        assert out.shape == (1, expected, expected)
        if (h, k, s, p) == (224, 11, 4, 0):
            assert expected == 54

    def test_matches_naive(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 8, 8)).astype(np.float32)
        for stride, pad in ((1, 0), (1, 1), (2, 1), (3, 2)):
            layer = conv_layer(rng, 4, 3, 3, stride, pad)
            assert rel_err(conv2d(x, layer), naive_conv(x, layer.weights, layer.bias, stride, pad)) < 1e-5

    def test_linearity(self):
        rng = np.random.default_rng(1)
        layer = Conv("c", rng.standard_normal((4, 3, 3, 3)).astype(np.float32), np.zeros(4, np.float32), 1, 1)
        x = rng.standard_normal((3, 9, 9)).astype(np.float32)
        y = rng.standard_normal((3, 9, 9)).astype(np.float32)
        a, b = 0.7, -1.3
        lhs = conv2d((a * x + b * y).astype(np.float32), layer)
        rhs = a * conv2d(x, layer) + b * conv2d(y, layer)
        assert rel_err(lhs, rhs) < 1e-5

    def test_errors(self):
        rng = np.random.default_rng(2)
        with pytest.raises(NetworkError):
            conv2d(np.zeros((2, 5, 5), np.float32), conv_layer(rng, 1, 3, 3))
        with pytest.raises(NetworkError, match="kernel larger"):
            conv2d(np.zeros((3, 2, 2), np.float32), conv_layer(rng, 1, 3, 3))


class TestSimpleLayers:
    def test_relu(self):
        assert relu(np.array([-1.0, 0, 2], np.float32)).tolist() == [0, 0, 2]
        assert not relu(-np.ones((2, 3, 3), np.float32)).any()
        x = np.random.default_rng(3).standard_normal((2, 4, 4)).astype(np.float32)
        assert np.array_equal(relu(relu(x)), relu(x))

    def test_pool(self):
        assert max_pool(np.array([[[1.0, 2], [3, 4]]], np.float32), 2, 2).tolist() == [[[4.0]]]
        assert np.all(max_pool(np.full((2, 6, 6), 3.0, np.float32), 3, 2, 1) == 3.0)
        x = np.random.default_rng(4).standard_normal((3, 9, 7)).astype(np.float32)
        for k, s, p in ((3, 2, 0), (2, 2, 1), (3, 1, 1), (1, 1, 0)):
            assert np.array_equal(max_pool(x, k, s, p), naive_pool(x, k, s, p).astype(np.float32))
        # negative inputs: padding must not win
        assert max_pool(-np.ones((1, 2, 2), np.float32), 2, 1, 1).max() == -1
        with pytest.raises(NetworkError):
            max_pool(x, 12, 1, 0)

    def test_lrn(self):
        x = np.random.default_rng(5).standard_normal((1, 4, 4)).astype(np.float32)
        assert np.allclose(lrn(x, 1.0, 0.0, 0.75, 1), x)
        u = np.full((6, 3, 3), 2.0, np.float32)
        y = lrn(u, 2.0, 1e-2, 0.75, 1)
        assert np.all(y == y.flat[0])
        x = np.random.default_rng(6).standard_normal((7, 5, 5)).astype(np.float32) * 3
        for n in (1, 3, 5):
            assert rel_err(lrn(x, 2.0, 1e-1, 0.75, n), naive_lrn(x, 2.0, 1e-1, 0.75, n)) < 1e-6
        with pytest.raises(NetworkError):
            lrn(x, 2.0, 1e-1, 0.75, 4)

    def test_fc(self):
        x = np.arange(6, dtype=np.float32)
        ident = FullyConnected("f", np.eye(6, dtype=np.float32), np.zeros(6, np.float32))
        assert np.array_equal(fully_connected(x, ident), x)
        ones = FullyConnected("f", np.ones((1, 6), np.float32), np.array([2.0], np.float32))
        assert fully_connected(x, ones).item() == 17.0
        rng = np.random.default_rng(7)
        w = rng.standard_normal((5, 24)).astype(np.float32)
        b = rng.standard_normal(5).astype(np.float32)
        x3 = rng.standard_normal((2, 3, 4)).astype(np.float32)
        assert rel_err(fully_connected(x3, FullyConnected("f", w, b)), naive_fc(x3, w, b)) < 1e-6
        with pytest.raises(NetworkError):
            fully_connected(np.zeros(5, np.float32), ones)


class TestForward:
    def test_toy_identity_net(self):
        layer = Conv("id", np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
        net = NetworkSpec((1, 2, 2), (0, 0, 0), (layer, ReLU("r")))
        x = np.array([[[-1.0, 2.0], [3.0, -4.0]]], np.float32)
        assert forward_to_layer(net, x, "r").values.tolist() == [0.0, 2.0, 3.0, 0.0]
        assert forward_to_layer(net, x, "id").values.tolist() == [-1.0, 2.0, 3.0, -4.0]
        with pytest.raises(NetworkError, match="unknown layer"):
            forward_to_layer(net, x, "nope")

    def test_prefix_is_conv_output(self):
        rng = np.random.default_rng(8)
        net = random_network(rng)
        x = rng.standard_normal((3, 16, 16)).astype(np.float32)
        first = net.layers[0]
        assert np.array_equal(forward_to_layer(net, x, first.name).values, conv2d(x, first).reshape(-1))

    def test_engine_equivalence_100_nets(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            c = int(rng.integers(1, 4))
            h = int(rng.integers(4, 17))
            templates = [
                [("conv", int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2)))],
                [("relu",)],
                [("lrn", 2.0, 1e-2, 0.75, int(rng.choice([1, 3, 5])))],
                [("pool", 2, int(rng.integers(1, 3)), int(rng.integers(0, 2)))],
            ]
            layers = []
            for _ in range(int(rng.integers(1, 3))):
                layers += templates[int(rng.integers(0, 4))]
            if rng.random() < 0.5:
                layers.append(("fc", int(rng.integers(1, 9))))
            layers = layers[:3]
            try:
                net = random_network(rng, (c, h, h), layers, scale=1.0)
            except NetworkError:
                continue
            x = rng.standard_normal((c, h, h)).astype(np.float32)
            for layer in net.layers:
                got = forward_to_layer(net, x, layer.name).values
                assert rel_err(got, naive_forward(net, x, layer.name)) < 1e-5
                assert np.isfinite(got).all()

    def test_determinism(self):
        rng = np.random.default_rng(10)
        net = random_network(rng)
        x = rng.standard_normal((3, 16, 16)).astype(np.float32)
        a = forward_to_layer(net, x, "fc4").values
        b = forward_to_layer(parse_weights(serialize_weights(net)), x, "fc4").values
        assert a.tobytes() == b.tobytes()

    def test_infer_shapes_mismatch(self):
        rng = np.random.default_rng(11)
        with pytest.raises(NetworkError):
            NetworkSpec((3, 8, 8), (0, 0, 0), (conv_layer(rng, 4, 2, 3),))
        with pytest.raises(NetworkError):
            NetworkSpec((3, 8, 8), (0, 0, 0), (FullyConnected("f", np.zeros((2, 10), np.float32), np.zeros(2, np.float32)),))
        with pytest.raises(NetworkError, match="duplicate"):
            NetworkSpec((3, 8, 8), (0, 0, 0), (ReLU("a"), ReLU("a")))


class TestWeights:
    def net(self):
        rng = np.random.default_rng(12)
        return random_network(rng, (3, 12, 12), [("conv", 4, 3, 1, 1), ("relu",), ("lrn", 2.0, 1e-4, 0.75, 3),
                                                 ("pool", 2, 2, 0), ("fc", 5)])

    def test_round_trip_bit_exact(self):
        net = self.net()
        back = parse_weights(serialize_weights(net))
        assert back.input_dims == net.input_dims
        assert back.channel_means == net.channel_means
        for a, b in zip(net.layers, back.layers):
            assert type(a) is type(b) and a.name == b.name
            if hasattr(a, "weights"):
                assert a.weights.tobytes() == b.weights.tobytes()
                assert a.bias.tobytes() == b.bias.tobytes()
        assert serialize_weights(back) == serialize_weights(net)

    def test_header_layout(self):
        payload = serialize_weights(self.net())
        assert payload[:4] == b"CNW1"
        assert struct.unpack("<I", payload[4:8]) == (1,)
        assert struct.unpack("<3I", payload[8:20]) == (3, 12, 12)
        assert struct.unpack("<I", payload[32:36]) == (5,)
        assert payload[36] == 0  # conv tag
        assert struct.unpack("<H", payload[37:39]) == (len("conv1"),)

    def test_bad_magic(self):
        with pytest.raises(WeightFormatError, match="bad magic"):
            parse_weights(b"XXXX" + serialize_weights(self.net())[4:])

    def test_truncated(self):
        payload = serialize_weights(self.net())
        with pytest.raises(WeightFormatError, match="truncated"):
            parse_weights(payload[:-7])

    def test_dim_mismatch(self):
        net = self.net()
        payload = bytearray(serialize_weights(net))
        payload[12:16] = struct.pack("<I", 20)  # claim 20x12 input
        with pytest.raises(WeightFormatError, match="dim mismatch"):
            parse_weights(bytes(payload))

    def test_duplicate_name(self):
        net = NetworkSpec((1, 4, 4), (0, 0, 0), (ReLU("a"), ReLU("b")))
        payload = serialize_weights(net).replace(b"\x01\x00b", b"\x01\x00a")
        with pytest.raises(WeightFormatError, match="duplicate"):
            parse_weights(payload)


class TestPreprocess:
    def net(self, h, w, means=(0.0, 0.0, 0.0)):
        return NetworkSpec((3, h, w), means, ())

    def test_identity_conversion(self):
        data = np.random.default_rng(13).integers(0, 256, (5, 4, 3), dtype=np.uint8)
        out = preprocess(RasterImage.from_array(data), self.net(5, 4))
        assert out.dtype == np.float32
        assert np.array_equal(out, data.transpose(2, 0, 1).astype(np.float32))

    def test_uniform_downsize(self):
        img = RasterImage.from_array(np.full((2, 2, 3), 77, np.uint8))
        assert np.all(preprocess(img, self.net(1, 1)) == 77)

    def test_bilinear_center(self):
        data = np.zeros((2, 2, 3), np.uint8)
        data[1] = 255
        out = preprocess(RasterImage.from_array(data), self.net(1, 1, (10.0, 0.0, 0.0)))
        # center sample of [[0,0],[255,255]] is 127.5; channel 0 has mean 10 removed
        assert out[:, 0, 0].tolist() == [117.5, 127.5, 127.5]


class TestBaseline:
    def test_constant_image(self):
        fv = baseline_descriptor(RasterImage.from_array(np.full((8, 8, 3), [10, 100, 255], np.uint8)))
        assert len(fv.values) == BASELINE_DIM == 208
        hist = fv.values[:192].reshape(3, 64)
        assert hist[0, 10 >> 2] == 1 and hist[1, 100 >> 2] == 1 and hist[2, 63] == 1
        assert hist.sum() == 3
        assert not fv.values[192:].any()

    def test_histogram_permutation_invariant(self):
        rng = np.random.default_rng(14)
        data = rng.integers(0, 256, (10, 10, 3), dtype=np.uint8)
        perm = data.reshape(-1, 3)[rng.permutation(100)].reshape(10, 10, 3)
        a = baseline_descriptor(RasterImage.from_array(data)).values
        b = baseline_descriptor(RasterImage.from_array(perm)).values
        assert np.array_equal(a[:192], b[:192])

    @pytest.mark.parametrize("h,w", [(1, 1), (1, 5), (3, 2), (64, 64), (17, 9)])
    def test_length(self, h, w):
        data = np.random.default_rng(h * w).integers(0, 256, (h, w, 3), dtype=np.uint8)
        fv = baseline_descriptor(RasterImage.from_array(data))
        assert len(fv.values) == 208
        assert np.isfinite(fv.values).all()

    def test_gradient_stats(self):
        # vertical stripes: dx alternates +-1 in gray units, dy is zero
        data = np.zeros((4, 4, 3), np.uint8)
        data[:, 1::2] = 255
        g = baseline_descriptor(RasterImage.from_array(data)).values[192:].reshape(4, 4)
        assert np.allclose(g[:, 0], 1.0) and np.allclose(g[:, 2], 1.0)
        assert np.allclose(g[:, 1], 0.0) and np.allclose(g[:, 3], 0.0)


class TestActivationMaps:
    def test_counts_and_dims(self):
        rng = np.random.default_rng(15)
        net = random_network(rng, (3, 16, 16), [("conv", 64, 3, 1, 1), ("relu",), ("conv", 6, 3, 2, 0)])
        x = rng.standard_normal((3, 16, 16)).astype(np.float32)
        maps = activation_maps(net, x, "conv1")
        assert len(maps) == 64
        assert all(m.shape == (16, 16) for m in maps)
        assert all(m.min() >= 0 for m in maps)  # post-ReLU
        maps3 = activation_maps(net, x, "conv3")
        assert len(maps3) == 6 and maps3[0].shape == infer_shapes(net)[2][1:]

    def test_zero_input_uniform(self):
        rng = np.random.default_rng(16)
        net = random_network(rng, (3, 8, 8), [("conv", 4, 3, 1, 0)])
        for m in activation_maps(net, np.zeros((3, 8, 8), np.float32), "conv1"):
            assert np.all(m == m.flat[0])

    def test_not_conv(self):
        net = random_network(np.random.default_rng(17))
        with pytest.raises(NetworkError):
            activation_maps(net, np.zeros((3, 16, 16), np.float32), "relu2")

    def test_pgm(self, tmp_path):
        grid = np.array([[0.0, 1.0], [2.0, 4.0]])
        pgm = to_pgm(grid)
        assert pgm.startswith(b"P5\n2 2\n255\n")
        assert list(pgm[-4:]) == [0, 64, 128, 255]
        assert list(to_pgm(np.ones((2, 3)))[-6:]) == [0] * 6
        paths = write_activation_maps([grid, grid], tmp_path)
        assert [p.name for p in paths] == ["map_000.pgm", "map_001.pgm"]
