"""Network spec validation, building, and forward contracts."""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from maskprune import GraphError, Network, NetworkSpec, ShapeError, Tensor, builtin_spec
from maskprune.masking import sparsity_loss
from maskprune.network import LayerSpec, without_masks


def tiny(h=32, w=64):
    return builtin_spec("tiny", (h, w))


class TestValidation:
    def base_layers(self):
        return [
            LayerSpec("c1", "conv", ("input",), out_channels=4),
            LayerSpec("c2", "masked_conv", ("c1",), out_channels=4, maskable=True),
            LayerSpec("d0l", "disparity_head", ("c2",), out_channels=1, scale=0, side="l"),
            LayerSpec("d0r", "disparity_head", ("c2",), out_channels=1, scale=0, side="r"),
        ]

    def make(self, layers, scales=1, hw=(8, 8)):
        return NetworkSpec(name="t", input_hw=hw, layers=layers, scales=scales)

    def test_valid_base(self):
        self.make(self.base_layers())

    def test_unknown_edge_named(self):
        layers = self.base_layers()
        layers[1] = LayerSpec("c2", "masked_conv", ("ghost",), out_channels=4, maskable=True)
        with pytest.raises(GraphError) as exc:
            self.make(layers)
        assert "ghost" in str(exc.value) and "c2" in str(exc.value)

    def test_duplicate_name(self):
        layers = self.base_layers()
        layers[1] = LayerSpec("c1", "masked_conv", ("c1",), out_channels=4, maskable=True)
        with pytest.raises(GraphError):
            self.make(layers)

    def test_head_never_maskable(self):
        layers = self.base_layers()
        layers[2] = LayerSpec("d0l", "disparity_head", ("c2",), out_channels=1,
                              scale=0, side="l", maskable=True)
        with pytest.raises(GraphError):
            self.make(layers)

    def test_first_conv_not_maskable(self):
        layers = [LayerSpec("c1", "masked_conv", ("input",), out_channels=4, maskable=True)]
        with pytest.raises(GraphError):
            self.make(layers + self.base_layers()[2:])

    def test_missing_head(self):
        with pytest.raises(GraphError):
            self.make(self.base_layers()[:3])

    def test_concat_level_mismatch(self):
        layers = [
            LayerSpec("c1", "conv", ("input",), out_channels=4),
            LayerSpec("dn", "downsample", ("c1",)),
            LayerSpec("cat", "skip_concat", ("c1", "dn")),
        ]
        with pytest.raises(GraphError):
            self.make(layers + self.base_layers()[2:])

    def test_indivisible_input_dims(self):
        with pytest.raises(ShapeError):
            builtin_spec("tiny", (30, 64))  # needs divisibility by 4

    def test_head_resolution_must_match_scale(self):
        layers = [
            LayerSpec("c1", "conv", ("input",), out_channels=4),
            LayerSpec("dn", "downsample", ("c1",)),
            LayerSpec("d0l", "disparity_head", ("dn",), out_channels=1, scale=0, side="l"),
            LayerSpec("d0r", "disparity_head", ("dn",), out_channels=1, scale=0, side="r"),
        ]
        with pytest.raises(GraphError):
            self.make(layers)

    def test_json_round_trip(self):
        spec = tiny()
        again = NetworkSpec.from_json(spec.to_json())
        assert again.to_json() == spec.to_json()
        assert [ls.name for ls in again.layers] == [ls.name for ls in spec.layers]


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        a = Network.build(tiny(), seed=123)
        b = Network.build(tiny(), seed=123)
        for (na, da, _), (nb, db, _) in zip(a.trainables(), b.trainables()):
            assert na == nb
            assert_array_equal(da, db)

    def test_different_seeds_differ(self):
        a = Network.build(tiny(), seed=1)
        b = Network.build(tiny(), seed=2)
        assert any(not np.array_equal(da, db)
                   for (_, da, _), (_, db, _) in zip(a.trainables(), b.trainables()))

    def test_fresh_network_keeps_everything(self):
        net = Network.build(tiny(), seed=0)
        value, _ = sparsity_loss(m for _, m in net.mask_registry())
        assert value == 1.0

    def test_negative_mask_init_rejected(self):
        with pytest.raises(GraphError):
            Network.build(tiny(), seed=0, mask_init=-0.5)

    def test_parameter_count_matches_manual_recount(self):
        net = Network.build(tiny(), seed=0)
        manual = sum(p.weights.size + p.bias.size for p in net._convs.values())
        assert net.parameter_count() == manual
        assert net.masked_parameter_count() == manual  # fresh: nothing pruned

    def test_default_spec_sizes(self):
        net = Network.build(builtin_spec("default", (64, 128)), seed=0)
        assert net.parameter_count() == 440792
        assert sum(len(m) for _, m in net.mask_registry()) == 560


class TestForward:
    def test_output_shapes_per_scale(self):
        net = Network.build(tiny(), seed=3)
        outs = net.forward(Tensor(np.random.default_rng(0).random((2, 3, 32, 64),
                                                                  dtype=np.float32)))
        assert len(outs) == 3
        for s, d in enumerate(outs):
            assert d.d_l.shape == (2, 1, 32 >> s, 64 >> s)
            assert d.d_r.shape == (2, 1, 32 >> s, 64 >> s)

    def test_all_zero_weights_give_half_cap(self):
        spec = tiny()
        net = Network(spec)  # zero-initialized weights and biases
        for layer in net._masked.values():
            layer.mask.values[...] = 1.0
        outs = net.forward(Tensor(np.random.default_rng(1).random((1, 3, 32, 64),
                                                                  dtype=np.float32)))
        for d in outs:
            assert_array_equal(d.d_l.data, np.full_like(d.d_l.data, spec.d_max / 2))

    def test_forward_deterministic(self):
        net = Network.build(tiny(), seed=4)
        x = Tensor(np.random.default_rng(2).random((1, 3, 32, 64), dtype=np.float32))
        assert_array_equal(net.forward(x)[0].d_l.data, net.forward(x)[0].d_l.data)

    def test_input_contract_checked(self):
        net = Network.build(tiny(), seed=5)
        with pytest.raises(ShapeError):
            net.forward(Tensor(np.zeros((1, 3, 16, 64), np.float32)))
        with pytest.raises(ShapeError):
            net.forward(Tensor(np.zeros((1, 1, 32, 64), np.float32)))

    def test_disparities_bounded(self):
        net = Network.build(tiny(), seed=6)
        outs = net.forward(Tensor(np.random.default_rng(3).random((1, 3, 32, 64),
                                                                  dtype=np.float32)))
        for d in outs:
            assert d.d_l.data.min() >= 0.0
            assert d.d_l.data.max() <= net.spec.d_max


class TestMaskedCounting:
    def test_masked_count_drops_with_dead_filters(self):
        net = Network.build(tiny(), seed=7)
        before = net.masked_parameter_count()
        net.masked_layer("enc3").mask.values[:8] = -5.0
        after = net.masked_parameter_count()
        assert after < before
        # enc3 loses 8 filters of 16x3x3 weights + bias; its consumers lose
        # the matching input slices: enc4 directly, dec1 through the concat
        expected_drop = 8 * (16 * 9 + 1) + 32 * 8 * 9 + 16 * 8 * 9
        assert before - after == expected_drop

    def test_without_masks_strips_everything(self):
        spec = without_masks(tiny())
        net = Network.build(spec, seed=8)
        assert net.mask_registry() == []
        assert net.parameter_count() == Network.build(tiny(), seed=8).parameter_count()
