import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from helpers import GOLDEN, max_relative_fd_error, read_layout_table
from vesselgan.exceptions import ConfigurationError, ShapeError
from vesselgan.nets import (
    Discriminator,
    Generator,
    LayerSpec,
    NetworkSpec,
    WeightNormConv2d,
    WeightNormLinear,
    build_discriminator,
    build_generator,
    class_probabilities,
    forward,
    pool,
    sample_z,
)

OP_FROM_TABLE = {"conv": "conv", "conv+dropout": "conv", "conv+softmax": "conv", "pool": "pool", "upsample": "upsample"}


def _op(table_op):
    return "concat" if table_op.startswith("concat") else OP_FROM_TABLE[table_op]


class TestTableConformance:
    def test_layer_walk_matches_table(self):
        spec = build_discriminator()
        table = read_layout_table()
        assert list(spec.names) == [r["name"] for r in table]
        for row in table:
            layer = spec.layer(row["name"])
            assert layer.op_kind == _op(row["op"]), row["name"]
            assert layer.in_resolution == row["res"], row["name"]
            assert layer.in_channels == row["in"], row["name"]
            assert layer.out_channels == row["out"], row["name"]
            assert (layer.kernel if layer.op_kind in ("conv", "pool") else None) == row["kernel"], row["name"]
            assert (layer.dropout_keep == 0.8) == row["op"].endswith("dropout"), row["name"]

    def test_concat_producers(self):
        spec = build_discriminator()
        assert spec.layer("Con1").inputs == ("U1", "C4")
        assert spec.layer("Con2").inputs == ("U2", "C2")
        assert spec.layer("C10").activation == "softmax"

    def test_manifest_golden(self):
        # regression guard on the serialized layer table
        assert build_discriminator().to_manifest() == (GOLDEN / "discriminator_manifest.txt").read_text()

    def test_live_shapes(self):
        net = Discriminator(build_discriminator())
        table = {r["name"]: r for r in read_layout_table()}
        _, acts = forward(net, torch.zeros(2, 48, 48), capture=list(table))
        assert tuple(acts["C5"].shape) == (2, 12, 12, 64)
        for name, row in table.items():
            layer = net.spec.layer(name)
            assert tuple(acts[name].shape) == (2, layer.out_resolution, layer.out_resolution, row["out"])

    def test_bad_chain_names_layer(self):
        spec = build_discriminator()
        layers = list(spec.layers)
        i = spec.names.index("C7")
        layers[i] = LayerSpec("C7", "conv", (3, 3), 65, 64, 24, 24, "leaky_relu", None, "weight", ("C6",))
        with pytest.raises(ShapeError, match="C7"):
            NetworkSpec(spec.name, 48, 1, tuple(layers), spec.attrs).validate()

    @pytest.mark.parametrize("kwargs", [{"pooling": "median"}, {"norm": "layer"}, {"head": "dense"}, {"dropout_keep": 0.0}, {"dropout_keep": 1.5}])
    def test_bad_modes(self, kwargs):
        with pytest.raises(ConfigurationError):
            build_discriminator(**kwargs)

    def test_center_pixel_head(self):
        net = Discriminator(build_discriminator(head="center_pixel"))
        logits, _ = forward(net, torch.zeros(3, 48, 48))
        assert tuple(logits.shape) == (3, 2)


class TestForward:
    def test_con1_capture_batch64(self):
        net = Discriminator(build_discriminator())
        _, acts = forward(net, torch.randn(64, 48, 48), capture={"Con1"})
        assert tuple(acts["Con1"].shape) == (64, 24, 24, 128)

    def test_deterministic_in_eval(self):
        net = Discriminator(build_discriminator())
        x = torch.randn(4, 48, 48)
        a, _ = forward(net, x, stochastic=False)
        b, _ = forward(net, x, stochastic=False)
        assert torch.equal(a, b)

    def test_stochastic_uses_dropout(self):
        torch.manual_seed(0)
        net = Discriminator(build_discriminator())
        x = torch.randn(2, 48, 48)
        a, _ = forward(net, x, stochastic=True)
        b, _ = forward(net, x, stochastic=True)
        assert not torch.equal(a, b)

    def test_zero_patch_softmax_sums_to_one(self):
        net = Discriminator(build_discriminator())
        logits, _ = forward(net, torch.zeros(1, 48, 48))
        assert tuple(logits.shape) == (1, 2, 48, 48)
        torch.testing.assert_close(class_probabilities(logits).sum(1), torch.ones(1, 48, 48), atol=1e-5, rtol=0)

    @pytest.mark.parametrize("pooling,norm", [("max", "none"), ("average", "instance"), ("average", "batch")])
    def test_softmax_sums_random_inputs(self, pooling, norm):
        net = Discriminator(build_discriminator(pooling=pooling, norm=norm))
        logits, _ = forward(net, torch.rand(3, 48, 48) * 2 - 1)
        assert (class_probabilities(logits).sum(1) - 1).abs().max() <= 1e-5

    def test_unknown_capture(self):
        net = Discriminator(build_discriminator())
        with pytest.raises(ConfigurationError):
            forward(net, torch.zeros(1, 48, 48), capture=["C11"])

    def test_wrong_resolution(self):
        net = Discriminator(build_discriminator())
        with pytest.raises(ShapeError):
            forward(net, torch.zeros(1, 32, 32))


class TestGenerator:
    def test_resolutions(self):
        spec = build_generator()
        assert [l.out_resolution for l in spec.layers] == [6, 12, 24, 48]
        assert spec.layers[-1].activation == "tanh" and spec.layers[-1].out_channels == 1

    def test_output_shape_and_range(self):
        g = Generator(build_generator())
        out = g(torch.randn(16, 100) * 50)
        assert tuple(out.shape) == (16, 1, 48, 48)
        assert out.min() >= -1 and out.max() <= 1

    def test_z_uniform(self):
        z = sample_z(20000, generator=torch.Generator().manual_seed(0))
        assert z.shape == (20000, 100) and z.min() >= -1 and z.max() <= 1
        assert abs(z.mean().item()) < 0.01 and abs(z.var().item() - 1 / 3) < 0.01

    @pytest.mark.parametrize("size", [50, 12])
    def test_out_size_not_divisible(self, size):
        with pytest.raises(ShapeError):
            build_generator(out_size=size)

    def test_other_size(self):
        assert Generator(build_generator(out_size=32))(sample_z(2)).shape[-1] == 32


class TestWeightNorm:
    def test_row_norm_equals_abs_g(self):
        m = WeightNormConv2d(3, 5, 3)
        with torch.no_grad():
            m.g.copy_(torch.tensor([0.5, -2.0, 1.0, 3.0, 0.1]))
            m.v.mul_(torch.rand(5, 1, 1, 1) * 10)
        torch.testing.assert_close(m.weight.flatten(1).norm(dim=1), m.g.abs(), atol=1e-6, rtol=1e-6)

    def test_row_norm_after_update(self):
        m = WeightNormLinear(6, 4)
        opt = torch.optim.Adam(m.parameters(), lr=0.1)
        for _ in range(3):
            opt.zero_grad()
            m(torch.randn(8, 6)).pow(2).sum().backward()
            opt.step()
        torch.testing.assert_close(m.weight.norm(dim=1), m.g.abs(), atol=1e-6, rtol=1e-6)

    def test_scale_invariance(self):
        net = Discriminator(build_discriminator(norm="weight"))
        x = torch.randn(2, 48, 48)
        before, _ = forward(net, x)
        with torch.no_grad():
            for module in net.modules():
                if isinstance(module, (WeightNormConv2d, WeightNormLinear)):
                    module.v.mul_(7.5)
        after, _ = forward(net, x)
        torch.testing.assert_close(before, after, atol=1e-5, rtol=1e-5)

    def test_initial_weight_matches_plain_conv_init(self):
        m = WeightNormConv2d(2, 3, 3)
        torch.testing.assert_close(m.weight, m.v)


class TestPool:
    def test_examples(self):
        assert pool([[1, 2], [3, 4]], "max") == 4
        assert pool([[1, 2], [3, 4]], "average") == 2.5

    def test_window_mismatch(self):
        with pytest.raises(ShapeError):
            pool(np.zeros((3, 3)), "max")

    def test_gradient_density(self):
        x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=torch.float64, requires_grad=True)
        nn.AvgPool2d(2)(x).sum().backward()
        torch.testing.assert_close(x.grad, torch.full_like(x, 0.25))
        x.grad = None
        nn.MaxPool2d(2)(x).sum().backward()
        torch.testing.assert_close(x.grad, torch.tensor([[[[0.0, 0.0], [0.0, 1.0]]]], dtype=torch.float64))

    @pytest.mark.parametrize("kind", ["max", "average"])
    def test_window_value_matches_module(self, kind, rng):
        x = rng.standard_normal((4, 4))
        layer = nn.MaxPool2d(2) if kind == "max" else nn.AvgPool2d(2)
        out = layer(torch.as_tensor(x)[None, None])[0, 0].numpy()
        for i in range(2):
            for j in range(2):
                assert out[i, j] == pytest.approx(pool(x[2 * i:2 * i + 2, 2 * j:2 * j + 2], kind), abs=1e-12)


def _miniatures():
    """Two-layer float64 miniatures, one per op kind, with their trainable leaves."""
    torch.manual_seed(0)
    conv = nn.Sequential(WeightNormConv2d(1, 2, 3, padding=1), nn.LeakyReLU(0.2), nn.Conv2d(2, 1, 3, padding=1)).double()
    lin = nn.Sequential(WeightNormLinear(4, 3), nn.LeakyReLU(0.2), nn.Linear(3, 2)).double()
    tconv = nn.Sequential(nn.ConvTranspose2d(1, 2, 4, 2, 1), nn.ReLU(), nn.ConvTranspose2d(2, 1, 4, 2, 1), nn.Tanh()).double()
    minis = {
        "conv": (conv, (1, 1, 5, 5)),
        "pool_max": (nn.Sequential(nn.Conv2d(1, 1, 1), nn.MaxPool2d(2)).double(), (1, 1, 4, 4)),
        "pool_average": (nn.Sequential(nn.Conv2d(1, 1, 1), nn.AvgPool2d(2)).double(), (1, 1, 4, 4)),
        "upsample_nearest": (nn.Sequential(nn.Conv2d(1, 1, 1), nn.Upsample(scale_factor=2)).double(), (1, 1, 3, 3)),
        "upsample_bilinear": (nn.Sequential(nn.Conv2d(1, 1, 1), nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)).double(), (1, 1, 3, 3)),
        "transposed_conv": (tconv, (1, 1, 2, 2)),
        "linear": (lin, (2, 4)),
    }
    return minis


class _Concat(nn.Module):
    def __init__(self):
        super().__init__()
        self.a = nn.Conv2d(1, 2, 1).double()
        self.b = nn.Conv2d(3, 1, 3, padding=1).double()

    def forward(self, x):
        return self.b(torch.cat([self.a(x), x], dim=1))


@pytest.mark.parametrize("name", list(_miniatures()) + ["concat"])
def test_op_gradients_match_finite_differences(name):
    if name == "concat":
        torch.manual_seed(0)
        net, shape = _Concat(), (1, 1, 3, 3)
    else:
        net, shape = _miniatures()[name]
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(shape, dtype=torch.float64, generator=gen, requires_grad=True)
    with torch.no_grad():
        probe = torch.randn(net(x).shape, dtype=torch.float64, generator=gen)
    leaves = [x] + list(net.parameters())
    err = max_relative_fd_error(lambda: (net(x) * probe).sum(), leaves)
    assert err <= 1e-5, f"{name}: {err:.2e}"


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_generator_range_random_z(seed):
    torch.manual_seed(seed)
    g = Generator(build_generator())
    out = g(sample_z(4, generator=torch.Generator().manual_seed(seed)))
    assert out.min() >= -1 and out.max() <= 1
