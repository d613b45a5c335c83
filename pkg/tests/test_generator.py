import pytest
import torch
from torch import nn

from progressive3d.generator import DecoderBlock, Generator, GeneratorConfig
from progressive3d.mesh import build_icosphere


def _conv_params(model):
    return sum(p.numel() for m in model.modules() if isinstance(m, nn.Conv2d) for p in m.parameters())


@pytest.fixture(scope="module")
def toy():
    torch.manual_seed(0)
    return Generator(GeneratorConfig.toy(), build_icosphere(2))


def test_paper_config_shapes():
    torch.manual_seed(0)
    g = Generator(GeneratorConfig.paper(), build_icosphere(2))
    x = torch.rand(1, 3, 512, 512)
    with torch.no_grad():
        b = g.encode(x)
        assert tuple(b.shape) == (1, 128, 4, 4)
        assert tuple(g.fc(b.flatten(1)).view(1, -1, 8, 4).shape) == (1, 512, 8, 4)
        pred = g.decode(b, torch.zeros(1, 64))
    assert tuple(pred.texture.shape) == (1, 3, 512, 512)
    assert pred.deformation.shape[:2] == (1, 3)


def test_five_block_encoder_reaches_4x4():
    cfg = GeneratorConfig(image_size=128, channel_scale="1/4")
    g = Generator(cfg, build_icosphere(1))
    assert g.encode(torch.rand(2, 3, 128, 128)).shape[-2:] == (4, 4)


def test_wrong_input_size_rejected(toy):
    with pytest.raises(ValueError):
        toy.encode(torch.rand(1, 3, 32, 32))
    with pytest.raises(ValueError):
        toy.decode(toy.encode(torch.rand(1, 3, 64, 64)), torch.zeros(2, 8))


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(image_size=100)
    with pytest.raises(ValueError):
        GeneratorConfig(encoder_channels=())
    with pytest.raises(ValueError):
        GeneratorConfig(texture_size=128)
    cfg = GeneratorConfig.toy()
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg


def test_bit_identical_with_fixed_seed():
    x = torch.rand(2, 3, 64, 64)
    z = torch.randn(2, 8)
    outs = []
    for _ in range(2):
        torch.manual_seed(123)
        g = Generator(GeneratorConfig.toy(), build_icosphere(2))
        with torch.no_grad():
            p = g(x, z)
        outs.append((g.encode(x), p.texture, p.deformation))
    for a, b in zip(*outs):
        assert torch.equal(a, b)


def test_texture_range_and_deformation_shapes(toy):
    with torch.no_grad():
        p = toy(torch.rand(3, 3, 64, 64), torch.randn(3, 8) * 5)
    assert float(p.texture.min()) >= 0.0 and float(p.texture.max()) <= 1.0
    assert tuple(p.texture.shape) == (3, 3, 64, 64)
    assert tuple(p.deformation.shape) == (3, 3, 32, 32)
    assert tuple(p.mesh.batched().shape) == (3, 162, 3)


def test_deformation_starts_near_sphere(toy):
    p = toy(torch.rand(2, 3, 64, 64))
    # within a few percent of the unit radius
    assert float(p.deformation.detach().abs().max()) < 0.1


def test_symmetric_tensor_before_post_symmetry_block(toy):
    seen = {}
    h = toy.post_symmetry.register_forward_hook(lambda m, inp, out: seen.setdefault("x", inp[0]))
    try:
        toy(torch.rand(2, 3, 64, 64), torch.randn(2, 8))
    finally:
        h.remove()
    x = seen["x"]
    assert torch.equal(x, torch.flip(x, dims=[-1]))


def test_latent_changes_texture(toy):
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        a = toy(x, torch.randn(1, 8))
        b = toy(x, torch.randn(1, 8))
    assert float((a.texture - b.texture).abs().mean()) > 0


def test_gradient_reaches_input_layer(toy):
    toy.zero_grad()
    p = toy(torch.rand(2, 3, 64, 64), torch.randn(2, 8))
    (p.texture.mean() + p.mesh.batched().pow(2).mean()).backward()
    assert float(toy.encoder[0].weight.grad.abs().sum()) > 0
    assert float(toy.mesh_head.weight.grad.abs().sum()) > 0


def test_channel_scale_quarter_reduces_conv_params():
    full = Generator(GeneratorConfig(channel_scale="1"), build_icosphere(1))
    quarter = Generator(GeneratorConfig(channel_scale="1/4"), build_icosphere(1))
    ratio = _conv_params(full) / _conv_params(quarter)
    assert 13 < ratio < 17


def test_decoder_block_residual_shape():
    style = torch.randn(2, 16)
    for cin, cout in ((8, 8), (8, 4)):
        blk = DecoderBlock(cin, cout, 16, upsample=False)
        x = torch.randn(2, cin, 6, 5)
        out = blk(x, style)
        assert out.shape == (2, cout, 6, 5)
        assert blk.skip(x).shape == out.shape


def test_nonfinite_output_raises(toy):
    bad = Generator(GeneratorConfig.toy(), build_icosphere(1))
    with torch.no_grad():
        bad.texture_head.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError):
        bad(torch.rand(1, 3, 64, 64))
