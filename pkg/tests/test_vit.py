import pytest
import torch

from radfm.exceptions import ConfigError, DomainError, ShapeError
from radfm.vit import EncoderConfig, TokenSequence, VisionTransformer, build_encoder, drop_path


def test_token_grid_448():
    enc = build_encoder("tiny")
    out = enc(torch.randn(1, 3, 448, 448))
    assert out.grid == (32, 32)
    assert out.patch_tokens.shape == (1, 32 * 32, 64)
    assert out.class_token.shape == (1, 64)


def test_non_multiple_rejected(tiny_encoder):
    with pytest.raises(ShapeError):
        tiny_encoder(torch.randn(1, 3, 50, 56))


def test_token_sequence_roundtrip():
    x = torch.randn(2, 5, 3)
    seq = TokenSequence.from_tensor(x, (2, 2))
    assert torch.equal(seq.to_tensor(), x)
    with pytest.raises(ShapeError):
        TokenSequence(torch.zeros(1, 3), torch.zeros(1, 3, 3), (2, 2))


def test_intermediates_match_manual(tiny_encoder):
    enc = tiny_encoder.eval()
    x = torch.randn(2, 3, 56, 56)
    taps = enc.forward_with_intermediates(x, [2, 0])
    h = enc.patchify(x).to_tensor()
    manual = []
    for blk in enc.blocks:
        h = blk(h)
        manual.append(h)
    assert torch.equal(taps[0].to_tensor(), manual[2])
    assert torch.equal(taps[1].to_tensor(), manual[0])
    # last block output followed by the final norm is the regular forward
    assert torch.allclose(enc.norm(manual[-1]), enc(x).to_tensor(), atol=1e-6)
    with pytest.raises(DomainError):
        enc.forward_with_intermediates(x, [4])


def test_mask_token_replaces_patches(tiny_encoder):
    x = torch.randn(1, 3, 28, 28)
    masks = torch.tensor([[True, False, False, True]])
    a = tiny_encoder.patchify(x, masks).patch_tokens
    pos = tiny_encoder.interpolate_pos_embed((2, 2))[:, 1:]
    assert torch.allclose(a[0, 0], tiny_encoder.mask_token[0] + pos[0, 0])
    b = tiny_encoder.patchify(x).patch_tokens
    assert torch.equal(a[0, 1], b[0, 1])


def test_pos_embed_identity_at_native_grid():
    enc = VisionTransformer(EncoderConfig(depth=1, embed_dim=16, num_heads=2, img_size=56))
    assert enc.interpolate_pos_embed((4, 4)) is enc.pos_embed
    assert enc.interpolate_pos_embed((8, 6)).shape == (1, 49, 16)


def test_drop_path_rates_linear():
    enc = VisionTransformer(EncoderConfig(depth=5, embed_dim=16, num_heads=2, drop_path_rate=0.4))
    rates = [b.drop_path_rate for b in enc.blocks]
    assert rates == pytest.approx([0.0, 0.1, 0.2, 0.3, 0.4])


def test_drop_path_per_sample():
    torch.manual_seed(0)
    x = torch.ones(1000, 3, 2)
    y = drop_path(x, 0.25, training=True)
    per_sample = y.reshape(1000, -1)
    assert set(per_sample.unique().tolist()) <= {0.0, torch.tensor(1 / 0.75).item()}
    assert (per_sample == per_sample[:, :1]).all()
    assert abs((per_sample[:, 0] == 0).float().mean().item() - 0.25) < 0.05
    assert torch.equal(drop_path(x, 0.25, training=False), x)


def test_layer_scale_init():
    enc = build_encoder("small", depth=1)
    assert torch.all(enc.blocks[0].ls1.gamma == 1e-5)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=10, num_heads=3)
    with pytest.raises(ConfigError):
        build_encoder("huge")
