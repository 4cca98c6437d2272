import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from radfm.data import normalize, synth_squares
from radfm.dense import (
    TARGET_PARAM_COUNTS, PRESETS, AlignFuse, ConvPyramid, Decoder, DenseSegmenter,
    adapter_parameter_count, build_dense_net, calibrate_fusion_width, map_to_tokens,
    segmentation_loss, tokens_to_map, upsample2x,
)
from radfm.exceptions import ConfigError, ShapeError
from radfm.vit import TokenSequence, build_encoder

from conftest import finite_difference, rel_err


def closed_form_count(D, c, d, n_classes):
    pyramid = (27 * c + 2 * c) + (9 * c * c + 2 * c) + (18 * c * c + 4 * c) \
        + (72 * c * c + 8 * c) + (144 * c * c + 8 * c)
    fuse = 3 * (D * d + d) + (2 * c + 4 * c + 4 * c) * d
    decoder = 2 * (18 * d * d + 2 * d + 9 * d * d + 2 * d) + d * n_classes + n_classes
    return pyramid + fuse + decoder


def test_pyramid_geometry():
    p = ConvPyramid(8)
    c8, c16, c32 = p(torch.randn(1, 3, 448, 448))
    assert c8.shape[-2:] == (56, 56) and c16.shape[-2:] == (28, 28) and c32.shape[-2:] == (14, 14)
    c8, c16, c32 = p(torch.randn(1, 3, 96, 96))
    assert [t.shape[-1] for t in (c8, c16, c32)] == [12, 6, 3]
    with pytest.raises(ShapeError):
        p(torch.randn(1, 3, 100, 96))


def test_pyramid_zero_image_zero_activations():
    p = ConvPyramid(8)
    for m in p.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            torch.nn.init.zeros_(m.bias)
    assert all(torch.equal(t, torch.zeros_like(t)) for t in p(torch.zeros(2, 3, 64, 64)))


def test_tokens_to_map_example_and_roundtrip():
    seq = TokenSequence(torch.zeros(1, 1), torch.tensor([[[1.0], [2.0], [3.0], [4.0]]]), (2, 2))
    assert tokens_to_map(seq).tolist() == [[[[1.0, 2.0], [3.0, 4.0]]]]
    x = torch.randn(3, 12, 5)
    seq = TokenSequence(torch.zeros(3, 5), x, (3, 4))
    assert torch.equal(map_to_tokens(tokens_to_map(seq)), x)
    bad = TokenSequence(torch.zeros(1, 1), torch.zeros(1, 4, 1), (2, 2))
    bad.grid = (3, 2)
    with pytest.raises(ShapeError):
        tokens_to_map(bad)


@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.integers(1, 4))
@settings(max_examples=50, deadline=None)
def test_tokens_to_map_bijection(b, gh, gw, d):
    x = torch.randn(b, gh * gw, d)
    fmap = tokens_to_map(TokenSequence(torch.zeros(b, d), x, (gh, gw)))
    assert fmap.shape == (b, d, gh, gw)
    assert torch.equal(map_to_tokens(fmap), x)
    assert torch.equal(fmap[:, :, -1, 0], x[:, (gh - 1) * gw])


def test_token_map_448(tiny_encoder):
    maps = build_dense_net(tiny_encoder, 2, "tiny").token_maps(torch.randn(1, 3, 448, 448))
    assert all(m.shape == (1, 64, 32, 32) for m in maps)


def test_align_fuse_examples():
    fuse = AlignFuse(4, 6, 5)
    v = torch.randn(1, 4, 32, 32)
    prior = torch.zeros(1, 6, 56, 56)
    out = fuse(v, prior)
    assert out.shape == (1, 5, 56, 56)
    proj = torch.nn.functional.interpolate(fuse.token_proj(v), size=(56, 56), mode="bilinear",
                                           align_corners=False)
    assert torch.equal(out, proj)
    const = torch.full((1, 4, 4, 4), 0.7)
    up = torch.nn.functional.interpolate(const, size=(7, 7), mode="bilinear", align_corners=False)
    assert torch.allclose(up, const[..., :1, :1].expand_as(up), atol=1e-7)


def test_unknown_stride(tiny_encoder):
    net = build_dense_net(tiny_encoder, 2, "tiny")
    with pytest.raises(ConfigError):
        net.align_fuse(torch.zeros(1, 64, 2, 2), torch.zeros(1, 32, 4, 4), 4)


def test_upsample_preserves_constants():
    for value in (0.0, 1.0, -3.25, 0.1, 1e6):
        x = torch.full((1, 2, 5, 3), value)
        assert torch.equal(upsample2x(x), torch.full((1, 2, 10, 6), value))


def test_decoder_shapes_and_width_check():
    dec = Decoder(8, 3)
    f8, f16, f32 = torch.randn(2, 8, 12, 12), torch.randn(2, 8, 6, 6), torch.randn(2, 8, 3, 3)
    assert dec(f8, f16, f32).shape == (2, 3, 12, 12)
    assert dec.up16.convs[0][0].in_channels == 16
    with pytest.raises(ShapeError):
        dec(f8, f16, torch.randn(2, 4, 3, 3))


def test_geometry_448(tiny_encoder):
    net = build_dense_net(tiny_encoder, 3, "tiny").eval()
    logits = net(torch.randn(1, 3, 448, 448))
    assert logits.shape == (1, 3, 56, 56)


@pytest.mark.parametrize("size", [64, 96, 128, 224])
def test_logits_are_eighth_resolution(tiny_encoder, size):
    net = build_dense_net(tiny_encoder, 2, "tiny").eval()
    assert net(torch.randn(1, 3, size, size)).shape[-2:] == (size // 8, size // 8)


def test_parameter_counts_match_closed_form():
    for preset, D in (("small", 384), ("base", 768)):
        cfg = PRESETS[preset]
        count = adapter_parameter_count(preset)
        assert count == closed_form_count(D, cfg.pyramid_width, cfg.fusion_width, 2)
        assert abs(count - TARGET_PARAM_COUNTS[preset]) / TARGET_PARAM_COUNTS[preset] < 0.01


def test_calibration_reproduces_presets():
    for preset, target in TARGET_PARAM_COUNTS.items():
        assert calibrate_fusion_width(preset, target) == PRESETS[preset].fusion_width


def test_frozen_encoder_and_gradcheck():
    torch.manual_seed(0)
    enc = build_encoder("tiny")
    net = build_dense_net(enc, 2, "tiny", fusion_width=4, pyramid_width=2).double().train()
    x = torch.randn(2, 3, 32, 32, dtype=torch.float64)
    masks = (torch.rand(2, 32, 32) > 0.5).long()
    maps = net.token_maps(x)
    loss = segmentation_loss(net(x, maps), masks)
    loss.backward()
    assert all(p.grad is None for p in net.encoder.parameters())
    checked = 0
    g = torch.Generator().manual_seed(0)
    for name, p in net.named_parameters():
        if not p.requires_grad:
            continue
        idx, fd = finite_difference(lambda: segmentation_loss(net(x, maps), masks), p,
                                    n_coords=4, generator=g)
        assert rel_err(p.grad.reshape(-1)[idx], fd) < 1e-3, name
        checked += 1
    assert checked > 20


def test_n_classes_three(tiny_encoder):
    net = build_dense_net(tiny_encoder, 3, "tiny")
    assert net(torch.randn(1, 3, 64, 64)).shape[1] == 3


def _squares(n=48, seed=0):
    d = synth_squares(n, seed=seed).split((2 / 3, 1 / 3))
    X, stats = normalize(d["train"][0])
    Xv, _ = normalize(d["val"][0], stats)
    return X, d["train"][1], Xv, d["val"][1]


def test_segmenter_freeze_and_api():
    X, m, Xv, mv = _squares()
    enc = build_encoder("tiny")
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    est = DenseSegmenter(encoder=enc, preset="tiny", epochs=2, lr=1e-3, image_size=64)
    est.fit(X, m, eval_set=(Xv, mv))
    state = est.encoder_state()
    assert all(torch.equal(state["encoder." + k], v) for k, v in before.items())
    pred = est.predict(Xv)
    assert pred.shape == (len(Xv), 64, 64) and set(np.unique(pred)) <= {0, 1}
    assert 0.0 <= est.score(Xv, mv) <= 1.0
    assert {r["split"] for r in est.history_} == {"train", "val"}
    assert est.decision_function(Xv[:1]).shape == (1, 2, 8, 8)


def test_segmenter_mask_mismatch():
    X, m, _, _ = _squares(12)
    with pytest.raises(Exception) as info:
        DenseSegmenter(encoder="tiny", epochs=1, image_size=64).fit(X, m[:, :32, :32])
    assert type(info.value).__name__ == "DataError"
