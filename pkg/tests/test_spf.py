import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spfnet.autodiff import Tape, Tensor, backward, concat
from spfnet.config import SpfConfig, paper_config
from spfnet.gradcheck import grad_check
from spfnet.nadam import NadamState, nadam_step
from spfnet.rng import PrngState
from spfnet.spf import (baseline_flatten, decode_map, encode_map, flat_length, init_autoencoder, init_spf,
                        predict_maps, reconstruction_loss, spf_encode, spf_flatten)

from conftest import randn


def features(seed, c, side, batch=None):
    shape = (c, side, side) if batch is None else (batch, c, side, side)
    return Tensor(randn(seed, *shape).astype(np.float32))


def spf(cfg, c, side, seed=0):
    return init_spf(cfg, c, side, PrngState(seed, "init"))


def test_predict_maps_splits_in_channel_order():
    f = features(1, 2, 4)
    maps = predict_maps(f)
    assert len(maps) == 2
    for i, m in enumerate(maps):
        assert m.shape == (1, 4, 4)
        np.testing.assert_array_equal(m.data[0], f.data[i])
    np.testing.assert_array_equal(concat(maps, 0).data, f.data)


def test_paper_preset_yields_128_maps_and_128_dim_codes():
    cfg = paper_config()
    c, h, w = cfg.backbone.output_shape()
    assert c == 128 and cfg.spf.code_dim == 128
    assert flat_length(c, cfg.spf.code_dim) == 16384


def test_encode_output_length():
    cfg = SpfConfig(code_dim=5, ae_channels=2)
    p = spf(cfg, 3, 16)
    code = encode_map(features(2, 1, 16), p, cfg.depth_for(16), "spf.")
    assert code.shape == (5,)


def test_encode_rejects_incompatible_map():
    cfg = SpfConfig(code_dim=4, ae_channels=2)
    p = spf(cfg, 1, 16)
    with pytest.raises(ValueError):
        encode_map(features(3, 1, 12), p, 2, "spf.")
    with pytest.raises(ValueError, match="built for"):
        encode_map(features(3, 1, 32), p, 2, "spf.")


def test_decode_shape_and_zero_code():
    cfg = SpfConfig(code_dim=4, ae_channels=3)
    p = spf(cfg, 1, 16)
    depth = cfg.depth_for(16)
    m = features(4, 1, 16)
    assert decode_map(encode_map(m, p, depth, "spf."), p, (16, 16), depth, "spf.").shape == m.shape
    zero = decode_map(Tensor(np.zeros(4, dtype=np.float32)), p, (16, 16), depth, "spf.")
    assert zero.shape == (1, 16, 16) and not zero.data.any()
    with pytest.raises(ValueError):
        decode_map(Tensor(np.zeros(4)), p, (8, 8), depth, "spf.")


def ae64(seed=0):
    p = init_autoencoder(8, 3, 2, 1, PrngState(seed, "init"))
    return {k: v.data.astype(np.float64) + 0.05 * randn(seed + i, *v.shape) for i, (k, v) in enumerate(p.items())}


def test_encode_gradient():
    w = randn(10, 2, 3)
    report = grad_check(lambda t: (encode_map(t["m"], t, 1) * w).sum(), {"m": randn(11, 2, 1, 8, 8), **ae64()})
    assert max(report.values()) < 1e-4, report


def test_decode_gradient():
    w = randn(12, 2, 1, 8, 8)
    report = grad_check(lambda t: (decode_map(t["c"], t, (8, 8), 1) * w).sum(), {"c": randn(13, 2, 3), **ae64(1)})
    assert max(report.values()) < 1e-4, report


def test_flatten_block_i_is_code_of_map_i():
    cfg = SpfConfig(code_dim=3, ae_channels=2)
    p = spf(cfg, 4, 8)
    maps = predict_maps(features(14, 4, 8))
    flat = spf_flatten(maps, p, cfg).data
    assert flat.shape == (12,)
    for i, m in enumerate(maps):
        np.testing.assert_allclose(flat[3 * i:3 * i + 3], encode_map(m, p, cfg.depth_for(8), "spf.").data, atol=1e-6)


def test_flatten_list_and_tensor_paths_agree():
    cfg = SpfConfig(code_dim=3, ae_channels=2)
    p = spf(cfg, 4, 8)
    f = features(15, 4, 8, batch=3)
    a, ra = spf_encode(f, p, cfg)
    b, rb = spf_encode(predict_maps(f), p, cfg)
    np.testing.assert_array_equal(a.data, b.data)
    assert ra.item() == rb.item()


def test_single_map_flatten_is_its_code():
    cfg = SpfConfig(code_dim=6, ae_channels=2)
    p = spf(cfg, 1, 8)
    m = features(16, 1, 8)
    np.testing.assert_array_equal(spf_flatten([m], p, cfg).data, encode_map(m, p, cfg.depth_for(8), "spf.").data)


def test_flatten_rejects_mixed_shapes():
    cfg = SpfConfig(code_dim=2, ae_channels=2)
    p = spf(cfg, 2, 8)
    with pytest.raises(ValueError, match="feature map 1"):
        spf_flatten([features(1, 1, 8), features(2, 1, 4)], p, cfg)


@pytest.mark.parametrize("c,d,expected", [(64, 32, 2048), (128, 128, 16384), (1, 7, 7)])
def test_length_law_examples(c, d, expected):
    assert flat_length(c, d) == expected


@settings(max_examples=20, deadline=None)
@given(c=st.integers(1, 5), d=st.integers(1, 9), side=st.sampled_from([4, 8, 16]), shared=st.booleans())
def test_length_law_property(c, d, side, shared):
    cfg = SpfConfig(code_dim=d, ae_channels=2, shared_weights=shared)
    p = spf(cfg, c, side)
    flat = spf_flatten(predict_maps(features(c * d, c, side, batch=2)), p, cfg)
    assert flat.shape == (2, c * d)


def test_per_channel_autoencoders_are_distinct():
    cfg = SpfConfig(code_dim=2, ae_channels=2, shared_weights=False)
    p = spf(cfg, 3, 8)
    assert "spf.ch2.enc.fc.w" in p and "spf.enc.fc.w" not in p
    m = features(17, 1, 8)
    out = spf_flatten([m, m, m], p, cfg).data
    assert not np.allclose(out[:2], out[2:4])


def test_permutation_equivariance_shared():
    cfg = SpfConfig(code_dim=16, ae_channels=8)
    c = 32
    p = spf(cfg, c, 16)
    maps = predict_maps(features(18, c, 16))
    base = spf_flatten(maps, p, cfg).data.reshape(c, 16)
    for k in range(50):
        perm = PrngState(3, "perm", k).permutation(c)
        permuted = spf_flatten([maps[j] for j in perm], p, cfg).data.reshape(c, 16)
        np.testing.assert_array_equal(permuted, base[perm])


def test_batch_position_does_not_change_codes():
    cfg = SpfConfig(code_dim=4, ae_channels=2)
    p = spf(cfg, 3, 8)
    f = features(25, 3, 8, batch=5)
    flat = spf_flatten(f, p, cfg).data
    for i in range(5):
        np.testing.assert_array_equal(flat[i], spf_flatten(Tensor(f.data[i]), p, cfg).data)


def test_reconstruction_loss_nonnegative_and_zero_for_identity():
    cfg = SpfConfig(code_dim=4, ae_channels=2)
    p = spf(cfg, 3, 8)
    assert reconstruction_loss(predict_maps(features(19, 3, 8)), p, cfg).item() >= 0
    # depth-0 autoencoder with identity dense layers reproduces each map exactly
    ident = SpfConfig(code_dim=16, encoder_depth=0, ae_channels=1)
    q = {"spf.enc.fc.w": Tensor(np.eye(16)), "spf.enc.fc.b": Tensor(np.zeros(16)),
         "spf.dec.fc.w": Tensor(np.eye(16)), "spf.dec.fc.b": Tensor(np.zeros(16))}
    assert reconstruction_loss(predict_maps(features(20, 3, 4)), q, ident).item() == 0.0


def test_reconstruction_loss_decreases_with_training():
    cfg = SpfConfig(code_dim=4, ae_channels=4)
    p = spf(cfg, 4, 8, seed=1)
    yy, xx = np.mgrid[0:8, 0:8]
    # blobs at random positions: low-dimensional structure the autoencoder can learn
    pos = PrngState(5, "pos").integers(1, 7, 2 * 8 * 4).reshape(8, 4, 2)
    maps = np.exp(-((yy - pos[..., :1, None]) ** 2 + (xx - pos[..., 1:, None]) ** 2) / 3.0).astype(np.float32)
    batch = Tensor(maps)
    state = NadamState.for_params(p, lr=3e-3)
    trace = []
    for _ in range(200):
        with Tape() as tape:
            loss = reconstruction_loss(batch, p, cfg)
        trace.append(loss.item())
        nadam_step(p, backward(tape, loss, p), state)
    smooth = np.convolve(trace, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < 0.5 * smooth[0]
    assert np.all(np.diff(smooth[::20]) < 0)


def test_baseline_constant_maps():
    a, b = 0.25, -1.5
    maps = [Tensor(np.full((1, 4, 4), a)), Tensor(np.full((1, 4, 4), b))]
    np.testing.assert_array_equal(baseline_flatten(maps, 4).data, [a] * 4 + [b] * 4)


def test_baseline_lengths_and_rejections():
    assert baseline_flatten(features(21, 32, 16), 16).shape == (512,)
    with pytest.raises(ValueError, match="perfect-square"):
        baseline_flatten(features(22, 2, 16), 128)
    # the 11x11 grid for d=121 does not divide the 64x64 maps of the full-size preset
    with pytest.raises(ValueError):
        baseline_flatten(features(23, 1, 64), 121)
    cfg = dataclasses.replace(paper_config(), flatten="baseline")
    with pytest.raises(ValueError):
        cfg.validate()


def test_global_average_baseline_is_translation_blind():
    pattern = np.zeros((1, 16, 16), dtype=np.float32)
    pattern[0, 2:6, 3:5] = 1.0
    pattern[0, 4, 7] = 2.0
    for dy, dx in [(0, 0), (5, 3), (9, -2), (-2, 8)]:
        moved = np.roll(pattern, (dy, dx), axis=(1, 2))
        assert baseline_flatten([Tensor(moved)], 1).data.tolist() == baseline_flatten([Tensor(pattern)], 1).data.tolist()


def test_spf_codes_see_translation():
    cfg = SpfConfig(code_dim=4, ae_channels=2)
    p = spf(cfg, 1, 16)
    pattern = np.zeros((1, 16, 16), dtype=np.float32)
    pattern[0, 2:6, 3:5] = 1.0
    moved = np.roll(pattern, (7, 6), axis=(1, 2))
    assert not np.allclose(spf_flatten([Tensor(pattern)], p, cfg).data, spf_flatten([Tensor(moved)], p, cfg).data)


def test_autoencoder_is_deterministic():
    cfg = SpfConfig(code_dim=4, ae_channels=2)
    p = spf(cfg, 2, 8)
    maps = predict_maps(features(24, 2, 8))
    a, ra = spf_encode(maps, p, cfg)
    b, rb = spf_encode(maps, p, cfg)
    np.testing.assert_array_equal(a.data, b.data)
    assert ra.item() == rb.item()
