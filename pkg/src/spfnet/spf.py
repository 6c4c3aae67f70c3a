"""Spatially-preserving flattening.

Each feature map is compressed by a small convolutional autoencoder and
the per-map codes are concatenated in ascending channel order, so block
``i`` of the flat vector always describes map ``i``.  The encoder is
``depth`` stride-2 3x3 convolutions with relu followed by a dense layer to
``code_dim``; the decoder mirrors it with a dense layer, then ``depth``
rounds of nearest 2x upsampling and 3x3 convolution.

``baseline_flatten`` is the conventional alternative used in ablations:
average-pool every map to a ``sqrt(d) x sqrt(d)`` grid and ravel, which gives
a vector of the same length as the SPF one.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

from . import ops
from .autodiff import Tensor, concat, reshape, split
from .config import SpfConfig
from .init import conv_params, dense_params
from .rng import PrngState


def init_autoencoder(map_size: int, code_dim: int, channels: int, depth: int, rng: PrngState,
                     prefix: str = "") -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    c_in = 1
    for i in range(depth):
        params.update(conv_params(rng, f"{prefix}enc.conv{i}", channels, c_in, 3))
        c_in = channels
    side = map_size // 2**depth
    hidden = c_in * side * side
    params.update(dense_params(rng, f"{prefix}enc.fc", code_dim, hidden))
    params.update(dense_params(rng, f"{prefix}dec.fc", hidden, code_dim))
    for i in range(depth):
        c_out = 1 if i == depth - 1 else channels
        params.update(conv_params(rng, f"{prefix}dec.conv{i}", c_out, channels, 3))
    return params


def init_spf(cfg: SpfConfig, num_maps: int, map_size: int, rng: PrngState) -> dict[str, Tensor]:
    depth = cfg.depth_for(map_size)
    if cfg.shared_weights:
        return init_autoencoder(map_size, cfg.code_dim, cfg.ae_channels, depth, rng, "spf.")
    params = {}
    for c in range(num_maps):
        params.update(init_autoencoder(map_size, cfg.code_dim, cfg.ae_channels, depth, rng, f"spf.ch{c}."))
    return params


def predict_maps(features: Tensor) -> list[Tensor]:
    """Split ``[C,H,W]`` (or ``[N,C,H,W]``) into C single-channel maps, channel order ascending."""
    return split(features, axis=features.data.ndim - 3)


def _encoder_input_side(params: Mapping[str, Tensor], prefix: str, depth: int) -> int:
    hidden = params[f"{prefix}enc.fc.w"].shape[1]
    channels = params[f"{prefix}enc.conv{depth - 1}.w"].shape[0] if depth else 1
    side = math.isqrt(hidden // channels)
    return side * 2**depth


def encode_map(m: Tensor, params: Mapping[str, Tensor], depth: int, prefix: str = "") -> Tensor:
    """``[1,H,W] -> [code_dim]`` or batched ``[M,1,H,W] -> [M,code_dim]``."""
    h, w = m.shape[-2:]
    if m.shape[-3] != 1 or h % 2**depth or w % 2**depth or h != w:
        raise ValueError(f"map of shape {m.shape} incompatible with encoder depth {depth}")
    expected = _encoder_input_side(params, prefix, depth)
    if h != expected:
        raise ValueError(f"encoder was built for {expected}x{expected} maps, got {h}x{w}")
    x = m
    for i in range(depth):
        x = ops.relu(ops.conv2d(x, params[f"{prefix}enc.conv{i}.w"], params[f"{prefix}enc.conv{i}.b"],
                                stride=2, padding="same"))
    batched = m.data.ndim == 4
    x = reshape(x, (m.shape[0], -1) if batched else (-1,))
    return ops.dense(x, params[f"{prefix}enc.fc.w"], params[f"{prefix}enc.fc.b"])


def decode_map(code: Tensor, params: Mapping[str, Tensor], target: tuple[int, int], depth: int,
               prefix: str = "") -> Tensor:
    """Inverse of :func:`encode_map`; output has exactly the ``target`` map shape."""
    expected = _encoder_input_side(params, prefix, depth)
    if tuple(target) != (expected, expected):
        raise ValueError(f"decoder reconstructs {expected}x{expected} maps, target {tuple(target)} requested")
    side = expected // 2**depth
    channels = params[f"{prefix}dec.fc.w"].shape[0] // (side * side)
    x = ops.dense(code, params[f"{prefix}dec.fc.w"], params[f"{prefix}dec.fc.b"])
    batched = code.data.ndim == 2
    x = reshape(x, ((code.shape[0],) if batched else ()) + (channels, side, side))
    if depth:
        x = ops.relu(x)
    for i in range(depth):
        x = ops.upsample_nearest(x, 2)
        x = ops.conv2d(x, params[f"{prefix}dec.conv{i}.w"], params[f"{prefix}dec.conv{i}.b"], padding="same")
        if i < depth - 1:
            x = ops.relu(x)
    return x


def _stack(maps: Sequence[Tensor] | Tensor) -> Tensor:
    if isinstance(maps, Tensor):
        return maps
    if not maps:
        raise ValueError("no feature maps to flatten")
    shape = maps[0].shape
    for i, m in enumerate(maps):
        if m.shape != shape:
            raise ValueError(f"feature map {i} has shape {m.shape}, expected {shape}")
    return concat(maps, axis=maps[0].data.ndim - 3)


def spf_encode(maps: Sequence[Tensor] | Tensor, params: Mapping[str, Tensor], cfg: SpfConfig,
               reconstruct: bool = True) -> tuple[Tensor, Tensor | None]:
    """Flattened codes and (optionally) the reconstruction loss, sharing one encoder pass.

    ``maps`` is the list from :func:`predict_maps` or, equivalently, the
    stacked feature tensor itself (which skips the split/restack copies).
    """
    stacked = _stack(maps)
    batched = stacked.data.ndim == 4
    n = stacked.shape[0] if batched else 1
    c, h, w = stacked.shape[-3:]
    depth = cfg.depth_for(h)
    if cfg.shared_weights:
        flat_maps = reshape(stacked, (n * c, 1, h, w))
        codes = encode_map(flat_maps, params, depth, "spf.")
        flat = reshape(codes, (n, c * cfg.code_dim) if batched else (c * cfg.code_dim,))
        recon = None
        if reconstruct:
            recon = ops.mse(decode_map(codes, params, (h, w), depth, "spf."), flat_maps)
        return flat, recon

    if isinstance(maps, Tensor):
        maps = predict_maps(maps)
    blocks, losses = [], []
    for i, m in enumerate(maps):
        mb = m if batched else reshape(m, (1, 1, h, w))
        code = encode_map(mb, params, depth, f"spf.ch{i}.")
        blocks.append(code)
        if reconstruct:
            losses.append(ops.mse(decode_map(code, params, (h, w), depth, f"spf.ch{i}."), mb))
    flat = concat(blocks, axis=1)
    if not batched:
        flat = reshape(flat, (c * cfg.code_dim,))
    recon = None
    if reconstruct:
        recon = losses[0]
        for extra in losses[1:]:
            recon = recon + extra
        recon = recon * (1.0 / len(losses))
    return flat, recon


def spf_flatten(maps: Sequence[Tensor], params: Mapping[str, Tensor], cfg: SpfConfig) -> Tensor:
    """Concatenate per-map codes; ``out[i*d:(i+1)*d]`` is the code of ``maps[i]``."""
    flat, _ = spf_encode(maps, params, cfg, reconstruct=False)
    return flat


def reconstruction_loss(maps: Sequence[Tensor], params: Mapping[str, Tensor], cfg: SpfConfig) -> Tensor:
    """Mean over maps of the per-map reconstruction MSE."""
    _, recon = spf_encode(maps, params, cfg, reconstruct=True)
    return recon


def flat_length(num_maps: int, code_dim: int) -> int:
    return num_maps * code_dim


def baseline_flatten(maps: Sequence[Tensor], d: int) -> Tensor:
    """Average-pool each map to a ``sqrt(d)`` grid, ravel row-major, concatenate in channel order."""
    g = math.isqrt(d) if d >= 1 else 0
    if g < 1 or g * g != d:
        raise ValueError(f"baseline flatten needs a perfect-square d, got {d}")
    stacked = _stack(maps)
    pooled = ops.avgpool_to_grid(stacked, g)
    c = stacked.shape[-3]
    if stacked.data.ndim == 4:
        return reshape(pooled, (stacked.shape[0], c * d))
    return reshape(pooled, (c * d,))
