"""Dilated-block cascade with a feature pyramid in front of the last stage.

Stage ``s`` is one dilated block (``block_depth`` same-padded convolutions
at the stage's dilation rate, each followed by relu, plus an additive skip)
followed by spatial dropout; a 2x2 max-pool separates consecutive stages.
Before the last stage the incoming features form a pyramid
``[x, pool(x), pool(pool(x)), ...]`` that is fused back at full resolution.
"""

from __future__ import annotations

from typing import Mapping, Sequence

from . import ops
from .autodiff import Tensor
from .config import BackboneConfig
from .init import conv_params
from .rng import PrngState


def init_backbone(cfg: BackboneConfig, rng: PrngState, prefix: str = "backbone") -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    c_in = 1
    for s, c_out in enumerate(cfg.stage_channels):
        if s == cfg.num_stages - 1 and cfg.num_stages > 1:
            for level in range(cfg.pyramid_levels):
                params.update(conv_params(rng, f"{prefix}.fpn.proj{level}", c_in, c_in, 1))
        block = f"{prefix}.stage{s}"
        ch = c_in
        for j in range(cfg.block_depth):
            params.update(conv_params(rng, f"{block}.conv{j}", c_out, ch, 3))
            ch = c_out
        if c_in != c_out:
            params.update(conv_params(rng, f"{block}.skip", c_out, c_in, 1))
        c_in = c_out
    return params


def dilated_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, dilation: int, depth: int,
                  skip: bool = True) -> Tensor:
    """``depth`` x (dilated conv + relu) with an additive skip from the block input.

    The skip is a 1x1 projection when ``{prefix}.skip.w`` exists (channel
    change) and the identity otherwise.
    """
    h = x
    for j in range(depth):
        h = ops.relu(ops.conv2d(h, params[f"{prefix}.conv{j}.w"], params[f"{prefix}.conv{j}.b"],
                                dilation=dilation, padding="same"))
    if not skip:
        return h
    if f"{prefix}.skip.w" in params:
        shortcut = ops.conv2d(x, params[f"{prefix}.skip.w"], params[f"{prefix}.skip.b"], padding="valid")
    else:
        shortcut = x
    return h + shortcut


def pyramid_fuse(levels: Sequence[Tensor], params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Project each level with a 1x1 conv, upsample to the finest level, and sum.

    ``levels`` are ordered fine to coarse; every level's side must be an
    integer fraction of the finest.
    """
    if not levels:
        raise ValueError("pyramid_fuse needs at least one level")
    fh, fw = levels[0].shape[-2:]
    fused = None
    for i, level in enumerate(levels):
        h, w = level.shape[-2:]
        if fh % h or fw % w or fh // h != fw // w:
            raise ValueError(f"pyramid level {i} ({h}x{w}) is not an integer downscale of {fh}x{fw}")
        y = ops.conv2d(level, params[f"{prefix}.proj{i}.w"], params[f"{prefix}.proj{i}.b"], padding="valid")
        if fh // h > 1:
            y = ops.upsample_nearest(y, fh // h)
        fused = y if fused is None else fused + y
    return fused


def backbone_forward(image, params: Mapping[str, Tensor], cfg: BackboneConfig, mode: str = "eval",
                     rng: PrngState | None = None, prefix: str = "backbone", skip: bool = True) -> Tensor:
    """Feature maps of the last stage, shape ``[C, H/2^(s-1), W/2^(s-1)]`` (batched if the input is)."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim not in (3, 4) or x.shape[-3] != 1:
        raise ValueError(f"backbone expects a grayscale [1,H,W] or [N,1,H,W] image, got {x.shape}")
    if tuple(x.shape[-2:]) != tuple(cfg.input_size):
        raise ValueError(f"image size {x.shape[-2:]} does not match configured input size {tuple(cfg.input_size)}")
    s_last = cfg.num_stages - 1
    for s in range(cfg.num_stages):
        if s == s_last and s > 0:
            levels = [x]
            for _ in range(1, cfg.pyramid_levels):
                levels.append(ops.maxpool2d(levels[-1], 2))
            x = pyramid_fuse(levels, params, f"{prefix}.fpn")
        x = dilated_block(x, params, f"{prefix}.stage{s}", cfg.dilation_rates[s], cfg.block_depth, skip=skip)
        x = ops.spatial_dropout(x, cfg.dropout_p, mode, rng)
        if s < s_last:
            x = ops.maxpool2d(x, 2)
    return x
