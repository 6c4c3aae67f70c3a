"""Finite-difference gradient checks in float64 shadow precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tape, Tensor, backward
from .rng import PrngState

STEP = 1e-5


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(a, n))


def grad_check(fn: Callable[[dict[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray],
               h: float = STEP) -> dict[str, float]:
    """Max relative error per input group between tape and central differences.

    ``fn`` maps a dict of float64 tensors to a scalar tensor.  Every input
    array is promoted to float64 before evaluation.
    """
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in inputs.items()}
    with Tape() as tape:
        loss = fn(tensors)
    analytic = backward(tape, loss, tensors)

    report = {}
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(tensors).item()
            flat[i] = orig - h
            down = fn(tensors).item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        report[name] = float(rel_err(analytic[name].reshape(-1), numeric).max())
    return report


@dataclass
class CheckResult:
    check: str
    group: str
    max_rel_err: float


def _random(rng: PrngState, *shape: int) -> np.ndarray:
    return rng.normal(int(np.prod(shape))).reshape(shape)


def default_suite(seed: int = 0) -> list[tuple[str, Callable, dict[str, np.ndarray]]]:
    """Every differentiable op plus the tiny composite SPF model."""
    from . import ops
    from .backbone import dilated_block, pyramid_fuse
    from .config import tiny_config
    from .model import init_params, model_forward, total_loss
    from .spf import decode_map, encode_map, init_autoencoder

    rng = PrngState(seed, "gradcheck")
    r = lambda *s: _random(rng, *s)  # noqa: E731
    targets = (rng.uniform(3) > 0.5).astype(np.float64)

    suite = [
        ("conv2d", lambda t: (ops.conv2d(t["x"], t["w"], t["b"]) * fixed(4, 8, 8)).sum(),
         {"x": r(1, 8, 8), "w": r(4, 1, 3, 3), "b": r(4)}),
        ("conv2d_dilated", lambda t: ops.conv2d(t["x"], t["w"], t["b"], dilation=2).sum(),
         {"x": r(2, 9, 9), "w": r(3, 2, 3, 3), "b": r(3)}),
        ("conv2d_strided", lambda t: ops.conv2d(t["x"], t["w"], t["b"], stride=2).sum(),
         {"x": r(2, 2, 8, 8), "w": r(3, 2, 3, 3), "b": r(3)}),
        ("maxpool2d", lambda t: (ops.maxpool2d(t["x"], 2) * fixed(2, 2, 2)).sum(),
         {"x": r(2, 4, 4)}),
        ("avgpool_to_grid", lambda t: (ops.avgpool_to_grid(t["x"], 2) * fixed(1, 2, 2)).sum(),
         {"x": r(1, 4, 4)}),
        ("upsample_nearest", lambda t: (ops.upsample_nearest(t["x"], 3) * fixed(1, 6, 6)).sum(),
         {"x": r(1, 2, 2)}),
        ("dense", lambda t: (ops.dense(t["x"], t["w"], t["b"]) * fixed(3)).sum(),
         {"x": r(4), "w": r(3, 4), "b": r(3)}),
        ("sigmoid", lambda t: (ops.sigmoid(t["x"]) * fixed(3)).sum(),
         {"x": np.array([-2.0, 0.0, 2.0])}),
        ("relu", lambda t: (ops.relu(t["x"]) * fixed(4)).sum(),
         {"x": np.array([-1.5, -0.3, 0.4, 2.0])}),
        ("bce_with_logits", lambda t: ops.bce_with_logits(t["z"], targets),
         {"z": r(3)}),
        ("mse", lambda t: ops.mse(t["a"], t["b"]),
         {"a": r(2, 3), "b": r(2, 3)}),
        ("dilated_block", lambda t: (dilated_block(t["x"], t, "blk", dilation=2, depth=2) * fixed(1, 3, 6, 6)).sum(),
         {"x": r(1, 2, 6, 6), "blk.conv0.w": r(3, 2, 3, 3) * 0.5, "blk.conv0.b": r(3) * 0.1,
          "blk.conv1.w": r(3, 3, 3, 3) * 0.5, "blk.conv1.b": r(3) * 0.1,
          "blk.skip.w": r(3, 2, 1, 1), "blk.skip.b": r(3) * 0.1}),
        ("pyramid_fuse", lambda t: (pyramid_fuse([t["fine"], t["coarse"]], t, "fpn") * fixed(1, 2, 4, 4)).sum(),
         {"fine": r(1, 3, 4, 4), "coarse": r(1, 2, 2, 2),
          "fpn.proj0.w": r(2, 3, 1, 1), "fpn.proj0.b": r(2), "fpn.proj1.w": r(2, 2, 1, 1), "fpn.proj1.b": r(2)}),
    ]

    ae_params = {k: v.data.astype(np.float64) for k, v in init_autoencoder(map_size=8, code_dim=4, channels=2,
                                                                              depth=1, rng=rng.spawn("ae")).items()}
    for v in ae_params.values():
        v += 0.05 * _random(rng, *v.shape)
    suite.append(("encode_map", lambda t: (encode_map(t["m"], t, depth=1) * fixed(2, 4)).sum(),
                  {"m": r(2, 1, 8, 8), **ae_params}))
    suite.append(("decode_map", lambda t: (decode_map(t["c"], t, (8, 8), depth=1) * fixed(2, 1, 8, 8)).sum(),
                  {"c": r(2, 4), **ae_params}))

    cfg = tiny_config()
    params = {k: v.data.astype(np.float64) for k, v in init_params(cfg).items()}
    for v in params.values():
        v += 0.05 * _random(rng, *v.shape)  # move biases off zero so relu kinks are not hit exactly
    images = rng.uniform(2 * 16 * 16).reshape(2, 1, 16, 16)
    multi_hot = (rng.uniform(2 * cfg.num_labels) > 0.5).astype(np.float64).reshape(2, cfg.num_labels)

    def composite(t):
        logits, recon = model_forward(images, t, cfg, "eval", None)
        return total_loss(logits, multi_hot, recon, cfg.spf.recon_weight)

    suite.append(("spf_model", composite, params))
    return suite


def fixed(*shape: int) -> np.ndarray:
    """Deterministic projection weights so summed outputs are not symmetric."""
    return PrngState(12345, "gradcheck-weights", shape).normal(int(np.prod(shape))).reshape(shape)


def run_suite(seed: int = 0) -> list[CheckResult]:
    results = []
    for check, fn, inputs in default_suite(seed):
        for group, err in grad_check(fn, inputs).items():
            results.append(CheckResult(check, group, err))
    return results
