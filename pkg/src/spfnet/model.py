"""Backbone + flattener + dense sigmoid head, the joint loss, and training."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import ops
from .autodiff import Tape, Tensor, backward
from .backbone import backbone_forward, init_backbone
from .config import ModelConfig
from .data import Split, iterate_batches
from .init import dense_params
from .metrics import UndefinedAUC, macro_auc, per_label_auc
from .nadam import NadamState, nadam_step
from .rng import PrngState
from .spf import baseline_flatten, init_spf, spf_encode

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss."""


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    cfg.validate()
    rng = PrngState(cfg.seed, "init")
    params = init_backbone(cfg.backbone, rng)
    c, h, _ = cfg.backbone.output_shape()
    if cfg.flatten == "spf":
        params.update(init_spf(cfg.spf, c, h, rng))
    params.update(dense_params(rng, "head", cfg.num_labels, cfg.flat_width))
    return params


def model_forward(images, params: Mapping[str, Tensor], cfg: ModelConfig, mode: str = "eval",
                  rng: PrngState | None = None) -> tuple[Tensor, Tensor]:
    """Logits ``[N, L]`` (``[L]`` for a single image) and the reconstruction loss.

    The reconstruction term is identically zero for the baseline flattener.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=_dtype_of(params))
    features = backbone_forward(x, params, cfg.backbone, mode, rng)
    if cfg.flatten == "spf":
        flat, recon = spf_encode(features, params, cfg.spf)
    else:
        flat = baseline_flatten(features, cfg.spf.code_dim)
        recon = Tensor(np.zeros((), dtype=features.dtype))
    logits = ops.dense(flat, params["head.w"], params["head.b"])
    return logits, recon


def _dtype_of(params: Mapping[str, Tensor]):
    return next(iter(params.values())).dtype


def total_loss(logits: Tensor, targets, recon: Tensor, recon_weight: float) -> Tensor:
    """``bce_with_logits(logits, targets) + recon_weight * recon``."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if y.shape != logits.shape:
        raise ValueError(f"targets shape {y.shape} does not match logits {logits.shape}")
    return ops.bce_with_logits(logits, y) + recon * float(recon_weight)


def train_step(batch, params: dict[str, Tensor], opt_state: NadamState, cfg: ModelConfig,
               rng: PrngState | None) -> dict[str, float]:
    """One forward/backward/Nadam update on the batch-mean loss.

    Returns the scalar ``bce``, ``recon`` and ``total`` losses of the batch
    (measured before the update).
    """
    images, targets = batch
    with Tape() as tape:
        logits, recon = model_forward(images, params, cfg, "train", rng)
        bce = ops.bce_with_logits(logits, np.asarray(targets, dtype=logits.dtype))
        loss = bce + recon * float(cfg.spf.recon_weight)
    values = {"bce": bce.item(), "recon": recon.item(), "total": loss.item()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(f"non-finite loss at optimizer step {opt_state.t + 1}: {values}")
    grads = backward(tape, loss, params)
    nadam_step(params, grads, opt_state)
    return values


def predict_scores(images: np.ndarray, params: Mapping[str, Tensor], cfg: ModelConfig,
                   batch_size: int = 64) -> np.ndarray:
    """Eval-mode sigmoid probabilities for a stack of images ``[n, 1, H, W]``."""
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = model_forward(images[start:start + batch_size], params, cfg, "eval")
        out.append(ops.sigmoid(logits).data)
    return np.concatenate(out) if out else np.zeros((0, cfg.num_labels), dtype=np.float32)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, Tensor]
    opt_state: NadamState | None = None
    metadata: dict[str, str] = field(default_factory=dict)


def new_optimizer(params: Mapping[str, Tensor], cfg: ModelConfig) -> NadamState:
    return NadamState.for_params(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def split_macro_auc(split: Split, params, cfg: ModelConfig) -> float:
    scores = predict_scores(split.images, params, cfg)
    try:
        return macro_auc(per_label_auc(scores, split.targets, split.label_names))
    except UndefinedAUC:
        return float("nan")


def _snapshot(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}


def fit(train: Split, val: Split, cfg: ModelConfig,
        on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Train for ``cfg.epochs`` epochs and keep the parameters of the best validation epoch.

    History rows hold ``epoch, bce, recon, total`` (example-weighted epoch
    means) and ``val_macro_auc``.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    cfg.validate()
    if train.targets.shape[1] != cfg.num_labels:
        raise ValueError(f"data has {train.targets.shape[1]} labels, config expects {cfg.num_labels}")
    params = init_params(cfg)
    opt = new_optimizer(params, cfg)
    dropout = PrngState(cfg.seed, "dropout")
    best = _snapshot(params)
    best_auc, best_epoch = -math.inf, -1
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        sums = {"bce": 0.0, "recon": 0.0, "total": 0.0}
        seen = 0
        for images, targets in iterate_batches(train, cfg.batch_size, epoch, cfg.seed):
            losses = train_step((images, targets), params, opt, cfg, dropout)
            for k in sums:
                sums[k] += losses[k] * len(images)
            seen += len(images)
        auc = split_macro_auc(val, params, cfg)
        row = {"epoch": epoch + 1, **{k: v / seen for k, v in sums.items()}, "val_macro_auc": auc}
        history.append(row)
        log.info("epoch %d bce=%.4f recon=%.4f total=%.4f val_macro_auc=%.4f", row["epoch"], row["bce"],
                 row["recon"], row["total"], auc)
        if on_epoch:
            on_epoch(row)
        if auc >= best_auc:  # ties go to the later, longer-trained epoch
            best_auc, best_epoch = auc, epoch + 1
            best = _snapshot(params)
    meta = {"meta.epochs_completed": str(cfg.epochs), "meta.best_epoch": str(best_epoch)}
    if history:
        meta.update({"meta.best_val_macro_auc": repr(best_auc),
                     **{f"meta.final_{k}": repr(history[-1][k]) for k in ("bce", "recon", "total")}})
    ckpt = Checkpoint(copy.deepcopy(cfg), best, opt if best_epoch == cfg.epochs else None, meta)
    return ckpt, history


def predict_proba(image, checkpoint: Checkpoint) -> Tensor:
    """Eval-mode label probabilities for one ``[1,H,W]`` image (or a batch)."""
    logits, _ = model_forward(image, checkpoint.params, checkpoint.config, "eval")
    return ops.sigmoid(logits)
