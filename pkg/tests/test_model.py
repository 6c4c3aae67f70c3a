import dataclasses
import struct
from pathlib import Path

import numpy as np
import pytest

from spfnet import ops
from spfnet.autodiff import Tape, Tensor, backward
from spfnet.checkpoint import (FORMAT_VERSION, MAGIC, BadMagicError, CorruptCheckpointError, TruncatedError,
                               VersionMismatchError, decode_checkpoint, encode_checkpoint, load_checkpoint,
                               save_checkpoint)
from spfnet.config import config_to_kv, format_kv, tiny_config
from spfnet.data import Split
from spfnet.gradcheck import grad_check
from spfnet.metrics import macro_auc, per_label_auc
from spfnet.model import (Checkpoint, NonFiniteLossError, fit, init_params, model_forward, new_optimizer,
                          predict_proba, predict_scores, total_loss, train_step)
from spfnet.rng import PrngState

GOLDEN = Path(__file__).parent / "data" / "tiny_init.ckpt"


def images(seed, n, side=16):
    return PrngState(seed, "images").uniform(n * side * side).reshape(n, 1, side, side).astype(np.float32)


def overfit_batch():
    x = images(0, 8)
    y = np.zeros((8, 3), np.float32)
    y[np.arange(8), np.arange(8) % 3] = 1
    y[[0, 5], [1, 2]] = 1
    return x, y


def toy_split(seed, n):
    x = images(seed, n)
    y = (PrngState(seed, "toy-labels").uniform(3 * n).reshape(n, 3) < 0.5).astype(np.float32)
    y[0], y[1] = 0, 1
    return Split(x, y, ["a", "b", "c"], np.arange(n))


def test_baseline_recon_is_zero():
    cfg = dataclasses.replace(tiny_config(), flatten="baseline")
    params = init_params(cfg)
    assert "spf.enc.fc.w" not in params
    _, recon = model_forward(images(1, 2), params, cfg)
    assert recon.item() == 0.0


@pytest.mark.parametrize("flatten", ["spf", "baseline"])
def test_logits_have_label_length(flatten):
    cfg = dataclasses.replace(tiny_config(), flatten=flatten, num_labels=5)
    params = init_params(cfg)
    assert model_forward(images(2, 1)[0], params, cfg)[0].shape == (5,)
    assert model_forward(images(2, 3), params, cfg)[0].shape == (3, 5)
    assert params["head.w"].shape == (5, cfg.flat_width)


def test_tiny_full_model_gradient():
    cfg = tiny_config()
    assert cfg.backbone.output_shape()[0] == 4 and cfg.spf.code_dim == 4 and cfg.num_labels == 3
    params = {k: v.data.astype(np.float64) + 0.05 * PrngState(7, k).normal(v.data.size).reshape(v.shape)
              for k, v in init_params(cfg).items()}
    x = images(3, 2).astype(np.float64)
    y = overfit_batch()[1][:2]

    def loss(t):
        logits, recon = model_forward(x, t, cfg)
        return total_loss(logits, y, recon, cfg.spf.recon_weight)

    report = grad_check(loss, params)
    assert len(report) == len(params)
    assert max(report.values()) < 1e-4


def test_total_loss_arithmetic():
    # logit z with bce 0.5 on a positive target: log(1 + exp(-z)) = 0.5
    z = np.array([-np.log(np.expm1(0.5))])
    bce_only = total_loss(Tensor(z, dtype=np.float64), [1.0], Tensor(np.array(0.0)), 2.0).item()
    assert bce_only == pytest.approx(0.5, abs=1e-12)
    assert total_loss(Tensor(z, dtype=np.float64), [1.0], Tensor(np.array(0.25)), 2.0).item() == pytest.approx(1.0, abs=1e-12)
    assert total_loss(Tensor(z, dtype=np.float64), [1.0], Tensor(np.array(9.0)), 0.0).item() == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError, match="does not match"):
        total_loss(Tensor(np.zeros(3)), [1.0, 0.0], Tensor(np.array(0.0)), 1.0)


def test_zero_learning_rate_leaves_params():
    cfg = dataclasses.replace(tiny_config(), lr=0.0)
    params = init_params(cfg)
    before = {k: v.data.copy() for k, v in params.items()}
    losses = train_step(overfit_batch(), params, new_optimizer(params, cfg), cfg, PrngState(0, "dropout"))
    assert set(losses) == {"bce", "recon", "total"} and losses["bce"] > 0
    for k, v in params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_train_step_is_deterministic():
    cfg = tiny_config()
    runs = []
    for _ in range(2):
        params = init_params(cfg)
        opt = new_optimizer(params, cfg)
        rng = PrngState(5, "dropout")
        for _ in range(3):
            train_step(overfit_batch(), params, opt, cfg, rng)
        runs.append(params)
    for k in runs[0]:
        np.testing.assert_array_equal(runs[0][k].data, runs[1][k].data)


def test_non_finite_loss_aborts():
    cfg = tiny_config()
    params = init_params(cfg)
    params["head.b"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError, match="step 1"):
        train_step(overfit_batch(), params, new_optimizer(params, cfg), cfg, PrngState(0, "dropout"))


def test_every_parameter_gets_a_gradient():
    cfg = tiny_config()
    params = init_params(cfg)
    x, y = overfit_batch()
    with Tape() as tape:
        logits, recon = model_forward(x, params, cfg, "train", PrngState(0, "dropout"))
        loss = total_loss(logits, y, recon, 1.0)
    grads = backward(tape, loss, params)
    assert all(np.abs(grads[k]).sum() > 0 for k in params)


def test_zero_recon_weight_leaves_decoder_gradients_exactly_zero():
    cfg = dataclasses.replace(tiny_config(), spf=dataclasses.replace(tiny_config().spf, recon_weight=0.0))
    params = init_params(cfg)
    x, y = overfit_batch()
    with Tape() as tape:
        logits, recon = model_forward(x, params, cfg, "train", PrngState(0, "dropout"))
        loss = total_loss(logits, y, recon, cfg.spf.recon_weight)
    grads = backward(tape, loss, params)
    decoder = [k for k in params if ".dec." in k]
    assert decoder and all(not grads[k].any() for k in decoder)
    assert all(np.abs(grads[k]).sum() > 0 for k in params if k not in decoder)


def test_overfits_eight_examples():
    cfg = tiny_config()
    x, y = overfit_batch()
    params = init_params(cfg)
    opt = new_optimizer(params, cfg)
    rng = PrngState(0, "dropout")
    for _ in range(500):
        train_step((x, y), params, opt, cfg, rng)
    logits, _ = model_forward(x, params, cfg, "eval")
    assert ops.bce_with_logits(logits, y).item() < 0.05
    assert macro_auc(per_label_auc(predict_scores(x, params, cfg), y, ["a", "b", "c"])) == 1.0


def test_smoothed_loss_is_non_increasing_without_dropout():
    cfg = tiny_config()
    cfg = dataclasses.replace(cfg, backbone=dataclasses.replace(cfg.backbone, dropout_p=0.0))
    params = init_params(cfg)
    opt = new_optimizer(params, cfg)
    trace = [train_step(overfit_batch(), params, opt, cfg, None)["total"] for _ in range(300)]
    smooth = np.convolve(trace, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(smooth) <= 0)


def test_fit_zero_epochs_returns_initialization():
    cfg = dataclasses.replace(tiny_config(), epochs=0)
    ckpt, history = fit(toy_split(1, 10), toy_split(2, 4), cfg)
    assert history == []
    init = init_params(cfg)
    for k, v in ckpt.params.items():
        np.testing.assert_array_equal(v.data, init[k].data)


def test_fit_history_and_best_epoch():
    cfg = dataclasses.replace(tiny_config(), epochs=3)
    seen = []
    ckpt, history = fit(toy_split(1, 20), toy_split(2, 6), cfg, on_epoch=seen.append)
    assert [r["epoch"] for r in history] == [1, 2, 3] and seen == history
    assert set(history[0]) == {"epoch", "bce", "recon", "total", "val_macro_auc"}
    best = int(ckpt.metadata["meta.best_epoch"])
    assert history[best - 1]["val_macro_auc"] == max(r["val_macro_auc"] for r in history)
    assert ckpt.metadata["meta.epochs_completed"] == "3"
    with pytest.raises(ValueError):
        fit(toy_split(1, 20), toy_split(2, 6), dataclasses.replace(cfg, num_labels=4))


def test_predict_proba_range_and_determinism():
    cfg = tiny_config()
    ckpt = Checkpoint(cfg, init_params(cfg))
    img = images(4, 1)[0]
    a, b = predict_proba(img, ckpt).data, predict_proba(img, ckpt).data
    assert a.shape == (3,) and np.all((a > 0) & (a < 1))
    np.testing.assert_array_equal(a, b)


def trained_checkpoint():
    cfg = tiny_config()
    params = init_params(cfg)
    opt = new_optimizer(params, cfg)
    for _ in range(3):
        train_step(overfit_batch(), params, opt, cfg, PrngState(0, "dropout"))
    return Checkpoint(cfg, params, opt, {"meta.epochs_completed": "1", "meta.final_bce": "0.5"})


def test_round_trip_gives_identical_predictions(tmp_path):
    ckpt = trained_checkpoint()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    x = images(9, 10)
    diff = np.abs(predict_scores(x, loaded.params, loaded.config) - predict_scores(x, ckpt.params, ckpt.config))
    assert diff.max() == 0
    assert loaded.metadata == ckpt.metadata
    assert loaded.opt_state.t == 3
    for k in ckpt.params:
        np.testing.assert_array_equal(loaded.opt_state.m[k], ckpt.opt_state.m[k].astype(np.float32))
    assert encode_checkpoint(loaded) == encode_checkpoint(ckpt)


def test_byte_layout_matches_hand_built_encoding():
    cfg = tiny_config()
    params = init_params(cfg)
    blob = format_kv(config_to_kv(cfg)).encode()
    expected = MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", len(blob)) + blob
    expected += struct.pack("<I", len(params))
    for name, t in params.items():
        expected += struct.pack("<H", len(name)) + name.encode() + struct.pack("<B", t.data.ndim)
        expected += struct.pack(f"<{t.data.ndim}I", *t.shape) + t.data.astype("<f4").tobytes()
    expected += b"\x00"
    assert encode_checkpoint(Checkpoint(cfg, params)) == expected


def test_golden_file():
    cfg = tiny_config()
    assert encode_checkpoint(Checkpoint(cfg, init_params(cfg))) == GOLDEN.read_bytes()
    assert decode_checkpoint(GOLDEN.read_bytes()).config == cfg


def test_corruption_diagnostics():
    data = encode_checkpoint(trained_checkpoint())
    with pytest.raises(BadMagicError, match="bad magic") as err:
        decode_checkpoint(b"X" + data[1:])
    assert err.value.code == "bad-magic"
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(data[:8] + struct.pack("<I", 99) + data[12:])
    for cut in (10, 40, len(data) // 2, len(data) - 1):
        with pytest.raises(TruncatedError):
            decode_checkpoint(data[:cut])
    with pytest.raises(CorruptCheckpointError, match="trailing"):
        decode_checkpoint(data + b"\x00")


def test_tiny_checkpoint_is_small():
    assert len(encode_checkpoint(trained_checkpoint())) < 5 * 2 ** 20
