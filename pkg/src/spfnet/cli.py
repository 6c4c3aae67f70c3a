"""Command-line interface: ``spfnet <command> ...``.

Exit codes: 0 success, 1 check failure, 2 usage, 3 I/O, 4 numeric abort,
5 incompatible inputs.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (SHAPES, DataError, ImageSizeError, SynthConfig, generate_synthetic, load_arrays,
                   load_manifest, read_image, split_dataset)
from .metrics import UndefinedAUC, evaluate, write_report
from .model import NonFiniteLossError, fit, predict_proba, predict_scores

log = logging.getLogger("spfnet")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_INCOMPATIBLE = range(6)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spfnet", description="Spatially-preserving flattening experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic shapes benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--shapes", type=int, default=len(SHAPES), help="number of shape kinds (1-4)")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--shapes-per-image", type=int, default=2)
    g.add_argument("--jitter", type=int, help="max centre offset in pixels (default scales with --size)")
    g.add_argument("--size", type=int, default=64, help="square canvas side")

    def model_flags(q):
        q.add_argument("--config", help="key=value config file")
        q.add_argument("--preset", choices=sorted(C.PRESETS))
        q.add_argument("--epochs", type=int)
        q.add_argument("--batch-size", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--recon-weight", type=float)
        q.add_argument("--split-seed", type=int)

    t = sub.add_parser("train", help="fit a model on the 70/10/20 split")
    t.add_argument("--data")
    t.add_argument("--out", help="checkpoint path; history.csv and resolved.cfg go next to it")
    t.add_argument("--seed", type=int)
    t.add_argument("--flatten", choices=("spf", "baseline"))
    t.add_argument("--code-dim", type=int)
    model_flags(t)

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--report", required=True)
    e.add_argument("--bootstrap", type=int, default=0, help="bootstrap resamples for CIs (0 = none)")
    e.add_argument("--seed", type=int, default=0, help="bootstrap seed")

    a = sub.add_parser("ablate", help="flatten-arm x code-dim x seed sweep")
    a.add_argument("--data", required=True)
    a.add_argument("--code-dims", required=True)
    a.add_argument("--seeds", required=True)
    a.add_argument("--flatten-arms", default="spf,baseline")
    a.add_argument("--report", required=True)
    a.add_argument("--workdir", help="per-cell checkpoints and histories (default: next to the report)")
    model_flags(a)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the tiny model")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("predict", help="label probabilities for one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    return p


# configuration resolution ---------------------------------------------------

def resolve_model_config(args, file_pairs: dict[str, str]) -> C.ModelConfig:
    """Precedence: flag > config file > preset default."""
    preset = args.preset or file_pairs.get("model.preset", "desk")
    if preset not in C.PRESETS:
        raise C.ConfigError(f"unknown preset {preset!r}")
    cfg = C.apply_overrides(C.PRESETS[preset](), file_pairs)
    flags = {
        "train.epochs": getattr(args, "epochs", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.lr": getattr(args, "lr", None),
        "spf.recon_weight": getattr(args, "recon_weight", None),
        "data.split_seed": getattr(args, "split_seed", None),
        "train.seed": getattr(args, "seed", None),
        "model.flatten": getattr(args, "flatten", None),
        "spf.code_dim": getattr(args, "code_dim", None),
    }
    cfg = C.apply_overrides(cfg, {k: str(v) for k, v in flags.items() if v is not None})
    cfg.preset = preset
    return cfg


def _read_config_file(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    try:
        return C.read_kv(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config file {path}: {exc}") from exc


def _load_data(directory: str):
    try:
        return load_arrays(load_manifest(directory))
    except DataError as exc:
        raise CliError(EXIT_IO, f"bad dataset in {directory}: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read dataset {directory}: {exc}") from exc


def _bind_data(cfg: C.ModelConfig, data) -> C.ModelConfig:
    h, w = data.images.shape[-2:]
    if (h, w) != tuple(cfg.backbone.input_size):
        raise CliError(EXIT_INCOMPATIBLE, f"dataset images are {h}x{w}, model input is "
                                          f"{cfg.backbone.input_size[0]}x{cfg.backbone.input_size[1]}")
    return dataclasses.replace(cfg, num_labels=len(data.label_names)).validate()


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "bce", "recon", "total", "val_macro_auc"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["bce"]), repr(row["recon"]), repr(row["total"]),
                             repr(row["val_macro_auc"])])


def _write_resolved(directory: Path, pairs: dict[str, str]) -> None:
    (directory / "resolved.cfg").write_text(C.format_kv(pairs), encoding="utf-8")


# commands --------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise CliError(EXIT_USAGE, "--n must be >= 1")
    if not 1 <= args.shapes <= len(SHAPES):
        raise CliError(EXIT_USAGE, f"--shapes must be between 1 and {len(SHAPES)}")
    cfg = SynthConfig(shapes=SHAPES[:args.shapes], n_images=args.n, shapes_per_image=args.shapes_per_image,
                      noise_sigma=args.noise, jitter=args.jitter, seed=args.seed,
                      canvas=(args.size, args.size))
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    try:
        manifest = generate_synthetic(cfg, args.out)
        _write_resolved(Path(args.out), {
            "synth.n_images": str(cfg.n_images), "synth.seed": str(cfg.seed),
            "synth.shapes": ",".join(cfg.shapes), "synth.noise_sigma": repr(cfg.noise_sigma),
            "synth.shapes_per_image": str(cfg.shapes_per_image), "synth.jitter": str(cfg.max_offset),
            "synth.canvas": f"{cfg.canvas[0]}x{cfg.canvas[1]}", "data.dir": args.out})
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset to {args.out}: {exc}") from exc
    print(f"images,{len(manifest)}")
    print(f"labels,{len(manifest.label_names)}")
    for name, count in zip(manifest.label_names, manifest.labels.sum(axis=0)):
        print(f"{name},{int(count)}")
    return EXIT_OK


def train_run(cfg: C.ModelConfig, data, out: Path, extra: dict[str, str]):
    train, val, _ = split_dataset(data, seed=cfg.split_seed)
    try:
        ckpt, history = fit(train, val, cfg)
    except NonFiniteLossError as exc:
        raise CliError(EXIT_NUMERIC, str(exc)) from exc
    ckpt.metadata["meta.label_names"] = ",".join(data.label_names)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        save_checkpoint(out, ckpt)
        _write_history(out.parent / "history.csv", history)
        _write_resolved(out.parent, {**C.config_to_kv(cfg), **extra})
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write run outputs next to {out}: {exc}") from exc
    return ckpt, history


def cmd_train(args) -> int:
    pairs = _read_config_file(args.config)
    data_dir = args.data or pairs.get("data.dir")
    out = args.out or pairs.get("run.out")
    if not data_dir or not out:
        raise CliError(EXIT_USAGE, "train needs --data and --out (or data.dir / run.out in --config)")
    if args.seed is None and "train.seed" not in pairs:
        raise CliError(EXIT_USAGE, "train needs --seed (or train.seed in --config)")
    cfg = resolve_model_config(args, pairs)
    data = _load_data(data_dir)
    cfg = _bind_data(cfg, data)
    _, history = train_run(cfg, data, Path(out), {"data.dir": data_dir, "run.out": out})
    if history:
        last = history[-1]
        print(f"epochs,{len(history)}")
        print(f"final_total,{last['total']!r}")
        print(f"best_val_macro_auc,{max(r['val_macro_auc'] for r in history)!r}")
    else:
        print("epochs,0")
    return EXIT_OK


def _check_labels(ckpt, data) -> None:
    if ckpt.config.num_labels != len(data.label_names):
        raise CliError(EXIT_INCOMPATIBLE, f"label count mismatch: checkpoint has {ckpt.config.num_labels} labels, "
                                          f"dataset has {len(data.label_names)}")


def _load_ckpt(path: str):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(EXIT_IO, f"cannot load checkpoint {path} ({exc.code}): {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {exc}") from exc


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    data = _load_data(args.data)
    _check_labels(ckpt, data)
    if tuple(data.images.shape[-2:]) != tuple(ckpt.config.backbone.input_size):
        raise CliError(EXIT_INCOMPATIBLE, "dataset image size does not match the checkpoint input size")
    parts = dict(zip(("train", "val", "test"), split_dataset(data, seed=ckpt.config.split_seed)))
    split = parts[args.split]
    scores = predict_scores(split.images, ckpt.params, ckpt.config)
    try:
        report = evaluate(scores, split.targets, split.label_names, n_bootstrap=args.bootstrap, seed=args.seed)
    except UndefinedAUC as exc:
        raise CliError(EXIT_INCOMPATIBLE, f"{args.split} split has no label with both classes: {exc}") from exc
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    try:
        write_report(report, args.report)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report {args.report}: {exc}") from exc
    print(f"MACRO,{report.macro_auc!r}")
    print(f"WEIGHTED,{report.weighted_auc!r}")
    if report.undefined_labels:
        print(f"undefined_labels,{';'.join(report.undefined_labels)}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    pairs = _read_config_file(args.config)
    try:
        dims = C.parse_int_list(args.code_dims)
        seeds = C.parse_int_list(args.seeds)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"bad list: {exc}") from exc
    arms = [a.strip() for a in args.flatten_arms.split(",") if a.strip()]
    if not dims or not seeds or not arms:
        raise CliError(EXIT_USAGE, "--code-dims, --seeds and --flatten-arms must be non-empty")
    if set(arms) - {"spf", "baseline"}:
        raise CliError(EXIT_USAGE, f"unknown flatten arm in {arms}")
    base = resolve_model_config(args, pairs)
    data = _load_data(args.data)
    cells = []
    for arm in arms:
        for d in dims:
            cfg = dataclasses.replace(base, flatten=arm, spf=dataclasses.replace(base.spf, code_dim=d))
            try:
                _bind_data(cfg, data)
            except C.ConfigError as exc:
                raise CliError(EXIT_USAGE, f"arm {arm} with code dim {d}: {exc}") from exc
            cells.extend((arm, d, s) for s in seeds)

    report = Path(args.report)
    workdir = Path(args.workdir) if args.workdir else report.parent / (report.stem + "_cells")
    rows = []
    for arm, d, seed in cells:
        cfg = dataclasses.replace(base, flatten=arm, seed=seed, spf=dataclasses.replace(base.spf, code_dim=d))
        cfg = _bind_data(cfg, data)
        out = workdir / f"{arm}_d{d}_s{seed}" / "model.ckpt"
        ckpt, _ = train_run(cfg, data, out, {"data.dir": args.data, "run.out": str(out)})
        test = split_dataset(data, seed=cfg.split_seed)[2]
        res = evaluate(predict_scores(test.images, ckpt.params, cfg), test.targets, test.label_names)
        log.info("cell arm=%s d=%d seed=%d macro=%.4f weighted=%.4f", arm, d, seed, res.macro_auc, res.weighted_auc)
        rows.append((arm, d, seed, res.macro_auc, res.weighted_auc))
    try:
        write_ablation(report, rows)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report {report}: {exc}") from exc
    for arm, d, mean_macro, sd_macro, *_ in summarize(rows):
        print(f"{arm},{d},{mean_macro:.4f}+-{sd_macro:.4f}")
    return EXIT_OK


def summarize(rows):
    """Per (arm, code_dim): mean and sample standard deviation over seeds."""
    out = []
    keys = list(dict.fromkeys((r[0], r[1]) for r in rows))
    for arm, d in keys:
        macro = np.array([r[3] for r in rows if (r[0], r[1]) == (arm, d)])
        weighted = np.array([r[4] for r in rows if (r[0], r[1]) == (arm, d)])
        sd = (lambda x: float(x.std(ddof=1)) if x.size > 1 else 0.0)
        out.append((arm, d, float(macro.mean()), sd(macro), float(weighted.mean()), sd(weighted)))
    return out


ABLATION_HEADER = ["arm", "code_dim", "seed", "macro_auc", "weighted_auc", "macro_spread", "weighted_spread"]


def write_ablation(path: Path, rows) -> None:
    """Cell rows, then one ``seed=mean`` summary row per (arm, code_dim) with seed standard deviations."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        for arm, d, seed, macro, weighted in rows:
            writer.writerow([arm, d, seed, repr(macro), repr(weighted), "", ""])
        for arm, d, m, sm, w, sw in summarize(rows):
            writer.writerow([arm, d, "mean", repr(m), repr(w), repr(sm), repr(sw)])


def read_ablation(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.seed)
    print("check,group,max_rel_err,status")
    worst = max(results, key=lambda r: r.max_rel_err)
    for r in results:
        status = "ok" if r.max_rel_err <= args.tol else "FAIL"
        print(f"{r.check},{r.group},{r.max_rel_err:.3e},{status}")
    if worst.max_rel_err > args.tol or not math.isfinite(worst.max_rel_err):
        print(f"worst offender: {worst.check}/{worst.group} rel. err {worst.max_rel_err:.3e} > tol {args.tol:g}",
              file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(results)} gradient groups within tol {args.tol:g} (worst {worst.check}/{worst.group} "
          f"{worst.max_rel_err:.3e})")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    try:
        image = read_image(args.image, tuple(ckpt.config.backbone.input_size))
    except ImageSizeError as exc:
        raise CliError(EXIT_INCOMPATIBLE, str(exc)) from exc
    except (DataError, OSError) as exc:
        raise CliError(EXIT_IO, f"cannot read image {args.image}: {exc}") from exc
    probs = predict_proba(image, ckpt).data
    labels = ckpt.metadata.get("meta.label_names", "")
    names = labels.split(",") if labels else [f"label_{i}" for i in range(len(probs))]
    order = sorted(range(len(probs)), key=lambda i: -float(probs[i]))
    print("label,probability")
    for i in order:
        print(f"{names[i]},{float(probs[i])!r}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "predict": cmd_predict}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with exit status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"spfnet {args.command}: {exc}", file=sys.stderr)
        if exc.code == EXIT_USAGE:
            parser.print_usage(sys.stderr)
        return exc.code
    except C.ConfigError as exc:
        print(f"spfnet {args.command}: configuration error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
