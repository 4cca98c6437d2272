"""Command-line entry point.

Every training subcommand writes a run directory holding ``config.json``
(the resolved configuration, seed included), ``seed.txt``, checkpoints and
metric CSVs. Configuration is layered: preset, then ``--config`` file, then
``--set key=value`` overrides, then dedicated flags. Unknown keys are
rejected.

Exit codes: 0 success, 2 usage, 3 configuration or domain error, 4 data or
integrity error, 5 numeric failure. ``RADFM_OUTPUT_ROOT`` sets the default
parent directory for runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import data as data_io
from .captioning import HISTORY_FIELDS as CAP_FIELDS
from .captioning import Captioner
from .classification import HISTORY_FIELDS as CLS_FIELDS
from .classification import ViTClassifier, merge_lora
from .core import ParameterStore, parse_overrides, read_config_file, save_checkpoint
from .dense import HISTORY_FIELDS as SEG_FIELDS
from .dense import DenseSegmenter
from .exceptions import ConfigError, DataError, RadfmError
from .metrics import caption_report, classification_report, macro_f1, accuracy, seg_metrics
from .ssl import TINY_PRETRAIN, PretrainConfig, SelfDistillationPretrainer
from .training import history_csv, load_encoder, save_encoder
from .validation import check_images

logger = logging.getLogger("radfm")

OUTPUT_ROOT_ENV = "RADFM_OUTPUT_ROOT"
EXIT_CODES = {"config": 3, "domain": 3, "shape": 3, "data": 4, "integrity": 4, "numeric": 5}

# keys that describe where data comes from rather than how to train
DATA_KEYS = {"data": None, "n_synthetic": None, "data_seed": 0, "preset": "standard"}

TINY = {
    "train-cls": dict(encoder="tiny", image_size=56, epochs=40, lr=1e-2, warmup_epochs=2,
                      batch_size=32),
    "train-seg": dict(encoder="tiny", image_size=64, epochs=20, lr=1e-3, batch_size=16),
    "train-cap": dict(encoder="tiny", image_size=56, epochs=100, lr=3e-3, batch_size=8),
}
SYNTHETIC = {
    "pretrain": (data_io.synth_blobs, 64),
    "train-cls": (data_io.synth_blobs, 192),
    "train-seg": (data_io.synth_squares, 96),
    "train-cap": (data_io.synth_shapes_captions, 48),
}
TASK_OF = {"pretrain": "pretrain", "train-cls": "classification",
           "train-seg": "segmentation", "train-cap": "captioning"}


# --------------------------------------------------------------------------
# run directories


@contextmanager
def run_directory(path: Path):
    """Create ``path`` and hold an exclusive lock file inside it."""
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{path} is locked by another run (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        lock.unlink(missing_ok=True)


def default_out_dir(command: str, seed: int) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{command}-seed{seed}"


def write_text(path: Path, text: str):
    path.write_text(text)
    logger.info("wrote %s", path)


# --------------------------------------------------------------------------
# configuration


def layered_config(args, defaults: dict, tiny: dict | None = None) -> dict:
    """Merge preset, config file, overrides and flags; reject unknown keys."""
    allowed = dict(defaults)
    allowed.update(DATA_KEYS)
    file_cfg = read_config_file(args.config) if args.config else {}
    overrides = parse_overrides(args.set)
    preset = overrides.get("preset", file_cfg.get("preset", "standard"))
    if preset not in ("standard", "tiny"):
        raise ConfigError(f"preset must be 'standard' or 'tiny', got {preset!r}")
    cfg = dict(allowed)
    layers = [tiny if preset == "tiny" else None, file_cfg, overrides, flag_overrides(args)]
    for layer in layers:
        if not layer:
            continue
        unknown = set(layer) - set(allowed)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(layer)
    return cfg


def flag_overrides(args) -> dict:
    out = {}
    for flag, key in (("regime", "regime"), ("lora_r", "lora_r"), ("lora_alpha", "lora_alpha"),
                      ("encoder", "encoder"), ("data", "data"), ("epochs", "epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def split_config(cfg: dict):
    est = {k: v for k, v in cfg.items() if k not in DATA_KEYS}
    src = {k: cfg[k] for k in DATA_KEYS}
    return est, src


# --------------------------------------------------------------------------
# data


def load_task_data(command: str, src: dict, image_size=None) -> dict:
    """Splits as ``{name: (images [n,3,H,W], targets, ids)}``, normalised."""
    task = TASK_OF[command]
    if src["data"]:
        ds = data_io.load_dataset(src["data"], image_size)
        if ds.task != task:
            raise DataError(f"manifest task {ds.task!r} does not match {command}")
        return {name: (s.images, s.targets, list(s.paths)) for name, s in ds.splits.items()}
    gen, n_default = SYNTHETIC[command]
    synth = gen(src["n_synthetic"] or n_default, seed=src["data_seed"])
    fractions = (1.0,) if command in ("pretrain",) else (2 / 3, 1 / 3)
    raw = synth.split(fractions)
    stats = None
    out = {}
    for name in ("train", "val", "test"):
        if name not in raw:
            continue
        images, targets = raw[name]
        x, stats = data_io.normalize(images, stats)
        if command == "train-cap":
            targets = [str(t) for t in targets]
        elif command != "pretrain":
            targets = torch.as_tensor(np.asarray(targets))
        ids = [f"{name}_{i:05d}" for i in range(len(images))]
        out[name] = (x, targets, ids)
    return out


def eval_split(splits: dict):
    for name in ("test", "val"):
        if name in splits and len(splits[name][2]):
            return name
    return None


# --------------------------------------------------------------------------
# subcommands


def save_resolved(out: Path, command: str, seed: int, cfg: dict, extra: dict | None = None):
    resolved = {"command": command, "seed": seed, **cfg, **(extra or {})}
    write_text(out / "config.json", json.dumps(resolved, indent=1, sort_keys=True, default=str) + "\n")
    write_text(out / "seed.txt", f"{seed}\n")
    return resolved


def cmd_pretrain(args) -> int:
    defaults = asdict(PretrainConfig())
    cfg = layered_config(args, defaults, TINY_PRETRAIN)
    est_cfg, src = split_config(cfg)
    pcfg = PretrainConfig(**est_cfg)
    splits = load_task_data("pretrain", src)
    images = torch.cat([s[0] for s in splits.values()])
    out = Path(args.out) if args.out else default_out_dir("pretrain", args.seed)
    with run_directory(out):
        resolved = save_resolved(out, "pretrain", args.seed, cfg)
        model = SelfDistillationPretrainer(pcfg, random_state=args.seed).fit(images)
        write_text(out / "loss.csv", model.loss_trace_csv())
        save_encoder(model.encoder_, out / "encoder.ckpt", step=model.state_.step, config=resolved)
    print(out)
    return 0


def _estimator_defaults(cls) -> dict:
    params = cls().get_params(deep=False)
    params.pop("random_state")  # always the --seed flag
    return params


def cmd_train_cls(args) -> int:
    cfg = layered_config(args, _estimator_defaults(ViTClassifier), TINY["train-cls"])
    est_cfg, src = split_config(cfg)
    est = ViTClassifier(**est_cfg, random_state=args.seed)
    splits = load_task_data("train-cls", src)
    X, y, _ = splits["train"]
    val = splits.get("val")
    out = Path(args.out) if args.out else default_out_dir("train-cls", args.seed)
    extra = {"lora_scaling": est.lora_alpha / est.lora_r} if est.regime == "lora" else {}
    with run_directory(out):
        resolved = save_resolved(out, "train-cls", args.seed, cfg, extra)
        est.fit(X, y, eval_set=(val[0], val[1]) if val and len(val[2]) else None)
        write_text(out / "history.csv", history_csv(est.history_, CLS_FIELDS))
        _save_model(est.model_, out / "model.ckpt", resolved,
                    {"classes": est.classes_.tolist(), "regime": est.regime})
        save_encoder(merge_lora(est.model_.encoder), out / "encoder.ckpt", config=resolved)
        name = eval_split(splits)
        if name:
            Xe, ye, ids = splits[name]
            proba = est.predict_proba(Xe)
            pred = est.classes_[proba.argmax(1)]
            rows = [{"image": i, "label": int(p), **{f"p{k}": repr(float(v)) for k, v in enumerate(pr)}}
                    for i, p, pr in zip(ids, pred, proba)]
            _write_csv(out / "predictions.csv", rows)
            report = classification_report(np.searchsorted(est.classes_, np.asarray(ye)), proba,
                                           est.n_classes_)
            write_text(out / "metrics.json", json.dumps({"split": name, **report}, indent=1) + "\n")
    print(out)
    return 0


def cmd_train_seg(args) -> int:
    cfg = layered_config(args, _estimator_defaults(DenseSegmenter), TINY["train-seg"])
    est_cfg, src = split_config(cfg)
    est = DenseSegmenter(**est_cfg, random_state=args.seed)
    splits = load_task_data("train-seg", src)
    X, m, _ = splits["train"]
    val = splits.get("val")
    out = Path(args.out) if args.out else default_out_dir("train-seg", args.seed)
    with run_directory(out):
        resolved = save_resolved(out, "train-seg", args.seed, cfg)
        est.fit(X, m, eval_set=(val[0], val[1]) if val and len(val[2]) else None)
        write_text(out / "history.csv", history_csv(est.history_, SEG_FIELDS))
        _save_model(est.model_, out / "model.ckpt", resolved, {"n_classes": est.n_classes_})
        save_encoder(est.model_.encoder, out / "encoder.ckpt", config=resolved)
        name = eval_split(splits)
        if name:
            Xe, me, ids = splits[name]
            pred = est.predict(Xe)
            pred_dir, truth_dir = out / "predictions", out / "truth"
            pred_dir.mkdir(exist_ok=True)
            truth_dir.mkdir(exist_ok=True)
            truth = torch.nn.functional.interpolate(
                torch.as_tensor(me)[:, None].float(), size=pred.shape[-2:], mode="nearest"
            )[:, 0].long().numpy()
            for i, p, t in zip(ids, pred, truth):
                _save_mask(pred_dir / f"{Path(i).stem}.png", p)
                _save_mask(truth_dir / f"{Path(i).stem}.png", t)
            report = seg_metrics(pred, truth, est.n_classes_)
            summary = {k: report[k] for k in ("miou", "dice", "f1")}
            write_text(out / "metrics.json", json.dumps({"split": name, **summary}, indent=1) + "\n")
    print(out)
    return 0


def cmd_train_cap(args) -> int:
    defaults = _estimator_defaults(Captioner)
    defaults.pop("decoder")
    cfg = layered_config(args, defaults, TINY["train-cap"])
    est_cfg, src = split_config(cfg)
    est = Captioner(**est_cfg, random_state=args.seed)
    splits = load_task_data("train-cap", src)
    X, caps, _ = splits["train"]
    val = splits.get("val")
    out = Path(args.out) if args.out else default_out_dir("train-cap", args.seed)
    with run_directory(out):
        resolved = save_resolved(out, "train-cap", args.seed, cfg)
        est.fit(X, caps, eval_set=(val[0], val[1]) if val and len(val[2]) else None)
        write_text(out / "history.csv", history_csv(est.history_, CAP_FIELDS))
        _save_model(est.model_, out / "model.ckpt", resolved,
                    {"tokenizer": est.tokenizer_.to_dict()})
        save_encoder(est.model_.encoder, out / "encoder.ckpt", config=resolved)
        name = eval_split(splits)
        if name:
            Xe, ce, ids = splits[name]
            preds = est.predict_with_scores(Xe)
            lines = [json.dumps({"image": i, "caption": c, "score": s}) for i, (c, s) in zip(ids, preds)]
            write_text(out / "predictions.jsonl", "\n".join(lines) + "\n")
            truth = [json.dumps({"image": i, "caption": c}) for i, c in zip(ids, ce)]
            write_text(out / "truth.jsonl", "\n".join(truth) + "\n")
            tok = est.tokenizer_
            report = caption_report([tok.split(c) for c, _ in preds], [tok.split(c) for c in ce])
            write_text(out / "metrics.json", json.dumps({"split": name, **report}, indent=1) + "\n")
    print(out)
    return 0


def cmd_eval(args) -> int:
    if args.task == "seg":
        report = eval_segmentation(Path(args.pred), Path(args.truth), args.n_classes)
    elif args.task == "cls":
        report = eval_classification(Path(args.pred), Path(args.truth), args.n_classes)
    else:
        report = eval_captions(Path(args.pred), Path(args.truth))
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.out:
        write_text(Path(args.out), text)
    sys.stdout.write(text)
    return 0


def eval_segmentation(pred_dir: Path, truth_dir: Path, n_classes=None) -> dict:
    names = sorted(p.name for p in truth_dir.glob("*.png"))
    if not names:
        raise DataError(f"no PNG masks in {truth_dir}")
    preds, truths = [], []
    for name in names:
        if not (pred_dir / name).exists():
            raise DataError(f"missing prediction {pred_dir / name}")
        preds.append(data_io._read_mask(pred_dir / name))
        truths.append(data_io._read_mask(truth_dir / name))
        if preds[-1].shape != truths[-1].shape:
            raise DataError(f"{name}: prediction and truth differ in size")
    pred = np.concatenate([p.reshape(-1) for p in preds])
    truth = np.concatenate([t.reshape(-1) for t in truths])
    n = n_classes or int(max(pred.max(), truth.max())) + 1
    rep = seg_metrics(pred, truth, n)
    return {"task": "seg", "n_images": len(names), "n_classes": n,
            **{k: rep[k] for k in ("miou", "dice", "f1")}}


def _read_csv(path: Path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError:
        raise DataError(f"missing file: {path}")


def eval_classification(pred_path: Path, truth_path: Path, n_classes=None) -> dict:
    pred = {r["image"]: r for r in _read_csv(pred_path)}
    truth = {r["image"]: int(r["label"]) for r in _read_csv(truth_path)}
    missing = set(truth) - set(pred)
    if missing:
        raise DataError(f"{len(missing)} images have no prediction, e.g. {sorted(missing)[0]}")
    keys = sorted(truth)
    y = np.array([truth[k] for k in keys])
    p = np.array([int(pred[k]["label"]) for k in keys])
    n = n_classes or int(max(y.max(), p.max())) + 1
    prob_cols = sorted((c for c in pred[keys[0]] if c.startswith("p") and c[1:].isdigit()),
                       key=lambda c: int(c[1:]))
    report = {"task": "cls", "n_samples": len(keys), "n_classes": n}
    if prob_cols:
        proba = np.array([[float(pred[k][c]) for c in prob_cols] for k in keys])
        report.update(classification_report(y, proba, max(n, proba.shape[1])))
    else:
        report.update({"acc": accuracy(y, p), "f1": macro_f1(y, p, n)})
    return report


def _read_jsonl(path: Path) -> dict:
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"missing file: {path}")
    out = {}
    for ln in lines:
        if ln.strip():
            rec = json.loads(ln)
            out[rec["image"]] = rec["caption"]
    return out


def eval_captions(pred_path: Path, truth_path: Path) -> dict:
    pred, truth = _read_jsonl(pred_path), _read_jsonl(truth_path)
    missing = set(truth) - set(pred)
    if missing:
        raise DataError(f"{len(missing)} images have no caption, e.g. {sorted(missing)[0]}")
    keys = sorted(truth)
    rep = caption_report([pred[k].lower().split() for k in keys], [truth[k].lower().split() for k in keys])
    return {"task": "cap", "n_samples": len(keys), **rep}


def cmd_embed(args) -> int:
    encoder = load_encoder(args.checkpoint)
    encoder.eval()
    if args.data:
        ds = data_io.load_dataset(args.data, args.image_size or encoder.config.img_size)
        split = ds[args.split]
        images, ids = split.images, list(split.paths)
        targets = split.targets if ds.task == "classification" else [""] * len(ids)
    else:
        synth = data_io.synth_blobs(args.n_synthetic, seed=args.data_seed,
                                    size=args.image_size or encoder.config.img_size)
        images, _ = data_io.normalize(synth.images)
        ids = [f"synthetic_{i:05d}" for i in range(len(images))]
        targets = synth.targets
    images = check_images(images, multiple_of=encoder.config.patch_size)
    with torch.no_grad():
        emb = torch.cat([encoder(images[i : i + 64]).class_token for i in range(0, len(images), 64)])
    rows = [{"id": i, "target": int(t) if str(t).lstrip("-").isdigit() else t,
             **{f"e{k}": repr(float(v)) for k, v in enumerate(e)}}
            for i, t, e in zip(ids, [x.item() if hasattr(x, "item") else x for x in targets], emb)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, rows)
    print(out)
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in args.csv or ():
        rows = _read_csv(Path(path))
        if not rows:
            raise DataError(f"{path} is empty")
        x_key = "step" if "step" in rows[0] else "epoch"
        groups = {}
        for r in rows:
            groups.setdefault(r.get("split", ""), []).append(r)
        for col in rows[0]:
            if col in (x_key, "split"):
                continue
            fig, ax = plt.subplots(figsize=(5, 3.2))
            for split, rs in groups.items():
                xs = [float(r[x_key]) for r in rs if r[col] not in ("", "nan")]
                ys = [float(r[col]) for r in rs if r[col] not in ("", "nan")]
                ax.plot(xs, ys, label=split or None)
            ax.set_xlabel(x_key)
            ax.set_ylabel(col)
            if len(groups) > 1:
                ax.legend()
            fig.tight_layout()
            target = out / f"{Path(path).stem}_{col}.png"
            fig.savefig(target, dpi=100)
            plt.close(fig)
            written.append(target)
    if args.image:
        if not args.mask:
            raise ConfigError("--image needs --mask for an overlay")
        img = data_io._read_image(Path(args.image))[0]
        mask = data_io._read_mask(Path(args.mask))
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(img, cmap="gray")
        ax.imshow(np.ma.masked_where(mask == 0, mask), cmap="autumn", alpha=0.5)
        ax.axis("off")
        target = out / f"overlay_{Path(args.image).stem}.png"
        fig.savefig(target, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(target)
    if not written:
        raise ConfigError("nothing to plot: pass --csv and/or --image/--mask")
    for w in written:
        print(w)
    return 0


def cmd_synth(args) -> int:
    task = args.task
    if task == "classification":
        synth = data_io.synth_blobs(args.n, n_classes=args.n_classes, seed=args.seed)
    elif task == "segmentation":
        synth = data_io.synth_squares(args.n, seed=args.seed)
    else:
        synth = data_io.synth_shapes_captions(args.n, seed=args.seed)
    splits = synth.split((0.5, 0.25, 0.25))
    n_classes = args.n_classes if task == "classification" else (2 if task == "segmentation" else None)
    print(data_io.write_manifest(args.out, task, splits, n_classes))
    return 0


def cmd_convert(args) -> int:
    print(data_io.convert_medmnist(args.npz, args.out))
    return 0


# --------------------------------------------------------------------------
# helpers


def _save_model(model, path, config, meta):
    save_checkpoint(ParameterStore.from_module(model), path, config=config, meta=meta)


def _save_mask(path: Path, mask):
    from PIL import Image

    Image.fromarray(np.asarray(mask, dtype=np.uint8)).save(path)


def _write_csv(path: Path, rows: list[dict]):
    if not rows:
        raise DataError(f"nothing to write to {path}")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radfm", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def training(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON or key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help=f"run directory (default ${OUTPUT_ROOT_ENV}/<command>-seed<seed>)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--data", help="dataset manifest; synthetic data when omitted")
        p.add_argument("--epochs", type=int)
        p.set_defaults(func=func)
        return p

    training("pretrain", cmd_pretrain, "self-distillation pretraining")
    p = training("train-cls", cmd_train_cls, "classification fine-tuning")
    p.add_argument("--regime", choices=("full", "head_only", "lora"))
    p.add_argument("--lora-r", type=int)
    p.add_argument("--lora-alpha", type=float)
    p.add_argument("--encoder", help="preset name or encoder checkpoint")
    p = training("train-seg", cmd_train_seg, "frozen-encoder segmentation")
    p.add_argument("--encoder")
    p = training("train-cap", cmd_train_cap, "frozen-encoder captioning")
    p.add_argument("--encoder")

    p = sub.add_parser("eval", help="score predictions against references")
    p.add_argument("--task", choices=("seg", "cls", "cap"), required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="export class-token embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--image-size", type=int)
    p.add_argument("--n-synthetic", type=int, default=32)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("plot", help="render metric CSVs and mask overlays to PNG")
    p.add_argument("--csv", action="append")
    p.add_argument("--image")
    p.add_argument("--mask")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("synth", help="write a synthetic dataset with a manifest")
    p.add_argument("--task", choices=("classification", "segmentation", "captioning"), required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--n-classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert a MedMNIST-style .npz into a manifest")
    p.add_argument("npz")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RadfmError as exc:
        print(f"radfm: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except (TypeError, ValueError) as exc:
        # bad values for known keys surface from constructors as TypeError/ValueError
        print(f"radfm: config error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
