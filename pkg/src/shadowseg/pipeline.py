"""Operational shell: config files, dataset ingestion, inference, CLI.

Config files are flat ``key = value`` text with an exhaustive key registry;
unknown keys are errors so drift never passes silently. Post-processing is
an external-command hook fed probability maps through files, keeping heavy
refiners (e.g. dense CRFs) out of process.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import (BackboneConfig, EncoderAdapter, build_encoder,
                       encode_text, toy_config)
from .errors import (AssetMissingError, CheckpointMismatchError,
                     ConfigurationError, InputError, ShadowSegError)
from .hardcase import (DEFAULT_FRACTION, DEFAULT_PERCENTILES, rank_and_select,
                       ranking_to_csv)
from .metrics import (MetricReport, REPORT_CSV_COLUMNS, evaluate_dataset,
                      format_report_table, reports_to_csv)
from .model import ShadowHead
from .objectives import LossConfig, shadow_ratio
from .trainer import (Checkpoint, TrainConfig, TrainState, build_optimizer,
                      fit, loss_log_csv, snapshot_checkpoint)

logger = logging.getLogger("shadowseg")

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

DEFAULT_PROMPTS = (
    "a photo of a shadow",
    "a dark shadow cast on the ground",
    "shadow region",
)


@dataclass
class DatasetRecord:
    image_id: str
    image_path: str
    mask_path: str | None = None
    cached_shadow_ratio: float | None = None


@dataclass
class RunConfig:
    backbone: BackboneConfig
    train: TrainConfig
    loss: LossConfig
    encoder_kind: str = "toy"
    image_weights: str | None = None
    text_weights: str | None = None
    hidden_width: int = 16
    scale_init: float = 10.0
    prompts: tuple[str, ...] = DEFAULT_PROMPTS
    data_root: str | None = None
    output_dir: str = "."
    postproc_command: str | None = None
    threshold: float = 0.5
    dark_fraction: float | None = None


def _parse_int(s): return int(s)
def _parse_float(s): return float(s)
def _parse_str(s): return s
def _parse_int_list(s): return tuple(int(x) for x in s.replace(",", " ").split())
def _parse_prompts(s):
    prompts = tuple(p.strip() for p in s.split("|") if p.strip())
    if not prompts:
        raise ConfigurationError("prompts must contain at least one non-empty entry")
    return prompts


# key -> (parser, default). None defaults mean "unset".
CONFIG_KEYS = {
    "backbone.kind": (_parse_str, "toy"),
    "backbone.image_size": (_parse_int, 64),
    "backbone.patch_size": (_parse_int, 8),
    "backbone.feature_dim": (_parse_int, 32),
    "backbone.text_dim": (_parse_int, 24),
    "backbone.selected_layers": (_parse_int_list, (1, 2, 3, 4)),
    "backbone.shallow_layer": (_parse_int, 0),
    "backbone.seed": (_parse_int, 0),
    "backbone.weights": (_parse_str, None),
    "text_encoder.weights": (_parse_str, None),
    "model.hidden_width": (_parse_int, 16),
    "model.scale_init": (_parse_float, 10.0),
    "loss.background_scale": (_parse_float, 1.0),
    "loss.eps": (_parse_float, 1e-6),
    "loss.ratio_shift": (_parse_float, 0.05),
    "loss.ratio_power": (_parse_float, 0.5),
    "loss.ratio_weight": (_parse_float, 0.25),
    "loss.smooth_l1_beta": (_parse_float, 1.0),
    "loss.class_weight_clamp_min": (_parse_float, 0.0),
    "loss.class_weight_clamp_max": (_parse_float, 50.0),
    "train.total_iters": (_parse_int, 500),
    "train.batch_size": (_parse_int, 4),
    "train.base_lr": (_parse_float, 5e-3),
    "train.lr_power": (_parse_float, 0.9),
    "train.momentum": (_parse_float, 0.9),
    "train.weight_decay": (_parse_float, 5e-4),
    "train.seed": (_parse_int, 0),
    "train.checkpoint_every": (_parse_int, 500),
    "data.root": (_parse_str, None),
    "output.dir": (_parse_str, "."),
    "postproc.command": (_parse_str, None),
    "prompts": (_parse_prompts, DEFAULT_PROMPTS),
    "eval.threshold": (_parse_float, 0.5),
    "eval.dark_fraction": (_parse_float, None),
}


def parse_config_text(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno} is not key = value: {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"unknown config key {key!r} (line {lineno})")
        if key in values:
            raise ConfigurationError(f"duplicate config key {key!r} (line {lineno})")
        try:
            values[key] = CONFIG_KEYS[key][0](value)
        except ShadowSegError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"bad value for {key!r}: {value!r} ({exc})")

    def get(key):
        return values.get(key, CONFIG_KEYS[key][1])

    backbone = BackboneConfig(
        image_size=get("backbone.image_size"),
        patch_size=get("backbone.patch_size"),
        feature_dim=get("backbone.feature_dim"),
        text_dim=get("backbone.text_dim"),
        selected_layers=get("backbone.selected_layers"),
        shallow_layer=get("backbone.shallow_layer"),
        seed=get("backbone.seed"),
    )
    train = TrainConfig(
        total_iters=get("train.total_iters"),
        batch_size=get("train.batch_size"),
        base_lr=get("train.base_lr"),
        lr_power=get("train.lr_power"),
        momentum=get("train.momentum"),
        weight_decay=get("train.weight_decay"),
        seed=get("train.seed"),
        checkpoint_every=get("train.checkpoint_every"),
    )
    loss = LossConfig(
        background_scale=get("loss.background_scale"),
        eps=get("loss.eps"),
        ratio_shift=get("loss.ratio_shift"),
        ratio_power=get("loss.ratio_power"),
        ratio_weight=get("loss.ratio_weight"),
        smooth_l1_beta=get("loss.smooth_l1_beta"),
        total_iters=max(get("train.total_iters"), 1),
        class_weight_clamp=(get("loss.class_weight_clamp_min"),
                            get("loss.class_weight_clamp_max")),
    )
    cfg = RunConfig(
        backbone=backbone, train=train, loss=loss,
        encoder_kind=get("backbone.kind"),
        image_weights=get("backbone.weights"),
        text_weights=get("text_encoder.weights"),
        hidden_width=get("model.hidden_width"),
        scale_init=get("model.scale_init"),
        prompts=get("prompts"),
        data_root=get("data.root"),
        output_dir=get("output.dir"),
        postproc_command=get("postproc.command"),
        threshold=get("eval.threshold"),
        dark_fraction=get("eval.dark_fraction"),
    )
    if cfg.data_root is not None and not Path(cfg.data_root).is_dir():
        raise ConfigurationError(f"data.root does not exist: {cfg.data_root}")
    for path, what in ((cfg.image_weights, "image encoder weights"),
                       (cfg.text_weights, "text encoder weights")):
        if path is not None and not Path(path).is_file():
            raise AssetMissingError(path, what)
    return cfg


def parse_config_file(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


# ---------------------------------------------------------------------------
# dataset ingestion and image IO

def load_dataset(root, require_masks: bool = True) -> list[DatasetRecord]:
    """Scan an ``images/`` (+ ``masks/``) tree into records sorted by id."""
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise InputError(f"dataset root lacks an images/ directory: {root}")
    masks_dir = root / "masks"
    records = []
    missing = []
    for path in sorted(images_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        mask_path = masks_dir / f"{path.stem}.png"
        if mask_path.is_file():
            records.append(DatasetRecord(path.stem, str(path), str(mask_path)))
        elif require_masks:
            missing.append(path.stem)
        else:
            records.append(DatasetRecord(path.stem, str(path), None))
    if missing:
        raise InputError(f"images without masks: {', '.join(missing)}")
    records.sort(key=lambda r: r.image_id)
    if not records:
        logger.warning("no usable images found under %s", root)
    logger.info("loaded %d records from %s", len(records), root)
    return records


def load_image(path, image_size: int | None = None) -> np.ndarray:
    """8-bit RGB file -> [0, 1] float array, bilinearly resized when asked."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if image_size is not None and img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.BILINEAR)
            return np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise InputError(f"unreadable image {path}: {exc}")


def load_mask(path, image_size: int | None = None) -> np.ndarray:
    """Mask file -> {0, 1} uint8 array; binarized at pixel value > 127."""
    try:
        with Image.open(path) as img:
            img = img.convert("L")
            if image_size is not None and img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.NEAREST)
            return (np.asarray(img) > 127).astype(np.uint8)
    except (OSError, ValueError) as exc:
        raise InputError(f"unreadable mask {path}: {exc}")


def save_mask_png(mask: np.ndarray, path) -> None:
    """8-bit single-channel export, 255 = shadow."""
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def save_probability(prob: np.ndarray, png_path, sidecar_path=None) -> None:
    """8-bit quantized probability PNG plus optional lossless float sidecar."""
    Image.fromarray((np.clip(prob, 0, 1) * 255).round().astype(np.uint8)).save(png_path)
    if sidecar_path is not None:
        np.save(sidecar_path, np.asarray(prob, dtype=np.float64))


def load_training_arrays(records: list[DatasetRecord], image_size: int):
    dataset = []
    for rec in records:
        if rec.mask_path is None:
            raise InputError(f"record {rec.image_id} has no mask")
        image = load_image(rec.image_path, image_size)
        mask = load_mask(rec.mask_path, image_size)
        rec.cached_shadow_ratio = shadow_ratio(torch.as_tensor(mask))
        dataset.append((image, mask))
    return dataset


# ---------------------------------------------------------------------------
# inference

def apply_postproc(prob: np.ndarray, command: str) -> np.ndarray:
    """Run an external command on the probability map via files.

    The command gets two extra arguments, the input and output ``.npy``
    paths, and must write a map of the same shape with values in [0, 1].
    """
    with tempfile.TemporaryDirectory(prefix="shadowseg_postproc_") as tmp:
        in_path = str(Path(tmp) / "prob_in.npy")
        out_path = str(Path(tmp) / "prob_out.npy")
        np.save(in_path, np.asarray(prob, dtype=np.float64))
        argv = shlex.split(command) + [in_path, out_path]
        result = subprocess.run(argv, capture_output=True, text=True)
        if result.returncode != 0:
            raise InputError(
                f"postproc command failed ({result.returncode}): {result.stderr.strip()}"
            )
        try:
            refined = np.load(out_path)
        except (OSError, ValueError) as exc:
            raise InputError(f"postproc produced no readable output: {exc}")
    if refined.shape != np.asarray(prob).shape:
        raise InputError(
            f"postproc changed the map shape: {refined.shape} != {np.asarray(prob).shape}"
        )
    return np.asarray(refined, dtype=np.float64)


def run_config_from_checkpoint(ckpt: Checkpoint, **overrides) -> RunConfig:
    cfg = ckpt.config
    run_cfg = RunConfig(
        backbone=BackboneConfig(**cfg["backbone"]),
        train=TrainConfig(**cfg["train"]),
        loss=LossConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in cfg["loss"].items()}),
        encoder_kind=cfg.get("encoder_kind", "toy"),
        image_weights=cfg.get("image_weights"),
        text_weights=cfg.get("text_weights"),
        hidden_width=cfg["hidden_width"],
        scale_init=cfg.get("scale_init", 10.0),
        prompts=tuple(cfg["prompts"]),
        postproc_command=cfg.get("postproc_command"),
        threshold=cfg.get("threshold", 0.5),
    )
    return replace(run_cfg, **overrides) if overrides else run_cfg


def build_run_encoder(run_cfg: RunConfig) -> EncoderAdapter:
    return build_encoder(run_cfg.backbone, run_cfg.encoder_kind,
                         run_cfg.image_weights, run_cfg.text_weights)


def _backbone_as_dict(backbone: BackboneConfig) -> dict:
    from dataclasses import asdict

    d = asdict(backbone)
    d["selected_layers"] = tuple(d["selected_layers"])
    return d


def head_from_checkpoint(ckpt: Checkpoint, run_cfg: RunConfig) -> ShadowHead:
    ckpt_backbone = {k: tuple(v) if isinstance(v, list) else v
                     for k, v in ckpt.config["backbone"].items()}
    if ckpt_backbone != _backbone_as_dict(run_cfg.backbone):
        raise CheckpointMismatchError("checkpoint backbone config differs from run config")
    head = ShadowHead(run_cfg.backbone, hidden_width=run_cfg.hidden_width,
                      scale_init=run_cfg.scale_init, seed=run_cfg.train.seed)
    head.load_state_dict(ckpt.head_state)
    return head


def infer(image: np.ndarray, ckpt: Checkpoint, run_cfg: RunConfig,
          encoder: EncoderAdapter | None = None):
    """Full forward pass to a binary mask and its probability map.

    The optional external post-processing hook transforms the probability
    map before thresholding; ``none`` (unset) keeps the raw sigmoid output.
    """
    if encoder is None:
        encoder = build_run_encoder(run_cfg)
    head = head_from_checkpoint(ckpt, run_cfg)
    text = encode_text(list(run_cfg.prompts), run_cfg.backbone, encoder)
    with torch.no_grad():
        bundle = head(encoder.encode_image(image), text)
        prob = torch.sigmoid(bundle.final_logits).numpy()
    if run_cfg.postproc_command:
        prob = apply_postproc(prob, run_cfg.postproc_command)
    mask = (prob > run_cfg.threshold).astype(np.uint8)
    return mask, prob


# ---------------------------------------------------------------------------
# CLI

def _cmd_train(args) -> int:
    run_cfg = parse_config_file(args.config)
    if args.data:
        run_cfg = replace(run_cfg, data_root=args.data)
    if args.out:
        run_cfg = replace(run_cfg, output_dir=args.out)
    if run_cfg.data_root is None:
        raise ConfigurationError("no dataset: set data.root in the config or pass --data")
    out_dir = Path(run_cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = load_dataset(run_cfg.data_root, require_masks=True)
    if not records:
        raise InputError(f"no training pairs under {run_cfg.data_root}")
    dataset = load_training_arrays(records, run_cfg.backbone.image_size)
    encoder = build_run_encoder(run_cfg)
    text = encode_text(list(run_cfg.prompts), run_cfg.backbone, encoder)
    head = ShadowHead(run_cfg.backbone, hidden_width=run_cfg.hidden_width,
                      scale_init=run_cfg.scale_init, seed=run_cfg.train.seed)
    state = TrainState(head=head, encoder=encoder, text=text,
                       optimizer=build_optimizer(head, run_cfg.train),
                       train_cfg=run_cfg.train, loss_cfg=run_cfg.loss)
    extra = {
        "encoder_kind": run_cfg.encoder_kind,
        "image_weights": run_cfg.image_weights,
        "text_weights": run_cfg.text_weights,
        "scale_init": run_cfg.scale_init,
        "postproc_command": run_cfg.postproc_command,
        "threshold": run_cfg.threshold,
    }
    if run_cfg.train.total_iters == 0:
        ckpt = snapshot_checkpoint(state, 0, extra)
        ckpt.save(out_dir / "checkpoint_final.pt")
        (out_dir / "loss_log.csv").write_text(loss_log_csv([]))
    else:
        rows: list = []
        ckpt = fit(state, dataset, out_dir=str(out_dir), log_rows=rows,
                   extra_config=extra)
        print(f"final total loss: {rows[-1][-1]:.6f}")
    print(f"checkpoint: {out_dir / 'checkpoint_final.pt'}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    run_cfg = run_config_from_checkpoint(ckpt)
    encoder = build_run_encoder(run_cfg)
    head = head_from_checkpoint(ckpt, run_cfg)
    text = encode_text(list(run_cfg.prompts), run_cfg.backbone, encoder)
    records = load_dataset(args.data, require_masks=True)
    if not records:
        raise InputError(f"no evaluation pairs under {args.data}")
    size = run_cfg.backbone.image_size
    triples = []
    for rec in records:
        image = load_image(rec.image_path, size)
        gt = load_mask(rec.mask_path, size)
        with torch.no_grad():
            bundle = head(encoder.encode_image(image), text)
            prob = torch.sigmoid(bundle.final_logits).numpy()
        if run_cfg.postproc_command:
            prob = apply_postproc(prob, run_cfg.postproc_command)
        pred = (prob > run_cfg.threshold).astype(np.uint8)
        triples.append((pred, gt, image))
    reports = evaluate_dataset(triples, dark_fraction=args.dark_frac)
    table = format_report_table(reports)
    print(table, end="")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(reports_to_csv(reports))
        (out_dir / "report.txt").write_text(table)
        print(f"reports written to {out_dir}")
    return 0


def _cmd_infer(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    overrides = {}
    if args.postproc:
        overrides["postproc_command"] = args.postproc
    run_cfg = run_config_from_checkpoint(ckpt, **overrides)
    image = load_image(args.image, run_cfg.backbone.image_size)
    mask, prob = infer(image, ckpt, run_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mask_png(mask, out)
    sidecar = out.with_suffix(out.suffix + ".prob.npy") if args.prob_sidecar else None
    save_probability(prob, out.with_suffix(out.suffix + ".prob.png"), sidecar)
    print(f"mask: {out}")
    return 0


def _cmd_hardcase(args) -> int:
    records = load_dataset(args.data, require_masks=True)
    if not records:
        raise InputError(f"no image/mask pairs under {args.data}")
    samples = []
    for rec in records:
        image = load_image(rec.image_path)
        gt = load_mask(rec.mask_path)
        if gt.shape != image.shape[:2]:
            raise InputError(
                f"{rec.image_id}: mask shape {gt.shape} != image shape {image.shape[:2]}"
            )
        samples.append((rec.image_id, image, gt))
    percentiles = tuple(float(p) for p in args.percentiles.split(","))
    ranking = rank_and_select(samples, percentiles=percentiles, fraction=args.frac)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "hardcase_ranking.csv").write_text(ranking_to_csv(ranking))
    (out_dir / "hardcase_selected.txt").write_text(
        "".join(f"{i}\n" for i in ranking.selected_ids()))
    print(f"selected {len(ranking.selected_ids())} of {len(ranking.entries)} images")
    print(f"ranking: {out_dir / 'hardcase_ranking.csv'}")
    return 0


def _cmd_report(args) -> int:
    path = Path(getattr(args, "in"))
    if not path.is_file():
        raise InputError(f"report input not found: {path}")
    reports = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or tuple(reader.fieldnames) != REPORT_CSV_COLUMNS:
            raise InputError(f"unrecognized report columns in {path}")
        for row in reader:
            reports.append(MetricReport(
                ber=float(row["ber"]) if row["ber"] else None,
                ber_shadow=float(row["ber_shadow"]) if row["ber_shadow"] else None,
                ber_nonshadow=float(row["ber_nonshadow"]) if row["ber_nonshadow"] else None,
                fpr=float(row["fpr"]) if row["fpr"] else None,
                precision=float(row["precision"]) if row["precision"] else None,
                pixel_count=int(row["pixel_count"]),
                region_tag=row["region"],
            ))
    if args.format == "csv":
        print(reports_to_csv(reports), end="")
    else:
        print(format_report_table(reports), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shadowseg",
        description="Shadow detection with frozen encoders and language-guided heads.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the head on an images/+masks/ tree")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dark-frac", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="predict a mask for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--postproc", default=None)
    p.add_argument("--prob-sidecar", action="store_true")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("hardcase", help="construct the hard-case subset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frac", type=float, default=DEFAULT_FRACTION)
    p.add_argument("--percentiles",
                   default=",".join(str(p) for p in DEFAULT_PERCENTILES))
    p.set_defaults(func=_cmd_hardcase)

    p = sub.add_parser("report", help="re-render an eval metrics CSV")
    p.add_argument("--in", required=True)
    p.add_argument("--format", choices=("csv", "table"), default="table")
    p.set_defaults(func=_cmd_report)

    return parser


def run_cli(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ShadowSegError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
