"""Command-line interface: stage subcommands, cross-validation, ablations.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence. Artifact paths given relative resolve against the
SERFT_ARTIFACT_ROOT environment variable when it is set.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .corpus import write_manifest
from .encoder import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, SerftError, TrainingDivergedError
from .evaluation import compute_metrics, confusion_from_predictions
from .frame_finetune import MissingLabelsError, train_stage2
from .margin_finetune import predict_emotions, train_stage3
from .multitask import STAGE1_LOG_FIELDS, JointLossConfig, train_stage1
from .pipeline import (
    AblationGrid,
    FINETUNE_MODE_MAP,
    PipelineConfig,
    load_config,
    resolve_artifact_dir,
    run_ablation,
    run_pipeline,
    write_config,
)
from .pseudolabels import (
    extract_pseudo_labels,
    read_pseudo_labels,
    write_codebooks,
    write_pseudo_labels,
)
from .training import write_log_csv

import numpy as np

logger = logging.getLogger(__name__)


def _load_cfg(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "manifest", None):
        cfg.manifest = Path(args.manifest)
        cfg.synthetic = None
    cfg.validate()
    return cfg


def _records(cfg: PipelineConfig):
    records = cfg.load_corpus()
    if not records:
        raise DataError("corpus is empty")
    return records


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if cfg.synthetic is None:
        raise ConfigError("synth needs a synthetic corpus spec (no manifest)")
    out_dir = resolve_artifact_dir(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = cfg.load_corpus()
    write_manifest(records, out_dir / "manifest.tsv", out_dir / "features")
    write_config(cfg, out_dir / "config.txt")
    print(f"wrote {len(records)} utterances to {out_dir / 'manifest.tsv'}")
    return 0


def cmd_train_stage1(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    records = _records(cfg)
    alpha = cfg.joint.alpha_e if cfg.use_gender else 1.0
    ckpt, log = train_stage1(
        records,
        hp=cfg.hyperparams(cfg.stage1_epochs, cfg.seed),
        loss_cfg=JointLossConfig(alpha_e=alpha),
        encoder_config=cfg.encoder,
        bilstm_hidden=cfg.bilstm_hidden,
        embed_dim=cfg.embed_dim,
    )
    out = resolve_artifact_dir(args.out)
    save_checkpoint(ckpt, out)
    if args.log:
        write_log_csv(resolve_artifact_dir(args.log), log, STAGE1_LOG_FIELDS)
    print(f"stage1 checkpoint written to {out} ({log[-1]['L_Total']:.4f} final loss)")
    return 0


def cmd_extract_gmp(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    records = _records(cfg)
    ckpt = load_checkpoint(resolve_artifact_dir(args.checkpoint))
    codebooks, labelsets = extract_pseudo_labels(records, ckpt, cfg.cluster)
    out_dir = resolve_artifact_dir(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_codebooks(codebooks, out_dir / "codebooks.cbk")
    label_dir = out_dir / "gmp"
    label_dir.mkdir(exist_ok=True)
    for utt_id, labelset in labelsets.items():
        write_pseudo_labels(labelset, label_dir / f"{utt_id}.gmp")
    print(f"wrote codebooks and {len(labelsets)} label files to {out_dir}")
    return 0


def cmd_train_stage2(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    records = _records(cfg)
    ckpt = load_checkpoint(resolve_artifact_dir(args.checkpoint))
    label_dir = resolve_artifact_dir(args.gmp_dir)
    labelsets = {}
    for rec in records:
        path = label_dir / f"{rec.id}.gmp"
        if not path.exists():
            raise MissingLabelsError(f"no pseudo-label file for utterance {rec.id!r} in {label_dir}")
        labelsets[rec.id] = read_pseudo_labels(path)
    stage2_ckpt, log = train_stage2(
        records,
        labelsets,
        ckpt,
        hp=cfg.hyperparams(cfg.stage2_epochs, cfg.seed),
        mask_prob=cfg.mask_prob,
        span_length=cfg.span_length,
    )
    out = resolve_artifact_dir(args.out)
    save_checkpoint(stage2_ckpt, out)
    if args.log and log:
        write_log_csv(resolve_artifact_dir(args.log), log, list(log[0].keys()))
    print(f"stage2 checkpoint written to {out}")
    return 0


def cmd_train_stage3(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    records = _records(cfg)
    ckpt = load_checkpoint(resolve_artifact_dir(args.checkpoint))
    stage3_ckpt, log = train_stage3(
        records,
        ckpt,
        ams_cfg=cfg.ams,
        hp=cfg.hyperparams(cfg.stage3_epochs, cfg.seed),
        mode=FINETUNE_MODE_MAP[cfg.finetune_mode],
        bilstm_hidden=cfg.bilstm_hidden,
        embed_dim=cfg.embed_dim,
    )
    out = resolve_artifact_dir(args.out)
    save_checkpoint(stage3_ckpt, out)
    if args.log and log:
        write_log_csv(resolve_artifact_dir(args.log), log, list(log[0].keys()))
    print(f"stage3 checkpoint written to {out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    records = _records(cfg)
    ckpt = load_checkpoint(resolve_artifact_dir(args.checkpoint))
    preds = predict_emotions(records, ckpt)
    y_true = np.array([r.emotion.value for r in records], dtype=np.int64)
    summary = compute_metrics(confusion_from_predictions(y_true, preds))
    line = f"UAR={summary.uar:.4f} WAR={summary.war:.4f} n={len(records)}"
    print(line)
    if args.report:
        Path(resolve_artifact_dir(args.report)).write_text(line + "\n", encoding="utf-8")
    return 0


def cmd_crossval(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    report = run_pipeline(cfg, args.out_dir)
    print(report.summary_line())
    return 0


def _parse_list(text: str, conv):
    return [conv(part.strip()) for part in text.split(",") if part.strip()]


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    grid = AblationGrid(
        use_gender=[v == "true" for v in _parse_list(args.use_gender, str)] if args.use_gender else None,
        finetune_mode=_parse_list(args.finetune_modes, str) if args.finetune_modes else None,
        tap=_parse_list(args.taps, int) if args.taps else None,
        seeds=_parse_list(args.seeds, int),
    )
    rows = run_ablation(grid, cfg, args.out_dir)
    for row in rows:
        print(row.as_line())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="serft", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="INFO-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--config", help="key=value config file (defaults apply otherwise)")
        return p

    p = add("synth", cmd_synth, "generate a synthetic corpus (manifest + feature files)")
    p.add_argument("--out-dir", required=True)

    for name, handler, needs in (
        ("train-stage1", cmd_train_stage1, ()),
        ("train-stage2", cmd_train_stage2, ("checkpoint", "gmp_dir")),
        ("train-stage3", cmd_train_stage3, ("checkpoint",)),
    ):
        p = add(name, handler, f"run {name.replace('-', ' ')} on a manifest corpus")
        p.add_argument("--manifest", help="overrides the config's corpus")
        p.add_argument("--out", required=True, help="output checkpoint path")
        p.add_argument("--log", help="optional training-log CSV path")
        if "checkpoint" in needs:
            p.add_argument("--checkpoint", required=True, help="upstream checkpoint")
        if "gmp_dir" in needs:
            p.add_argument("--gmp-dir", dest="gmp_dir", required=True, help="directory of .gmp files")

    p = add("extract-gmp", cmd_extract_gmp, "extract multi-scale pseudo-labels")
    p.add_argument("--manifest", help="overrides the config's corpus")
    p.add_argument("--checkpoint", required=True, help="stage1 checkpoint")
    p.add_argument("--out-dir", required=True)

    p = add("evaluate", cmd_evaluate, "score a stage3 checkpoint on a corpus")
    p.add_argument("--manifest", help="overrides the config's corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", help="optional report file")

    p = add("crossval", cmd_crossval, "run the full 5-fold pipeline")
    p.add_argument("--out-dir", help="artifact directory (omit to skip persistence)")

    p = add("ablate", cmd_ablate, "sweep pipeline variants and tabulate UAR/WAR")
    p.add_argument("--out-dir", help="artifact directory")
    p.add_argument("--use-gender", dest="use_gender", help="comma list of true/false")
    p.add_argument("--finetune-modes", dest="finetune_modes", help="comma list of hybrid_ft/ce_ft")
    p.add_argument("--taps", help="comma list of taps, e.g. --taps=-1,-2,-3")
    p.add_argument("--seeds", default="0", help="comma list of seeds per cell")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except SerftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
