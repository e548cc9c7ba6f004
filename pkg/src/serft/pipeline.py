"""End-to-end orchestration: config, per-fold stage wiring, ablations.

A pipeline run executes, independently per cross-validation fold:

    stage 1 (multi-task) -> pseudo-label extraction (train side only)
    -> stage 2 (masked frame CE) -> stage 3 (margin or plain CE)
    -> prediction on the held-out session

Pseudo-labels and codebooks are always fit on the fold's training data
only, so nothing from the held-out session leaks into the label
construction. Every artifact (three checkpoints per fold, label files,
codebooks, logs, report) is persisted with provenance hashes linking each
stage to its upstream artifact, and the chain is verified before
prediction.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path

import numpy as np

from .corpus import (
    SyntheticCorpusSpec,
    UtteranceRecord,
    generate_synthetic_corpus,
    load_manifest,
)
from .encoder import Checkpoint, EncoderConfig, checkpoint_hash, save_checkpoint
from .errors import ConfigError, DataError
from .evaluation import EvalReport, FoldSplit, run_crossval
from .frame_finetune import DEFAULT_MASK_PROB, DEFAULT_SPAN_LENGTH, train_stage2
from .margin_finetune import AMSConfig, predict_emotions, train_stage3
from .multitask import STAGE1_LOG_FIELDS, JointLossConfig, train_stage1
from .pseudolabels import ClusterConfig, extract_pseudo_labels, write_codebooks, write_pseudo_labels
from .training import TrainHyperparams, derive_seed, write_log_csv

logger = logging.getLogger(__name__)

ARTIFACT_ROOT_ENV = "SERFT_ARTIFACT_ROOT"

FINETUNE_MODE_MAP = {"hybrid_ft": "ams", "ce_ft": "ce"}


class ProvenanceError(DataError):
    """Artifact chain hashes do not line up."""


@dataclass
class PipelineConfig:
    """Everything one pipeline run needs; see ``config_defaults`` for keys."""

    synthetic: SyntheticCorpusSpec | None = None
    manifest: Path | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    joint: JointLossConfig = field(default_factory=JointLossConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    ams: AMSConfig = field(default_factory=AMSConfig)
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    freeze_encoder: bool = False
    stage1_epochs: int = 8
    stage2_epochs: int = 5
    stage3_epochs: int = 12
    mask_prob: float = DEFAULT_MASK_PROB
    span_length: int = DEFAULT_SPAN_LENGTH
    embed_dim: int = 64
    bilstm_hidden: int = 64
    use_gender: bool = True
    finetune_mode: str = "hybrid_ft"

    def validate(self) -> None:
        if (self.synthetic is None) == (self.manifest is None):
            raise ConfigError("exactly one of synthetic spec or manifest must be set")
        if self.synthetic is not None:
            self.synthetic.validate()
            if self.synthetic.feature_dim != self.encoder.input_dim:
                raise ConfigError(
                    f"corpus feature_dim {self.synthetic.feature_dim} != encoder input_dim {self.encoder.input_dim}"
                )
        self.encoder.validate()
        self.joint.validate()
        self.cluster.validate()
        self.ams.validate()
        if self.finetune_mode not in FINETUNE_MODE_MAP:
            raise ConfigError(
                f"finetune_mode must be one of {sorted(FINETUNE_MODE_MAP)}, got {self.finetune_mode!r}"
            )
        for name in ("stage1_epochs", "stage2_epochs", "stage3_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr and batch_size must be positive")

    def hyperparams(self, epochs: int, seed: int) -> TrainHyperparams:
        return TrainHyperparams(
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=epochs,
            seed=seed,
            freeze_encoder=self.freeze_encoder,
        )

    def load_corpus(self) -> list[UtteranceRecord]:
        if self.synthetic is not None:
            return generate_synthetic_corpus(self.synthetic)
        assert self.manifest is not None
        return load_manifest(self.manifest)


def config_defaults() -> dict[str, str]:
    """Documented key=value defaults for the config-file format."""
    return {
        "corpus.manifest": "",
        "corpus.n_utterances": "400",
        "corpus.n_speakers": "10",
        "corpus.feature_dim": "40",
        "corpus.frames_min": "20",
        "corpus.frames_max": "40",
        "corpus.separability": "6.0",
        "corpus.seed": "1",
        "encoder.input_dim": "40",
        "encoder.n_layers": "4",
        "encoder.model_dim": "64",
        "encoder.n_heads": "4",
        "encoder.ff_dim": "128",
        "encoder.dropout": "0.0",
        "encoder.seed": "0",
        "joint.alpha_e": "0.9",
        "gmp.scales": "8,32,128",
        "gmp.tap": "-3",
        "gmp.max_iters": "100",
        "gmp.tol": "1e-4",
        "ams.m": "0.2",
        "ams.s": "30.0",
        "train.lr": "1e-3",
        "train.batch_size": "64",
        "train.seed": "0",
        "train.freeze_encoder": "false",
        "stage1.epochs": "8",
        "stage2.epochs": "5",
        "stage3.epochs": "12",
        "stage2.mask_prob": str(DEFAULT_MASK_PROB),
        "stage2.span_length": str(DEFAULT_SPAN_LENGTH),
        "head.embed_dim": "64",
        "head.bilstm_hidden": "64",
        "mode.use_gender": "true",
        "mode.finetune_mode": "hybrid_ft",
    }


def _parse_bool(value: str, key: str) -> bool:
    low = value.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def parse_config_text(text: str) -> PipelineConfig:
    """Parse ``section.key=value`` lines into a PipelineConfig.

    Unknown keys are rejected; omitted keys take the documented defaults.
    Lines starting with ``#`` and blank lines are ignored.
    """
    values = config_defaults()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in values:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return config_from_values(values)


def config_from_values(values: dict[str, str]) -> PipelineConfig:
    try:
        manifest = Path(values["corpus.manifest"]) if values["corpus.manifest"] else None
        synthetic = None
        if manifest is None:
            synthetic = SyntheticCorpusSpec(
                n_utterances=int(values["corpus.n_utterances"]),
                n_speakers=int(values["corpus.n_speakers"]),
                feature_dim=int(values["corpus.feature_dim"]),
                frame_range=(int(values["corpus.frames_min"]), int(values["corpus.frames_max"])),
                separability=float(values["corpus.separability"]),
                seed=int(values["corpus.seed"]),
            )
        cfg = PipelineConfig(
            synthetic=synthetic,
            manifest=manifest,
            encoder=EncoderConfig(
                input_dim=int(values["encoder.input_dim"]),
                n_layers=int(values["encoder.n_layers"]),
                model_dim=int(values["encoder.model_dim"]),
                n_heads=int(values["encoder.n_heads"]),
                ff_dim=int(values["encoder.ff_dim"]),
                dropout=float(values["encoder.dropout"]),
                seed=int(values["encoder.seed"]),
            ),
            joint=JointLossConfig(alpha_e=float(values["joint.alpha_e"])),
            cluster=ClusterConfig(
                scales=tuple(int(s) for s in values["gmp.scales"].split(",") if s.strip()),
                tap=int(values["gmp.tap"]),
                max_iters=int(values["gmp.max_iters"]),
                tol=float(values["gmp.tol"]),
            ),
            ams=AMSConfig(m=float(values["ams.m"]), s=float(values["ams.s"])),
            lr=float(values["train.lr"]),
            batch_size=int(values["train.batch_size"]),
            seed=int(values["train.seed"]),
            freeze_encoder=_parse_bool(values["train.freeze_encoder"], "train.freeze_encoder"),
            stage1_epochs=int(values["stage1.epochs"]),
            stage2_epochs=int(values["stage2.epochs"]),
            stage3_epochs=int(values["stage3.epochs"]),
            mask_prob=float(values["stage2.mask_prob"]),
            span_length=int(values["stage2.span_length"]),
            embed_dim=int(values["head.embed_dim"]),
            bilstm_hidden=int(values["head.bilstm_hidden"]),
            use_gender=_parse_bool(values["mode.use_gender"], "mode.use_gender"),
            finetune_mode=values["mode.finetune_mode"],
        )
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path: Path | str) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)


def write_config(cfg: PipelineConfig, path: Path | str) -> None:
    """Serialize a config back to the key=value format."""
    values = config_defaults()
    if cfg.manifest is not None:
        values["corpus.manifest"] = str(cfg.manifest)
    if cfg.synthetic is not None:
        values.update(
            {
                "corpus.n_utterances": str(cfg.synthetic.n_utterances),
                "corpus.n_speakers": str(cfg.synthetic.n_speakers),
                "corpus.feature_dim": str(cfg.synthetic.feature_dim),
                "corpus.frames_min": str(cfg.synthetic.frame_range[0]),
                "corpus.frames_max": str(cfg.synthetic.frame_range[1]),
                "corpus.separability": str(cfg.synthetic.separability),
                "corpus.seed": str(cfg.synthetic.seed),
            }
        )
    values.update(
        {
            "encoder.input_dim": str(cfg.encoder.input_dim),
            "encoder.n_layers": str(cfg.encoder.n_layers),
            "encoder.model_dim": str(cfg.encoder.model_dim),
            "encoder.n_heads": str(cfg.encoder.n_heads),
            "encoder.ff_dim": str(cfg.encoder.ff_dim),
            "encoder.dropout": str(cfg.encoder.dropout),
            "encoder.seed": str(cfg.encoder.seed),
            "joint.alpha_e": str(cfg.joint.alpha_e),
            "gmp.scales": ",".join(str(k) for k in cfg.cluster.scales),
            "gmp.tap": str(cfg.cluster.tap),
            "gmp.max_iters": str(cfg.cluster.max_iters),
            "gmp.tol": str(cfg.cluster.tol),
            "ams.m": str(cfg.ams.m),
            "ams.s": str(cfg.ams.s),
            "train.lr": str(cfg.lr),
            "train.batch_size": str(cfg.batch_size),
            "train.seed": str(cfg.seed),
            "train.freeze_encoder": str(cfg.freeze_encoder).lower(),
            "stage1.epochs": str(cfg.stage1_epochs),
            "stage2.epochs": str(cfg.stage2_epochs),
            "stage3.epochs": str(cfg.stage3_epochs),
            "stage2.mask_prob": str(cfg.mask_prob),
            "stage2.span_length": str(cfg.span_length),
            "head.embed_dim": str(cfg.embed_dim),
            "head.bilstm_hidden": str(cfg.bilstm_hidden),
            "mode.use_gender": str(cfg.use_gender).lower(),
            "mode.finetune_mode": cfg.finetune_mode,
        }
    )
    lines = [f"{k}={v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve_artifact_dir(out_dir: Path | str) -> Path:
    """Resolve a run directory, honoring the artifact-root env override."""
    out_dir = Path(out_dir)
    root = os.environ.get(ARTIFACT_ROOT_ENV)
    if root and not out_dir.is_absolute():
        out_dir = Path(root) / out_dir
    return out_dir


def verify_fold_chain(
    stage1: Checkpoint, codebook_provenance: dict[str, str], stage2: Checkpoint, stage3: Checkpoint
) -> None:
    """Refuse artifact chains whose provenance hashes do not line up."""
    h1 = checkpoint_hash(stage1)
    if codebook_provenance.get("checkpoint_hash") != h1:
        raise ProvenanceError("codebooks were not extracted from this stage1 checkpoint")
    if stage2.metadata.get("upstream_hash") != h1:
        raise ProvenanceError("stage2 checkpoint does not descend from this stage1 checkpoint")
    if stage3.metadata.get("upstream_hash") != checkpoint_hash(stage2):
        raise ProvenanceError("stage3 checkpoint does not descend from this stage2 checkpoint")


@dataclass
class FoldArtifacts:
    fold_id: int
    stage1: Checkpoint
    stage2: Checkpoint
    stage3: Checkpoint
    codebook_provenance: dict[str, str]
    predictions: np.ndarray


def run_fold(
    fold: FoldSplit, cfg: PipelineConfig, fold_dir: Path | None = None
) -> FoldArtifacts:
    """Run all three stages on one fold's training side and predict its test side."""
    fold_seed = derive_seed(cfg.seed, "fold", fold.fold_id)
    encoder_cfg = replace(cfg.encoder, seed=derive_seed(fold_seed, "encoder"))
    if fold_dir is not None:
        fold_dir.mkdir(parents=True, exist_ok=True)

    # Stage 1: multi-task (or emotion-only when the gender task is ablated).
    alpha = cfg.joint.alpha_e if cfg.use_gender else 1.0
    stage1_ckpt, stage1_log = train_stage1(
        fold.train_records,
        hp=cfg.hyperparams(cfg.stage1_epochs, derive_seed(fold_seed, "stage1")),
        loss_cfg=JointLossConfig(alpha_e=alpha),
        encoder_config=encoder_cfg,
        bilstm_hidden=cfg.bilstm_hidden,
        embed_dim=cfg.embed_dim,
    )

    # Pseudo-labels from the fold's training data only.
    cluster_cfg = replace(cfg.cluster, seed=derive_seed(fold_seed, "cluster"))
    codebooks, labelsets = extract_pseudo_labels(fold.train_records, stage1_ckpt, cluster_cfg)

    stage2_ckpt, stage2_log = train_stage2(
        fold.train_records,
        labelsets,
        stage1_ckpt,
        hp=cfg.hyperparams(cfg.stage2_epochs, derive_seed(fold_seed, "stage2")),
        mask_prob=cfg.mask_prob,
        span_length=cfg.span_length,
    )

    stage3_ckpt, stage3_log = train_stage3(
        fold.train_records,
        stage2_ckpt,
        ams_cfg=cfg.ams,
        hp=cfg.hyperparams(cfg.stage3_epochs, derive_seed(fold_seed, "stage3")),
        mode=FINETUNE_MODE_MAP[cfg.finetune_mode],
        bilstm_hidden=cfg.bilstm_hidden,
        embed_dim=cfg.embed_dim,
    )

    verify_fold_chain(stage1_ckpt, codebooks.provenance, stage2_ckpt, stage3_ckpt)
    predictions = predict_emotions(fold.test_records, stage3_ckpt)

    if fold_dir is not None:
        save_checkpoint(stage1_ckpt, fold_dir / "stage1.ckpt")
        save_checkpoint(stage2_ckpt, fold_dir / "stage2.ckpt")
        save_checkpoint(stage3_ckpt, fold_dir / "stage3.ckpt")
        write_log_csv(fold_dir / "stage1_log.csv", stage1_log, STAGE1_LOG_FIELDS)
        if stage2_log:
            write_log_csv(fold_dir / "stage2_log.csv", stage2_log, list(stage2_log[0].keys()))
        if stage3_log:
            write_log_csv(fold_dir / "stage3_log.csv", stage3_log, list(stage3_log[0].keys()))
        write_codebooks(codebooks, fold_dir / "codebooks.cbk")
        label_dir = fold_dir / "gmp"
        label_dir.mkdir(exist_ok=True)
        for utt_id, labelset in labelsets.items():
            write_pseudo_labels(labelset, label_dir / f"{utt_id}.gmp")
        lines = [
            f"{rec.id}\t{rec.emotion.value}\t{int(pred)}"
            for rec, pred in zip(fold.test_records, predictions)
        ]
        (fold_dir / "predictions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    return FoldArtifacts(
        fold_id=fold.fold_id,
        stage1=stage1_ckpt,
        stage2=stage2_ckpt,
        stage3=stage3_ckpt,
        codebook_provenance=codebooks.provenance,
        predictions=predictions,
    )


def crossvalidate(
    records: list[UtteranceRecord], cfg: PipelineConfig, out_dir: Path | str | None = None
) -> EvalReport:
    """Run the configured pipeline independently per fold and aggregate.

    Every fold trains all stages on its own training sessions (including
    pseudo-label extraction) and predicts its held-out session.
    """
    out_path = resolve_artifact_dir(out_dir) if out_dir is not None else None

    def fold_runner(fold: FoldSplit) -> np.ndarray:
        fold_dir = out_path / f"fold_{fold.fold_id}" if out_path is not None else None
        return run_fold(fold, cfg, fold_dir).predictions

    report = run_crossval(records, fold_runner)
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "report.txt").write_text(report.to_text(), encoding="utf-8")
        logger.info("report written to %s", out_path / "report.txt")
    return report


def run_pipeline(cfg: PipelineConfig, out_dir: Path | str | None = None) -> EvalReport:
    """Full cross-validated pipeline; returns the aggregated report.

    When ``out_dir`` is given, each fold's checkpoints, label files,
    codebooks, logs, and predictions are persisted under
    ``out_dir/fold_<k>/`` along with ``config.txt`` and ``report.txt``.
    """
    cfg.validate()
    if out_dir is not None:
        out_path = resolve_artifact_dir(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        write_config(cfg, out_path / "config.txt")
    return crossvalidate(cfg.load_corpus(), cfg, out_dir)


# --------------------------------------------------------------------------
# Ablation runner
# --------------------------------------------------------------------------


@dataclass
class AblationGrid:
    """Axes to sweep; absent axes keep the base config's value."""

    use_gender: list[bool] | None = None
    finetune_mode: list[str] | None = None
    tap: list[int] | None = None
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("ablation grid needs at least one seed")
        if not any([self.use_gender, self.finetune_mode, self.tap]):
            raise ConfigError("ablation grid has no axes")


@dataclass
class AblationRow:
    axes: dict[str, object]
    mean_uar: float
    mean_war: float
    n_seeds: int

    def as_line(self) -> str:
        axis_txt = "\t".join(f"{k}={v}" for k, v in self.axes.items())
        return f"{axis_txt}\tUAR={self.mean_uar:.4f}\tWAR={self.mean_war:.4f}\tseeds={self.n_seeds}"


def _cell_config(base: PipelineConfig, axes: dict[str, object], seed: int) -> PipelineConfig:
    cfg = replace(base, seed=seed)
    if "use_gender" in axes:
        cfg = replace(cfg, use_gender=bool(axes["use_gender"]))
    if "finetune_mode" in axes:
        cfg = replace(cfg, finetune_mode=str(axes["finetune_mode"]))
    if "tap" in axes:
        cfg = replace(cfg, cluster=replace(cfg.cluster, tap=int(axes["tap"])))
    return cfg


def run_ablation(
    grid: AblationGrid, base: PipelineConfig, out_dir: Path | str | None = None
) -> list[AblationRow]:
    """One pipeline run per grid cell per seed; rows hold seed-mean UAR/WAR.

    Row order mirrors the usual ablation tables: the gender axis varies
    slowest, then the fine-tuning mode, then the tap. Partial results are
    flushed to ``ablation_rows.tsv`` after every completed cell, and each
    cell's artifacts live in their own subdirectory so cells can be
    re-run independently.
    """
    grid.validate()
    base.validate()
    out_path: Path | None = None
    if out_dir is not None:
        out_path = resolve_artifact_dir(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)

    axis_names: list[str] = []
    axis_values: list[list[object]] = []
    if grid.use_gender is not None:
        axis_names.append("use_gender")
        axis_values.append(list(grid.use_gender))
    if grid.finetune_mode is not None:
        axis_names.append("finetune_mode")
        axis_values.append(list(grid.finetune_mode))
    if grid.tap is not None:
        axis_names.append("tap")
        axis_values.append(list(grid.tap))

    rows: list[AblationRow] = []
    for combo in product(*axis_values):
        axes = dict(zip(axis_names, combo))
        uars: list[float] = []
        wars: list[float] = []
        cell_tag = "_".join(f"{k}-{v}" for k, v in axes.items())
        for seed in grid.seeds:
            cell_dir = out_path / f"cell_{cell_tag}" / f"seed_{seed}" if out_path else None
            report = run_pipeline(_cell_config(base, axes, seed), cell_dir)
            uars.append(report.mean_uar)
            wars.append(report.mean_war)
        row = AblationRow(
            axes=axes,
            mean_uar=float(np.mean(uars)),
            mean_war=float(np.mean(wars)),
            n_seeds=len(grid.seeds),
        )
        rows.append(row)
        logger.info("ablation cell %s: %s", cell_tag, row.as_line())
        if out_path is not None:
            table = "\n".join(r.as_line() for r in rows) + "\n"
            (out_path / "ablation_rows.tsv").write_text(table, encoding="utf-8")
    return rows
