"""Stage 2: masked frame-level cross-entropy against pseudo-labels.

The encoder starts from the stage-1 checkpoint. For every utterance and
epoch a fresh span mask is sampled; masked positions are replaced by the
learned mask embedding and one projection head per clustering scale
predicts the frame's cluster id. Loss is averaged over masked frames
only, then over scales with uniform weights, matching masked-prediction
pre-training: frames outside the mask contribute nothing. Only the
encoder transfers onward; the per-scale heads are discarded after this
stage.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import UtteranceRecord
from .encoder import Checkpoint, MaskSpec, build_encoder, checkpoint_hash, sample_mask_spans
from .errors import ConfigError, DataError
from .pseudolabels import PseudoLabelSet
from .training import (
    TrainHyperparams,
    batch_order,
    check_finite,
    derive_seed,
    effective_batch_size,
    materialize_features,
    pad_batch,
)

logger = logging.getLogger(__name__)

DEFAULT_MASK_PROB = 0.08
DEFAULT_SPAN_LENGTH = 10


class MissingLabelsError(DataError):
    """No pseudo-labels for an utterance in the corpus."""


class FrameCountMismatchError(DataError):
    """Pseudo-label frame count differs from the feature frame count."""


class EmptyMaskError(DataError):
    """Loss over zero masked frames is undefined."""


class ShapeMismatchError(DataError):
    """Hidden states, labels, and heads disagree on shapes."""


class FramePredictionHeads(nn.Module):
    """One two-layer ReLU projection per scale: model_dim -> hidden -> K_s."""

    def __init__(self, model_dim: int, scales: tuple[int, ...], hidden: int = 64):
        super().__init__()
        self.scales = tuple(scales)
        self.heads = nn.ModuleList(
            nn.Sequential(nn.Linear(model_dim, hidden), nn.ReLU(), nn.Linear(hidden, k))
            for k in self.scales
        )

    def forward(self, frames: torch.Tensor) -> list[torch.Tensor]:
        """(M, model_dim) frames -> list of (M, K_s) logits, one per scale."""
        return [head(frames) for head in self.heads]


def per_scale_masked_ce(
    hidden: torch.Tensor,
    labelset: PseudoLabelSet,
    mask: MaskSpec,
    heads: FramePredictionHeads,
) -> list[torch.Tensor]:
    """Cross-entropy over masked frames, one scalar per scale."""
    if hidden.ndim != 2:
        raise ShapeMismatchError(f"hidden must be (T, model_dim), got {tuple(hidden.shape)}")
    if labelset.n_frames != hidden.shape[0]:
        raise ShapeMismatchError(
            f"labels cover {labelset.n_frames} frames, hidden has {hidden.shape[0]}"
        )
    if labelset.scales != heads.scales:
        raise ShapeMismatchError(f"label scales {labelset.scales} != head scales {heads.scales}")
    if mask.n_masked == 0:
        raise EmptyMaskError("mask selects no frames")
    if int(mask.masked_indices[-1]) >= hidden.shape[0]:
        raise ShapeMismatchError("mask index beyond sequence length")
    idx = torch.from_numpy(mask.masked_indices)
    frames = hidden[idx]
    targets = torch.from_numpy(labelset.labels[mask.masked_indices])
    return [
        F.cross_entropy(logits, targets[:, s])
        for s, logits in enumerate(heads(frames))
    ]


def masked_frame_ce(
    hidden: torch.Tensor,
    labelset: PseudoLabelSet,
    mask: MaskSpec,
    heads: FramePredictionHeads,
) -> torch.Tensor:
    """Scale-averaged masked cross-entropy for one utterance.

    Equals the uniform mean of the independent per-scale losses; labels at
    unmasked frames never enter the computation.
    """
    losses = per_scale_masked_ce(hidden, labelset, mask, heads)
    return torch.stack(losses).mean()


def train_stage2(
    records: list[UtteranceRecord],
    labelsets: dict[str, PseudoLabelSet],
    stage1_ckpt: Checkpoint,
    hp: TrainHyperparams,
    mask_prob: float = DEFAULT_MASK_PROB,
    span_length: int = DEFAULT_SPAN_LENGTH,
    head_hidden: int = 64,
) -> tuple[Checkpoint, list[dict]]:
    """Masked-prediction fine-tuning; returns (stage-2 checkpoint, log rows).

    A fresh mask is sampled per utterance per epoch. Batches whose mask
    union is empty are skipped with a warning. Log rows hold ``step``,
    ``loss``, and per-scale masked-frame accuracy ``acc_scale_<s>``.
    """
    hp.validate()
    if stage1_ckpt.stage_tag != "stage1":
        raise ConfigError(f"stage 2 starts from a stage1 checkpoint, got {stage1_ckpt.stage_tag}")
    if not records:
        raise DataError("stage 2 needs a non-empty corpus")
    feats = materialize_features(records, expected_dim=stage1_ckpt.config.input_dim)
    scales: tuple[int, ...] | None = None
    for rec, f in zip(records, feats):
        if rec.id not in labelsets:
            raise MissingLabelsError(f"no pseudo-labels for utterance {rec.id!r}")
        labelset = labelsets[rec.id]
        if labelset.n_frames != f.shape[0]:
            raise FrameCountMismatchError(
                f"{rec.id}: {labelset.n_frames} label frames vs {f.shape[0]} feature frames"
            )
        if scales is None:
            scales = labelset.scales
        elif labelset.scales != scales:
            raise ConfigError("labelsets disagree on scales")
    assert scales is not None

    encoder = build_encoder(stage1_ckpt)
    torch.manual_seed(derive_seed(hp.seed, "stage2-heads"))
    heads = FramePredictionHeads(encoder.config.model_dim, scales, hidden=head_hidden)
    encoder.train()
    heads.train()
    if hp.freeze_encoder:
        for p in encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in list(encoder.parameters()) + list(heads.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(params, lr=hp.lr)

    batch_size = effective_batch_size(hp.batch_size, len(records))
    rows: list[dict] = []
    step = 0
    for epoch in range(hp.epochs):
        masks = [
            sample_mask_spans(
                feats[i].shape[0], mask_prob, span_length, derive_seed(hp.seed, "mask", epoch, i)
            )
            for i in range(len(records))
        ]
        for batch in batch_order(len(records), batch_size, epoch, hp.seed):
            x, lengths = pad_batch([feats[i] for i in batch])
            t_max = x.shape[1]
            mask_tensor = torch.zeros(len(batch), t_max, dtype=torch.bool)
            target_cols: list[np.ndarray] = []
            for row, i in enumerate(batch):
                mask_tensor[row, masks[i].masked_indices] = True
                target_cols.append(labelsets[records[i].id].labels[masks[i].masked_indices])
            n_masked = int(mask_tensor.sum())
            if n_masked == 0:
                logger.warning("epoch %d: batch with empty mask union skipped", epoch)
                continue
            targets = torch.from_numpy(np.concatenate(target_cols, axis=0))

            hidden = encoder(x, lengths=lengths, tap=-1, mask=mask_tensor)
            masked_frames = hidden[mask_tensor]
            logits_per_scale = heads(masked_frames)
            losses = [
                F.cross_entropy(logits, targets[:, s])
                for s, logits in enumerate(logits_per_scale)
            ]
            loss = torch.stack(losses).mean()
            check_finite(loss, "stage 2")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            row_out = {"step": step, "loss": float(loss.detach())}
            for s, logits in enumerate(logits_per_scale):
                row_out[f"acc_scale_{s}"] = float(
                    (logits.argmax(1) == targets[:, s]).float().mean()
                )
            rows.append(row_out)

    metadata = {
        "seed": str(hp.seed),
        "step": str(step),
        "scales": ",".join(str(k) for k in scales),
        "mask_prob": str(mask_prob),
        "span_length": str(span_length),
        "upstream_hash": checkpoint_hash(stage1_ckpt),
    }
    ckpt = Checkpoint(
        weights={"encoder": encoder.state_dict(), "frame_heads": heads.state_dict()},
        config=encoder.config,
        stage_tag="stage2",
        metadata=metadata,
    )
    return ckpt, rows
