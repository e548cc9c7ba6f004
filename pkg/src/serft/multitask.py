"""Stage 1: multi-task pre-fine-tuning with emotion and gender heads.

Hidden states from the encoder's final layer run through a BiLSTM, a mean
pool over time, and a two-layer ReLU projection; two linear heads then
classify emotion (4-way) and gender (2-way). The joint objective is

    L_total = alpha_e * CE(emotion) + (1 - alpha_e) * CE(gender)

with alpha_e defaulting to 0.9, so the auxiliary gender task injects
speaker-attribute information into the encoder without dominating. The
resulting checkpoint is the feature source for pseudo-label clustering.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import N_EMOTIONS, N_GENDERS, UtteranceRecord
from .encoder import Checkpoint, EncoderConfig, SpeechEncoder, build_encoder, checkpoint_hash
from .errors import ConfigError, DataError
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

STAGE1_LOG_FIELDS = ["step", "L_Total", "L_Emo", "L_Gender", "emo_acc", "gender_acc"]


class MissingGenderLabelError(DataError):
    """Stage 1 needs both labels on every record."""


class EmptySequenceError(DataError):
    """Pooling over zero frames is undefined."""


class NonFiniteLogitsError(DataError):
    """Loss inputs contain NaN or infinity."""


@dataclass
class JointLossConfig:
    """Weighting between the emotion and gender cross-entropies."""

    alpha_e: float = 0.9

    def validate(self) -> None:
        if not 0.0 <= self.alpha_e <= 1.0:
            raise ConfigError(f"alpha_e must lie in [0, 1], got {self.alpha_e}")


class PoolingHead(nn.Module):
    """BiLSTM -> masked mean over time -> two-layer ReLU projection.

    ``sequence_model`` can be swapped for a test double; anything returning
    either a tensor or an (output, state) pair with shape (B, T, proj_in)
    works.
    """

    def __init__(
        self,
        model_dim: int,
        bilstm_hidden: int = 64,
        embed_dim: int = 64,
        sequence_model: nn.Module | None = None,
    ):
        super().__init__()
        if sequence_model is None:
            sequence_model = nn.LSTM(
                model_dim, bilstm_hidden, batch_first=True, bidirectional=True
            )
            proj_in = 2 * bilstm_hidden
        else:
            proj_in = model_dim
        self.sequence_model = sequence_model
        self.proj = nn.Sequential(
            nn.Linear(proj_in, embed_dim),
            nn.ReLU(),
            nn.Linear(embed_dim, embed_dim),
        )
        self.embed_dim = embed_dim

    def forward(self, hidden: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """(B, T, model_dim) hidden states -> (B, embed_dim) embeddings."""
        if hidden.size(1) < 1:
            raise EmptySequenceError("cannot pool an empty sequence")
        if lengths is None:
            lengths = torch.full((hidden.size(0),), hidden.size(1), dtype=torch.long)
        if isinstance(self.sequence_model, nn.LSTM):
            packed = pack_padded_sequence(
                hidden, lengths.cpu(), batch_first=True, enforce_sorted=False
            )
            seq_out, _ = self.sequence_model(packed)
            seq_out, _ = pad_packed_sequence(seq_out, batch_first=True, total_length=hidden.size(1))
        else:
            seq_out = self.sequence_model(hidden)
            if isinstance(seq_out, tuple):
                seq_out = seq_out[0]
        valid = (
            torch.arange(hidden.size(1), device=hidden.device).unsqueeze(0) < lengths.unsqueeze(1)
        ).to(seq_out.dtype)
        pooled = (seq_out * valid.unsqueeze(-1)).sum(dim=1) / lengths.to(seq_out.dtype).unsqueeze(1)
        return self.proj(pooled)


def pooled_embedding(head: PoolingHead, hidden: np.ndarray) -> np.ndarray:
    """Pool one utterance's (T, model_dim) hidden states to an embedding."""
    hidden = np.asarray(hidden)
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise EmptySequenceError(f"expected (T>=1, D) hidden states, got shape {hidden.shape}")
    dtype = next(head.parameters()).dtype
    x = torch.from_numpy(np.ascontiguousarray(hidden)).to(dtype).unsqueeze(0)
    was_training = head.training
    head.eval()
    with torch.no_grad():
        out = head(x)
    if was_training:
        head.train()
    return out.squeeze(0).cpu().numpy()


class Stage1Model(nn.Module):
    """Encoder + pooling head + emotion/gender linear heads."""

    def __init__(self, encoder: SpeechEncoder, bilstm_hidden: int = 64, embed_dim: int = 64):
        super().__init__()
        self.encoder = encoder
        self.pool = PoolingHead(encoder.config.model_dim, bilstm_hidden, embed_dim)
        self.emotion_head = nn.Linear(embed_dim, N_EMOTIONS)
        self.gender_head = nn.Linear(embed_dim, N_GENDERS)

    def forward(
        self, features: torch.Tensor, lengths: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        hidden = self.encoder(features, lengths=lengths, tap=-1)
        emb = self.pool(hidden, lengths)
        return self.emotion_head(emb), self.gender_head(emb)


def joint_loss(
    emo_logits: torch.Tensor,
    gender_logits: torch.Tensor,
    emo_labels: torch.Tensor,
    gender_labels: torch.Tensor,
    cfg: JointLossConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Weighted joint objective; returns (total, emotion CE, gender CE).

    Each CE is a softmax cross-entropy averaged over the batch. With
    alpha_e = 1 the gender term is multiplied by exactly zero, so gender
    parameters receive zero gradient.
    """
    cfg.validate()
    if not (torch.isfinite(emo_logits).all() and torch.isfinite(gender_logits).all()):
        raise NonFiniteLogitsError("logits contain non-finite values")
    ce_emo = F.cross_entropy(emo_logits, emo_labels)
    ce_gender = F.cross_entropy(gender_logits, gender_labels)
    total = cfg.alpha_e * ce_emo + (1.0 - cfg.alpha_e) * ce_gender
    return total, ce_emo, ce_gender


def train_stage1(
    records: list[UtteranceRecord],
    hp: TrainHyperparams,
    loss_cfg: JointLossConfig | None = None,
    encoder_config: EncoderConfig | None = None,
    init_ckpt: Checkpoint | None = None,
    bilstm_hidden: int = 64,
    embed_dim: int = 64,
) -> tuple[Checkpoint, list[dict]]:
    """Train the stage-1 multi-task model and return (checkpoint, log rows).

    The encoder starts from ``init_ckpt`` when given (a plug-in point for
    externally pre-trained weights), otherwise from a fresh seed-determined
    initialization of ``encoder_config``. Log rows follow
    STAGE1_LOG_FIELDS, one per optimizer step.
    """
    hp.validate()
    loss_cfg = loss_cfg or JointLossConfig()
    loss_cfg.validate()
    if not records:
        raise DataError("stage 1 needs a non-empty corpus")
    missing = [r.id for r in records if r.gender is None]
    if missing:
        raise MissingGenderLabelError(f"records without gender labels: {missing[:5]}")

    if init_ckpt is not None:
        encoder = build_encoder(init_ckpt)
    elif encoder_config is not None:
        encoder = SpeechEncoder(encoder_config)
    else:
        raise ConfigError("train_stage1 needs encoder_config or init_ckpt")
    feats = materialize_features(records, expected_dim=encoder.config.input_dim)

    torch.manual_seed(derive_seed(hp.seed, "stage1-heads"))
    model = Stage1Model(encoder, bilstm_hidden=bilstm_hidden, embed_dim=embed_dim)
    model.train()
    if hp.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=hp.lr)

    emo_labels = np.array([r.emotion.value for r in records], dtype=np.int64)
    gender_labels = np.array([r.gender.value for r in records], dtype=np.int64)
    batch_size = effective_batch_size(hp.batch_size, len(records))

    rows: list[dict] = []
    step = 0
    for epoch in range(hp.epochs):
        for batch in batch_order(len(records), batch_size, epoch, hp.seed):
            x, lengths = pad_batch([feats[i] for i in batch])
            y_emo = torch.from_numpy(emo_labels[batch])
            y_gender = torch.from_numpy(gender_labels[batch])
            emo_logits, gender_logits = model(x, lengths)
            total, ce_emo, ce_gender = joint_loss(emo_logits, gender_logits, y_emo, y_gender, loss_cfg)
            check_finite(total, "stage 1")
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            rows.append(
                {
                    "step": step,
                    "L_Total": float(total.detach()),
                    "L_Emo": float(ce_emo.detach()),
                    "L_Gender": float(ce_gender.detach()),
                    "emo_acc": float((emo_logits.argmax(1) == y_emo).float().mean()),
                    "gender_acc": float((gender_logits.argmax(1) == y_gender).float().mean()),
                }
            )

    metadata = {
        "seed": str(hp.seed),
        "step": str(step),
        "alpha_e": str(loss_cfg.alpha_e),
        "embed_dim": str(embed_dim),
        "bilstm_hidden": str(bilstm_hidden),
    }
    if init_ckpt is not None:
        metadata["upstream_hash"] = checkpoint_hash(init_ckpt)
    ckpt = Checkpoint(
        weights={
            "encoder": model.encoder.state_dict(),
            "pool": model.pool.state_dict(),
            "emotion_head": model.emotion_head.state_dict(),
            "gender_head": model.gender_head.state_dict(),
        },
        config=model.encoder.config,
        stage_tag="stage1",
        metadata=metadata,
    )
    return ckpt, rows
