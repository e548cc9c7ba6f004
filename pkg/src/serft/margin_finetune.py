"""Stage 3: utterance-level fine-tuning with an additive-margin softmax.

The stage-2 encoder is the feature extractor; a freshly initialized
pooling head (same architecture as stage 1) produces an utterance
embedding and a cosine classifier scores it against one learned vector
per emotion class. Training subtracts an additive margin ``m`` from the
target-class cosine and scales all cosines by ``s`` before the softmax
cross-entropy:

    L = -(1/N) sum_i log[ e^{s(cos_yi - m)} / (e^{s(cos_yi - m)} + sum_{j!=yi} e^{s cos_j}) ]

pushing classes apart on the unit sphere. Inference ignores the margin
and takes the argmax over plain cosines, so the margin changes training
pressure but not the decision rule. A plain cross-entropy mode ("ce")
replaces the cosine head with a linear head, isolating the margin loss's
contribution in ablations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import N_EMOTIONS, UtteranceRecord
from .encoder import Checkpoint, build_encoder, checkpoint_hash
from .errors import ConfigError, DataError
from .evaluation import recall_metrics
from .multitask import PoolingHead
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

FINETUNE_MODES = ("ams", "ce")


class ZeroVectorError(DataError):
    """Cosine similarity undefined for (near-)zero embeddings."""


class NonFiniteCosineError(DataError):
    """Cosine matrix contains NaN or infinity."""


@dataclass
class AMSConfig:
    """Additive margin ``m`` and scale ``s`` for the cosine softmax."""

    m: float = 0.2
    s: float = 30.0
    n_classes: int = N_EMOTIONS

    def validate(self) -> None:
        if not 0.0 <= self.m < 1.0:
            raise ConfigError(f"margin m must lie in [0, 1), got {self.m}")
        if not (self.s > 0 and np.isfinite(self.s)):
            raise ConfigError(f"scale s must be positive and finite, got {self.s}")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")


class CosineHead(nn.Module):
    """One learned class vector per emotion; rows kept away from zero."""

    def __init__(self, embed_dim: int, n_classes: int = N_EMOTIONS):
        super().__init__()
        weight = torch.empty(n_classes, embed_dim)
        nn.init.xavier_normal_(weight)
        self.class_vectors = nn.Parameter(weight)
        self._reinit_zero_rows()

    def _reinit_zero_rows(self) -> None:
        with torch.no_grad():
            norms = self.class_vectors.norm(dim=1)
            for j in torch.where(norms < 1e-8)[0]:
                self.class_vectors[j].normal_(0.0, 0.1)


def cosine_logits(x: torch.Tensor, head: CosineHead) -> torch.Tensor:
    """(N, embed_dim) embeddings -> (N, n_classes) cosine similarities.

    cos(theta_ji) = x_i . w_j / (|x_i| |w_j|); invariant to positive
    rescaling of either side. Raises ZeroVectorError when an embedding's
    norm falls below 1e-8.
    """
    if x.ndim != 2:
        raise DataError(f"expected (N, embed_dim) embeddings, got shape {tuple(x.shape)}")
    x_norm = x.norm(dim=1, keepdim=True)
    if bool((x_norm < 1e-8).any()):
        raise ZeroVectorError("embedding with near-zero norm")
    w = head.class_vectors
    w_norm = w.norm(dim=1, keepdim=True)
    return (x / x_norm) @ (w / w_norm).T


def ams_loss(cosines: torch.Tensor, labels: torch.Tensor, cfg: AMSConfig) -> torch.Tensor:
    """Mean additive-margin softmax loss over a batch of cosine rows.

    Stabilized so that values stay exact even when one class dominates:
    after subtracting the row maximum, the log-sum-exp is evaluated as
    log1p over the remaining terms (the maximum contributes exactly 1).
    With m=0, s=1 this reduces to softmax cross-entropy over raw cosines.
    """
    cfg.validate()
    if not torch.isfinite(cosines).all():
        raise NonFiniteCosineError("cosine matrix contains non-finite entries")
    if cosines.ndim != 2 or cosines.shape[1] != cfg.n_classes:
        raise DataError(f"expected (N, {cfg.n_classes}) cosines, got {tuple(cosines.shape)}")
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise DataError("labels outside [0, n_classes)")
    labels = labels.view(-1, 1)
    target_mask = torch.zeros_like(cosines)
    target_mask.scatter_(1, labels, 1.0)
    z = cfg.s * (cosines - cfg.m * target_mask)

    jmax = z.argmax(dim=1, keepdim=True)
    shifted = z - z.gather(1, jmax)
    exp_shifted = shifted.exp()
    others = exp_shifted.scatter(1, jmax, 0.0).sum(dim=1)
    loss = torch.log1p(others) - shifted.gather(1, labels).squeeze(1)
    return loss.mean()


class Stage3Model(nn.Module):
    """Encoder + fresh pooling head + cosine (or linear) classifier."""

    def __init__(self, encoder, mode: str, ams_cfg: AMSConfig, bilstm_hidden: int = 64, embed_dim: int = 64):
        super().__init__()
        if mode not in FINETUNE_MODES:
            raise ConfigError(f"finetune mode must be one of {FINETUNE_MODES}, got {mode!r}")
        self.encoder = encoder
        self.mode = mode
        self.ams_cfg = ams_cfg
        self.pool = PoolingHead(encoder.config.model_dim, bilstm_hidden, embed_dim)
        if mode == "ams":
            self.classifier: nn.Module = CosineHead(embed_dim, ams_cfg.n_classes)
        else:
            self.classifier = nn.Linear(embed_dim, ams_cfg.n_classes)

    def embed(self, features: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        hidden = self.encoder(features, lengths=lengths, tap=-1)
        return self.pool(hidden, lengths)

    def scores(self, emb: torch.Tensor) -> torch.Tensor:
        """Decision scores: plain cosines in ams mode (margin-free), logits in ce mode."""
        if self.mode == "ams":
            return cosine_logits(emb, self.classifier)
        return self.classifier(emb)

    def loss(self, emb: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if self.mode == "ams":
            return ams_loss(cosine_logits(emb, self.classifier), labels, self.ams_cfg)
        return F.cross_entropy(self.classifier(emb), labels)


def train_stage3(
    records: list[UtteranceRecord],
    stage2_ckpt: Checkpoint,
    ams_cfg: AMSConfig | None = None,
    hp: TrainHyperparams | None = None,
    mode: str = "ams",
    bilstm_hidden: int = 64,
    embed_dim: int = 64,
) -> tuple[Checkpoint, list[dict]]:
    """Utterance-level fine-tuning; returns (stage-3 checkpoint, log rows).

    Expects the masked-prediction (stage2) checkpoint; a stage1 checkpoint
    is accepted with a warning for ablations that skip stage 2. Only
    emotion labels are used. Log rows hold step, the stage loss
    (``ams_loss`` or ``ce_loss``), and batch train_uar / train_war.
    """
    ams_cfg = ams_cfg or AMSConfig()
    ams_cfg.validate()
    hp = hp or TrainHyperparams()
    hp.validate()
    if mode not in FINETUNE_MODES:
        raise ConfigError(f"finetune mode must be one of {FINETUNE_MODES}, got {mode!r}")
    if stage2_ckpt.stage_tag == "stage3":
        raise ConfigError("stage 3 cannot start from a stage3 checkpoint")
    if stage2_ckpt.stage_tag == "stage1":
        logger.warning("stage 3 starting from a stage1 checkpoint (stage 2 skipped)")
    if not records:
        raise DataError("stage 3 needs a non-empty corpus")

    feats = materialize_features(records, expected_dim=stage2_ckpt.config.input_dim)
    encoder = build_encoder(stage2_ckpt)
    torch.manual_seed(derive_seed(hp.seed, "stage3-heads"))
    model = Stage3Model(encoder, mode, ams_cfg, bilstm_hidden=bilstm_hidden, embed_dim=embed_dim)
    model.train()
    if hp.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=hp.lr)

    labels = np.array([r.emotion.value for r in records], dtype=np.int64)
    batch_size = effective_batch_size(hp.batch_size, len(records))
    loss_field = "ams_loss" if mode == "ams" else "ce_loss"

    rows: list[dict] = []
    step = 0
    for epoch in range(hp.epochs):
        for batch in batch_order(len(records), batch_size, epoch, hp.seed):
            x, lengths = pad_batch([feats[i] for i in batch])
            y = torch.from_numpy(labels[batch])
            emb = model.embed(x, lengths)
            loss = model.loss(emb, y)
            check_finite(loss, "stage 3")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            with torch.no_grad():
                preds = model.scores(emb).argmax(1)
            war, uar = recall_metrics(y.numpy(), preds.numpy())
            rows.append(
                {
                    "step": step,
                    loss_field: float(loss.detach()),
                    "train_uar": uar,
                    "train_war": war,
                }
            )

    metadata = {
        "seed": str(hp.seed),
        "step": str(step),
        "finetune_mode": mode,
        "embed_dim": str(embed_dim),
        "bilstm_hidden": str(bilstm_hidden),
        "upstream_hash": checkpoint_hash(stage2_ckpt),
    }
    if mode == "ams":
        metadata["ams_m"] = str(ams_cfg.m)
        metadata["ams_s"] = str(ams_cfg.s)
    ckpt = Checkpoint(
        weights={
            "encoder": model.encoder.state_dict(),
            "pool": model.pool.state_dict(),
            "classifier": model.classifier.state_dict(),
        },
        config=model.encoder.config,
        stage_tag="stage3",
        metadata=metadata,
    )
    return ckpt, rows


def load_stage3_model(ckpt: Checkpoint) -> Stage3Model:
    """Rebuild the full stage-3 model (encoder, pool, classifier) from a checkpoint."""
    if ckpt.stage_tag != "stage3":
        raise ConfigError(f"expected a stage3 checkpoint, got {ckpt.stage_tag}")
    mode = ckpt.metadata.get("finetune_mode", "ams")
    embed_dim = int(ckpt.metadata.get("embed_dim", "64"))
    bilstm_hidden = int(ckpt.metadata.get("bilstm_hidden", "64"))
    ams_cfg = AMSConfig(
        m=float(ckpt.metadata.get("ams_m", "0.2")),
        s=float(ckpt.metadata.get("ams_s", "30.0")),
    )
    encoder = build_encoder(ckpt)
    model = Stage3Model(encoder, mode, ams_cfg, bilstm_hidden=bilstm_hidden, embed_dim=embed_dim)
    model.pool.load_state_dict(ckpt.weights["pool"])
    model.classifier.load_state_dict(ckpt.weights["classifier"])
    model.eval()
    return model


def predict_emotions(records: list[UtteranceRecord], ckpt: Checkpoint, batch_size: int = 64) -> np.ndarray:
    """Margin-free argmax predictions (emotion ids) for a list of utterances."""
    model = load_stage3_model(ckpt)
    feats = materialize_features(records, expected_dim=ckpt.config.input_dim)
    preds: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = feats[start : start + batch_size]
            x, lengths = pad_batch(chunk)
            emb = model.embed(x, lengths)
            preds.append(model.scores(emb).argmax(1).numpy())
    return np.concatenate(preds)
