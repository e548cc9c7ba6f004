"""Transformer encoder backbone with span masking and per-layer taps.

The encoder consumes frame features directly (the filterbank front end
lives in :mod:`serft.corpus`), projects them to ``model_dim``, optionally
replaces masked positions with a learned mask embedding, adds sinusoidal
positions, and runs a stack of standard transformer layers. Any layer's
hidden states can be tapped, with negative indices counting from the end
(-1 = final layer), so intermediate representations can feed clustering.

Checkpoints bundle named parameter groups (encoder plus whatever heads a
stage owns) with the encoder config, a stage tag, and a metadata mapping;
a sidecar UTF-8 ``<path>.meta`` file mirrors the metadata as key=value
lines for inspection without unpickling.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .corpus import FrameFeatureMatrix
from .errors import ConfigError, DataError

CHECKPOINT_FORMAT = "serft-ckpt-v1"
_MAX_POSITIONS = 8192

STAGE_TAGS = ("stage1", "stage2", "stage3")


class TapOutOfRangeError(ConfigError):
    """Requested layer tap outside the configured depth."""


class MaskIndexOutOfRangeError(DataError):
    """Mask references a frame index >= T."""


class InvalidProbabilityError(ConfigError):
    """Mask probability outside (0, 1)."""


class IncompatibleConfigError(ConfigError):
    """Checkpoint architecture does not match the requested one."""


class CorruptCheckpointError(DataError):
    """Checkpoint file unreadable or internally inconsistent."""


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the encoder stack.

    Desk defaults are deliberately small (4 layers, 64-dim); a full-scale
    HuBERT-base equivalent would use 12 layers at 768-dim.
    """

    input_dim: int = 40
    n_layers: int = 4
    model_dim: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_layers < 1 or self.model_dim < 1 or self.n_heads < 1 or self.ff_dim < 1:
            raise ConfigError("encoder dimensions must be positive")
        if self.model_dim % self.n_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


def config_hash(config: EncoderConfig) -> str:
    """Stable hash of the architecture, recorded in checkpoint metadata."""
    payload = ",".join(f"{k}={v}" for k, v in sorted(asdict(config).items()))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def resolve_tap(tap: int, n_layers: int) -> int:
    """Map a tap index to a 1-indexed layer. Negative counts from the end."""
    if tap == 0 or abs(tap) > n_layers:
        raise TapOutOfRangeError(f"tap {tap} invalid for {n_layers} layers")
    return tap if tap > 0 else n_layers + tap + 1


@dataclass
class MaskSpec:
    """Set of masked frame indices produced by HuBERT-style span sampling."""

    masked_indices: np.ndarray
    span_length: int
    mask_prob: float

    def __post_init__(self) -> None:
        self.masked_indices = np.unique(np.asarray(self.masked_indices, dtype=np.int64))

    @property
    def n_masked(self) -> int:
        return int(self.masked_indices.size)


def sample_mask_spans(n_frames: int, mask_prob: float, span_length: int, seed: int) -> MaskSpec:
    """Sample a HuBERT-style span mask.

    Every index is independently a span start with probability
    ``mask_prob``; each start masks ``min(span_length, T - start)`` frames
    and the union is returned. Deterministic given the seed.
    """
    if n_frames < 1:
        raise DataError("n_frames must be >= 1")
    if not 0.0 < mask_prob < 1.0:
        raise InvalidProbabilityError(f"mask_prob must lie in (0, 1), got {mask_prob}")
    if span_length < 1:
        raise ConfigError("span_length must be >= 1")
    rng = np.random.default_rng(seed)
    starts = np.flatnonzero(rng.random(n_frames) < mask_prob)
    masked = np.zeros(n_frames, dtype=bool)
    for s in starts:
        masked[s : s + span_length] = True
    return MaskSpec(masked_indices=np.flatnonzero(masked), span_length=span_length, mask_prob=mask_prob)


class SinusoidalPositions(nn.Module):
    """Fixed sine/cosine positional table added to the projected input."""

    def __init__(self, model_dim: int, max_len: int = _MAX_POSITIONS):
        super().__init__()
        position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
        div = torch.exp(
            torch.arange(0, model_dim, 2, dtype=torch.float32) * (-np.log(10000.0) / model_dim)
        )
        pe = torch.zeros(max_len, model_dim)
        pe[:, 0::2] = torch.sin(position * div)
        pe[:, 1::2] = torch.cos(position * div[: model_dim // 2])
        self.register_buffer("pe", pe)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t = x.size(1)
        if t > self.pe.size(0):
            raise DataError(f"sequence length {t} exceeds positional table {self.pe.size(0)}")
        return x + self.pe[:t].unsqueeze(0)


class SpeechEncoder(nn.Module):
    """Frame-feature transformer encoder with a learned mask embedding.

    forward() is batched; masked positions (a boolean B x T tensor) are
    replaced by the mask embedding after the input projection and before
    the first transformer layer, matching masked-prediction training.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        torch.manual_seed(config.seed)
        self.input_proj = nn.Linear(config.input_dim, config.model_dim)
        self.mask_embedding = nn.Parameter(torch.empty(config.model_dim).uniform_(-0.1, 0.1))
        self.positions = SinusoidalPositions(config.model_dim)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=config.model_dim,
                nhead=config.n_heads,
                dim_feedforward=config.ff_dim,
                dropout=config.dropout,
                batch_first=True,
            )
            for _ in range(config.n_layers)
        )

    def forward(
        self,
        features: torch.Tensor,
        lengths: torch.Tensor | None = None,
        tap: int = -1,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Encode a padded batch and return the tapped layer's hidden states.

        Args:
            features: (B, T, input_dim) frame features.
            lengths: (B,) true lengths; padded positions are excluded from
                attention. None means all sequences are full length.
            tap: layer to return, 1-indexed from below or negative from the end.
            mask: optional (B, T) boolean tensor of positions to replace with
                the learned mask embedding.

        Returns:
            (B, T, model_dim) hidden states of the tapped layer.
        """
        layer_ix = resolve_tap(tap, self.config.n_layers)
        x = self.input_proj(features)
        if mask is not None:
            if mask.shape != features.shape[:2]:
                raise DataError(f"mask shape {tuple(mask.shape)} != batch shape {tuple(features.shape[:2])}")
            x = torch.where(mask.unsqueeze(-1), self.mask_embedding.to(x.dtype), x)
        x = self.positions(x)
        padding_mask = None
        if lengths is not None:
            t = features.size(1)
            padding_mask = torch.arange(t, device=features.device).unsqueeze(0) >= lengths.unsqueeze(1)
        for i, layer in enumerate(self.layers, start=1):
            x = layer(x, src_key_padding_mask=padding_mask)
            if i == layer_ix:
                return x
        raise AssertionError("unreachable: tap already validated")


def forward_with_tap(
    encoder: SpeechEncoder,
    features: FrameFeatureMatrix,
    tap: int = -1,
    mask: MaskSpec | None = None,
) -> np.ndarray:
    """Single-utterance convenience wrapper: (T, model_dim) hidden states.

    Runs in eval mode without gradients. Mask indices must fall inside
    [0, T).
    """
    n_frames = features.n_frames
    mask_tensor = None
    if mask is not None and mask.n_masked > 0:
        if int(mask.masked_indices[-1]) >= n_frames or int(mask.masked_indices[0]) < 0:
            raise MaskIndexOutOfRangeError(
                f"mask index {int(mask.masked_indices[-1])} outside [0, {n_frames})"
            )
        mask_tensor = torch.zeros(1, n_frames, dtype=torch.bool)
        mask_tensor[0, mask.masked_indices] = True
    dtype = encoder.input_proj.weight.dtype
    x = torch.from_numpy(np.ascontiguousarray(features.frames)).to(dtype).unsqueeze(0)
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        hidden = encoder(x, tap=tap, mask=mask_tensor)
    if was_training:
        encoder.train()
    return hidden.squeeze(0).cpu().numpy()


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Named parameter bundles plus config, stage tag, and metadata.

    ``weights`` maps bundle names ("encoder", "pool", ...) to state dicts.
    Metadata always carries ``config_hash``; trainers add seed, step, and
    upstream provenance hashes.
    """

    weights: dict[str, dict[str, torch.Tensor]]
    config: EncoderConfig
    stage_tag: str
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.stage_tag not in STAGE_TAGS:
            raise ConfigError(f"stage_tag must be one of {STAGE_TAGS}, got {self.stage_tag!r}")
        expected = config_hash(self.config)
        stored = self.metadata.setdefault("config_hash", expected)
        if stored != expected:
            raise IncompatibleConfigError("metadata config_hash does not match config")


def checkpoint_hash(ckpt: Checkpoint) -> str:
    """Content hash over parameters + config + stage tag, for provenance."""
    h = hashlib.sha256()
    h.update(ckpt.stage_tag.encode())
    h.update(config_hash(ckpt.config).encode())
    for bundle in sorted(ckpt.weights):
        h.update(bundle.encode())
        state = ckpt.weights[bundle]
        for name in sorted(state):
            h.update(name.encode())
            h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    """Persist a checkpoint plus its UTF-8 ``<path>.meta`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "stage_tag": ckpt.stage_tag,
        "config": asdict(ckpt.config),
        "metadata": dict(ckpt.metadata),
        "weights": ckpt.weights,
    }
    torch.save(payload, path)
    lines = [f"stage_tag={ckpt.stage_tag}"]
    lines += [f"config.{k}={v}" for k, v in sorted(asdict(ckpt.config).items())]
    lines += [f"{k}={v}" for k, v in sorted(ckpt.metadata.items())]
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: Path | str, expected_config: EncoderConfig | None = None) -> Checkpoint:
    """Load a checkpoint, verifying its internal config hash.

    Raises IncompatibleConfigError when ``expected_config`` is given and
    differs from the stored architecture, CorruptCheckpointError when the
    file cannot be read or its hash does not match its config.
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    try:
        config = EncoderConfig(**payload["config"])
        ckpt = Checkpoint(
            weights=payload["weights"],
            config=config,
            stage_tag=payload["stage_tag"],
            metadata=dict(payload["metadata"]),
        )
    except IncompatibleConfigError:
        raise CorruptCheckpointError(f"{path}: stored config_hash mismatch") from None
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: malformed payload ({exc})") from exc
    if expected_config is not None and expected_config != config:
        raise IncompatibleConfigError(
            f"checkpoint config {config} does not match expected {expected_config}"
        )
    return ckpt


def build_encoder(ckpt: Checkpoint) -> SpeechEncoder:
    """Instantiate the encoder described by a checkpoint and load its weights."""
    encoder = SpeechEncoder(ckpt.config)
    if "encoder" not in ckpt.weights:
        raise CorruptCheckpointError("checkpoint has no 'encoder' bundle")
    encoder.load_state_dict(ckpt.weights["encoder"])
    return encoder
