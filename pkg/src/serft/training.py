"""Shared training plumbing: hyperparameters, seeding, batching, CSV logs.

All three stages use the same Adam + fixed-epoch loop contract: batches
are drawn in a seed-determined order, losses must stay finite, and every
run is reproducible bit-for-bit given the same seed.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import UtteranceRecord
from .errors import ConfigError, TrainingDivergedError

logger = logging.getLogger(__name__)


@dataclass
class TrainHyperparams:
    """Optimizer and loop settings shared by all stages.

    Defaults (Adam, lr 1e-4, batch 64) follow the published full-scale
    recipe; epochs are stage-specific and set by the pipeline config.
    """

    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    freeze_encoder: bool = False

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr, batch_size, and epochs must be positive")


def derive_seed(base: int, *parts: object) -> int:
    """Stable child seed from a base seed and a path of context labels."""
    h = hashlib.sha256(repr((base, parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") % (2**31)


def effective_batch_size(requested: int, n_records: int) -> int:
    if requested > n_records:
        logger.warning("batch size %d reduced to corpus size %d", requested, n_records)
        return n_records
    return requested


def batch_order(n_records: int, batch_size: int, epoch: int, seed: int) -> list[np.ndarray]:
    """Deterministic shuffled batches for one epoch (last batch may be short)."""
    rng = np.random.default_rng(derive_seed(seed, "epoch", epoch))
    order = rng.permutation(n_records)
    return [order[i : i + batch_size] for i in range(0, n_records, batch_size)]


def pad_batch(
    feature_list: list[np.ndarray], dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length (T_i, D) arrays into (B, T_max, D) + lengths."""
    lengths = torch.tensor([f.shape[0] for f in feature_list], dtype=torch.long)
    t_max = int(lengths.max())
    dim = feature_list[0].shape[1]
    out = torch.zeros(len(feature_list), t_max, dim, dtype=dtype)
    for i, f in enumerate(feature_list):
        out[i, : f.shape[0]] = torch.from_numpy(np.ascontiguousarray(f)).to(dtype)
    return out, lengths


def materialize_features(
    records: list[UtteranceRecord], expected_dim: int | None = None
) -> list[np.ndarray]:
    """Load every record's feature matrix, enforcing a consistent dim.

    When ``expected_dim`` is given (the encoder's input width), a corpus
    with a different feature dim is rejected up front instead of failing
    inside a matmul.
    """
    feats = [r.load_features().frames for r in records]
    dims = {f.shape[1] for f in feats}
    if len(dims) > 1:
        raise ConfigError(f"inconsistent feature dims across corpus: {sorted(dims)}")
    if expected_dim is not None and dims and dims != {expected_dim}:
        raise ConfigError(
            f"corpus feature dim {dims.pop()} does not match encoder input_dim {expected_dim}"
        )
    return feats


def check_finite(loss: torch.Tensor, context: str) -> None:
    if not torch.isfinite(loss).all():
        raise TrainingDivergedError(f"non-finite loss during {context}")


def write_log_csv(path: Path | str, rows: list[dict], fieldnames: list[str]) -> None:
    """Write a training log as UTF-8 CSV with the given column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
