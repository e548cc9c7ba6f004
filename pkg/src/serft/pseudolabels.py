"""Multi-scale k-means pseudo-labels over tapped encoder features.

Frames from every utterance are pooled into one point set, clustered once
per scale (defaults [8, 32, 128] at desk scale; [64, 512, 4096] at full
scale), and each frame receives one cluster id per scale. Features come
from an intermediate layer of the stage-1 multi-task model (default tap
-3), so the auxiliary gender task's information is baked into the labels
through the features; the clustering itself is unsupervised.

File formats (little-endian):
  labels   ``GMP1`` | u32 S | S x u32 K_s | u32 T | T x S u32 ids, row-major
  codebook ``CBK1`` | u32 S | per scale: u32 K_s, u32 D, K_s x D float32
Codebook provenance (source checkpoint hash, tap, training utterance ids)
is stored in a ``<path>.meta`` sidecar.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import UtteranceRecord
from .encoder import Checkpoint, build_encoder, checkpoint_hash, resolve_tap
from .errors import ConfigError, DataError
from .training import derive_seed, materialize_features, pad_batch

logger = logging.getLogger(__name__)

LABEL_FILE_MAGIC = b"GMP1"
CODEBOOK_FILE_MAGIC = b"CBK1"


class TooFewPointsError(DataError):
    """Fewer points than requested clusters."""


class RangeViolationError(DataError):
    """Stored cluster id falls outside [0, K_s)."""


class CorruptFileError(DataError):
    """Label or codebook file truncated or mis-tagged."""


class EmptyInputError(DataError):
    """Quality metrics need at least one labeled frame."""


@dataclass
class ClusterConfig:
    """Scales, feature tap, and k-means controls for label extraction."""

    scales: tuple[int, ...] = (8, 32, 128)
    tap: int = -3
    max_iters: int = 100
    tol: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if not self.scales:
            raise ConfigError("at least one clustering scale required")
        if any(k < 1 for k in self.scales):
            raise ConfigError("scales must be positive")
        if any(a >= b for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"scales must be strictly increasing, got {self.scales}")
        if self.max_iters < 1 or self.tol < 0:
            raise ConfigError("max_iters must be >= 1 and tol >= 0")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    distortion_history: list[float]


@dataclass
class PseudoLabelSet:
    """Per-frame cluster ids for one utterance, one column per scale."""

    utterance_id: str
    labels: np.ndarray
    scales: tuple[int, ...]

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2 or self.labels.shape[1] != len(self.scales):
            raise DataError(
                f"labels must be (T, {len(self.scales)}), got shape {self.labels.shape}"
            )
        for s, k in enumerate(self.scales):
            col = self.labels[:, s]
            if col.size and (col.min() < 0 or col.max() >= k):
                raise RangeViolationError(
                    f"{self.utterance_id}: scale {s} ids outside [0, {k})"
                )

    @property
    def n_frames(self) -> int:
        return self.labels.shape[0]


@dataclass
class CodebookSet:
    """One centroid matrix per scale plus extraction provenance."""

    codebooks: list[np.ndarray]
    scales: tuple[int, ...]
    feature_dim: int
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.codebooks) != len(self.scales):
            raise ConfigError("one codebook per scale required")
        for cb, k in zip(self.codebooks, self.scales):
            if cb.shape != (k, self.feature_dim):
                raise ConfigError(f"codebook shape {cb.shape} != ({k}, {self.feature_dim})")
            if not np.isfinite(cb).all():
                raise DataError("codebook contains non-finite centroids")


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(N, K) squared Euclidean distances, clamped at zero."""
    d2 = (
        (points * points).sum(axis=1, keepdims=True)
        - 2.0 * points @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids by D^2 sampling."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    closest = _squared_distances(points, centroids[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # All remaining points coincide with a centroid; pick uniformly.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = points[idx]
        closest = np.minimum(closest, _squared_distances(points, centroids[j : j + 1]).ravel())
    return centroids


def fit_kmeans(
    points: np.ndarray,
    k: int,
    max_iters: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
) -> KMeansResult:
    """Lloyd's k-means with k-means++ initialization.

    Distortion (total squared distance to assigned centroids) is recorded
    after every assignment step and is non-increasing. Empty clusters are
    re-seeded to the point currently farthest from its centroid. Stops
    when the largest centroid shift drops below ``tol`` or after
    ``max_iters`` iterations.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DataError(f"points must be (N, D), got shape {points.shape}")
    n = points.shape[0]
    if n < k:
        raise TooFewPointsError(f"need at least {k} points for k={k}, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, k, rng)

    history: list[float] = []
    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        d2 = _squared_distances(points, centroids)
        assignments = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), assignments]
        history.append(float(point_d2.sum()))

        new_centroids = centroids.copy()
        counts = np.bincount(assignments, minlength=k)
        sums = np.empty_like(centroids)
        for dim in range(points.shape[1]):
            sums[:, dim] = np.bincount(assignments, weights=points[:, dim], minlength=k)
        nonempty = counts > 0
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            farthest = int(point_d2.argmax())
            new_centroids[j] = points[farthest]
            point_d2[farthest] = 0.0

        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break

    # Final assignment against the converged centroids.
    d2 = _squared_distances(points, centroids)
    assignments = d2.argmin(axis=1)
    history.append(float(d2[np.arange(n), assignments].sum()))
    return KMeansResult(centroids=centroids, assignments=assignments, distortion_history=history)


def assign_to_codebook(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid ids for a set of points."""
    return _squared_distances(np.asarray(points, dtype=np.float64), centroids).argmin(axis=1)


def _tapped_features(
    records: list[UtteranceRecord], ckpt: Checkpoint, tap: int, batch_size: int = 64
) -> list[np.ndarray]:
    """Tapped hidden states per utterance, batched for throughput."""
    resolve_tap(tap, ckpt.config.n_layers)
    encoder = build_encoder(ckpt)
    encoder.eval()
    feats = materialize_features(records, expected_dim=ckpt.config.input_dim)
    out: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = feats[start : start + batch_size]
            x, lengths = pad_batch(chunk)
            hidden = encoder(x, lengths=lengths, tap=tap)
            for i, t in enumerate(lengths.tolist()):
                out.append(hidden[i, :t].cpu().numpy().astype(np.float64))
    return out


def _ids_hash(ids: list[str]) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode("utf-8")).hexdigest()[:16]


def extract_pseudo_labels(
    records: list[UtteranceRecord],
    ckpt: Checkpoint,
    cfg: ClusterConfig,
) -> tuple[CodebookSet, dict[str, PseudoLabelSet]]:
    """Fit per-scale codebooks on all frames and label every frame.

    Frames from all utterances form one point set per run; each scale is
    clustered independently (with a seed derived from the config seed and
    the scale) and every frame is assigned at every scale. Deterministic
    given (records, checkpoint, config).
    """
    cfg.validate()
    if ckpt.stage_tag != "stage1":
        raise ConfigError(f"pseudo-label extraction expects a stage1 checkpoint, got {ckpt.stage_tag}")
    if not records:
        raise EmptyInputError("no records to extract labels from")

    per_utt = _tapped_features(records, ckpt, cfg.tap)
    points = np.concatenate(per_utt, axis=0)
    n_frames = points.shape[0]
    largest = cfg.scales[-1]
    if n_frames < largest:
        raise TooFewPointsError(
            f"largest scale K={largest} needs at least {largest} frames, corpus has {n_frames}"
        )

    codebooks: list[np.ndarray] = []
    all_assignments: list[np.ndarray] = []
    for k in cfg.scales:
        result = fit_kmeans(
            points, k, max_iters=cfg.max_iters, tol=cfg.tol, seed=derive_seed(cfg.seed, "scale", k)
        )
        codebooks.append(result.centroids)
        all_assignments.append(result.assignments)

    provenance = {
        "checkpoint_hash": checkpoint_hash(ckpt),
        "tap": str(cfg.tap),
        "n_points": str(n_frames),
        "utterance_ids_hash": _ids_hash([r.id for r in records]),
        "session_ids": ",".join(sorted({r.session_id for r in records})),
    }
    codebook_set = CodebookSet(
        codebooks=codebooks,
        scales=tuple(cfg.scales),
        feature_dim=points.shape[1],
        provenance=provenance,
    )

    labelsets: dict[str, PseudoLabelSet] = {}
    offset = 0
    for rec, frames in zip(records, per_utt):
        t = frames.shape[0]
        cols = [assign[offset : offset + t] for assign in all_assignments]
        labelsets[rec.id] = PseudoLabelSet(
            utterance_id=rec.id,
            labels=np.stack(cols, axis=1),
            scales=tuple(cfg.scales),
        )
        offset += t
    return codebook_set, labelsets


def label_with_codebooks(
    records: list[UtteranceRecord], ckpt: Checkpoint, codebook_set: CodebookSet, tap: int
) -> dict[str, PseudoLabelSet]:
    """Label new utterances with existing codebooks (no re-fitting)."""
    per_utt = _tapped_features(records, ckpt, tap)
    out: dict[str, PseudoLabelSet] = {}
    for rec, frames in zip(records, per_utt):
        cols = [assign_to_codebook(frames, cb) for cb in codebook_set.codebooks]
        out[rec.id] = PseudoLabelSet(
            utterance_id=rec.id, labels=np.stack(cols, axis=1), scales=codebook_set.scales
        )
    return out


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def write_pseudo_labels(labelset: PseudoLabelSet, path: Path | str) -> None:
    """Write one utterance's labels as a GMP1 file."""
    t, s = labelset.labels.shape
    with open(path, "wb") as f:
        f.write(LABEL_FILE_MAGIC)
        f.write(struct.pack("<I", s))
        f.write(struct.pack(f"<{s}I", *labelset.scales))
        f.write(struct.pack("<I", t))
        f.write(labelset.labels.astype("<u4").tobytes())


def read_pseudo_labels(path: Path | str) -> PseudoLabelSet:
    """Read a GMP1 file; the utterance id is the file stem."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read label file {path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != LABEL_FILE_MAGIC:
        raise CorruptFileError(f"{path}: missing GMP1 header")
    (s,) = struct.unpack("<I", raw[4:8])
    header_end = 8 + 4 * s + 4
    if len(raw) < header_end:
        raise CorruptFileError(f"{path}: truncated header")
    scales = struct.unpack(f"<{s}I", raw[8 : 8 + 4 * s])
    (t,) = struct.unpack("<I", raw[8 + 4 * s : header_end])
    expected = header_end + 4 * t * s
    if len(raw) != expected:
        raise CorruptFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    labels = np.frombuffer(raw[header_end:], dtype="<u4").reshape(t, s).astype(np.int64)
    return PseudoLabelSet(utterance_id=path.stem, labels=labels, scales=tuple(scales))


def write_codebooks(codebook_set: CodebookSet, path: Path | str) -> None:
    """Write a CBK1 codebook file plus its provenance sidecar."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CODEBOOK_FILE_MAGIC)
        f.write(struct.pack("<I", len(codebook_set.scales)))
        for cb, k in zip(codebook_set.codebooks, codebook_set.scales):
            f.write(struct.pack("<II", k, codebook_set.feature_dim))
            f.write(np.ascontiguousarray(cb, dtype="<f4").tobytes())
    lines = [f"{k}={v}" for k, v in sorted(codebook_set.provenance.items())]
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_codebooks(path: Path | str) -> CodebookSet:
    """Read a CBK1 file, restoring provenance from the sidecar if present."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read codebook file {path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != CODEBOOK_FILE_MAGIC:
        raise CorruptFileError(f"{path}: missing CBK1 header")
    (s,) = struct.unpack("<I", raw[4:8])
    pos = 8
    codebooks: list[np.ndarray] = []
    scales: list[int] = []
    dim = 0
    for _ in range(s):
        if len(raw) < pos + 8:
            raise CorruptFileError(f"{path}: truncated scale header")
        k, dim = struct.unpack("<II", raw[pos : pos + 8])
        pos += 8
        nbytes = 4 * k * dim
        if len(raw) < pos + nbytes:
            raise CorruptFileError(f"{path}: truncated centroids")
        cb = np.frombuffer(raw[pos : pos + nbytes], dtype="<f4").reshape(k, dim)
        codebooks.append(cb.astype(np.float64))
        scales.append(k)
        pos += nbytes
    if pos != len(raw):
        raise CorruptFileError(f"{path}: {len(raw) - pos} trailing bytes")
    provenance: dict[str, str] = {}
    meta = Path(str(path) + ".meta")
    if meta.exists():
        for line in meta.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                key, _, value = line.partition("=")
                provenance[key] = value
    return CodebookSet(
        codebooks=codebooks, scales=tuple(scales), feature_dim=dim, provenance=provenance
    )


# --------------------------------------------------------------------------
# Quality diagnostics
# --------------------------------------------------------------------------


def _entropy(counts: np.ndarray) -> float:
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def normalized_mutual_information(a: np.ndarray, b: np.ndarray) -> float:
    """NMI with arithmetic-mean normalization, in [0, 1].

    Two constant labelings count as perfectly aligned (1.0); if exactly
    one side is constant there is no shared information (0.0).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size == 0 or a.shape != b.shape:
        raise EmptyInputError("labelings must be equal-length and non-empty")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na, nb = ai.max() + 1, bi.max() + 1
    joint = np.zeros((na, nb))
    np.add.at(joint, (ai, bi), 1.0)
    n = joint.sum()
    pj = joint / n
    pa = pj.sum(axis=1)
    pb = pj.sum(axis=0)
    h_a = _entropy(pa)
    h_b = _entropy(pb)
    if h_a == 0.0 and h_b == 0.0:
        return 1.0
    if h_a == 0.0 or h_b == 0.0:
        return 0.0
    mask = pj > 0
    mi = float((pj[mask] * np.log(pj[mask] / np.outer(pa, pb)[mask])).sum())
    return mi / (0.5 * (h_a + h_b))


def cluster_quality(
    labelsets: dict[str, PseudoLabelSet], records: list[UtteranceRecord]
) -> dict[int, dict[str, float]]:
    """Per-scale purity and NMI against frame-inherited utterance emotion.

    Purity is the weighted max-category fraction per cluster, i.e. the
    accuracy of predicting each cluster's majority emotion.
    """
    if not records or not labelsets:
        raise EmptyInputError("cluster_quality needs records and labels")
    by_id = {r.id: r for r in records}
    scales: tuple[int, ...] | None = None
    cluster_cols: list[list[np.ndarray]] = []
    emotion_rows: list[np.ndarray] = []
    for utt_id, labelset in labelsets.items():
        if utt_id not in by_id:
            raise DataError(f"labelset for unknown utterance {utt_id!r}")
        if scales is None:
            scales = labelset.scales
            cluster_cols = [[] for _ in scales]
        elif labelset.scales != scales:
            raise DataError("labelsets disagree on scales")
        for s in range(len(scales)):
            cluster_cols[s].append(labelset.labels[:, s])
        emotion_rows.append(
            np.full(labelset.n_frames, by_id[utt_id].emotion.value, dtype=np.int64)
        )
    emotions = np.concatenate(emotion_rows)
    out: dict[int, dict[str, float]] = {}
    assert scales is not None
    for s, k in enumerate(scales):
        ids = np.concatenate(cluster_cols[s])
        joint = np.zeros((k, emotions.max() + 1))
        np.add.at(joint, (ids, emotions), 1.0)
        purity = float(joint.max(axis=1).sum() / joint.sum())
        out[k] = {
            "purity": purity,
            "nmi": normalized_mutual_information(ids, emotions),
        }
    return out
