"""Corpus handling: labeled utterances, manifests, features, synthetic data.

An utterance carries a frame-feature matrix (either inline or as a path to
an ``FTM1`` binary file), a four-way emotion label, a binary gender label,
and speaker/session identity used for speaker-independent cross-validation.

The synthetic generator produces an IEMOCAP-shaped corpus (5 sessions,
speakers split evenly across sessions, one gender per speaker) whose
frame features are drawn from category-conditioned Gaussians, so the
whole pipeline can be exercised and verified at desk scale.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

FEATURE_FILE_MAGIC = b"FTM1"

# Nominal frame rate of a HuBERT-style 20 ms stride front end.
DEFAULT_FRAME_RATE_HZ = 50.0


class UnknownLabelError(DataError):
    """Raw emotion tag outside the accepted set."""


class MalformedManifestError(DataError):
    """Manifest line does not parse."""


class DuplicateIdError(DataError):
    """Utterance id repeated within one corpus."""


class InvalidSpecError(ConfigError):
    """Synthetic corpus spec violates its invariants."""


class EmptySignalError(DataError):
    """Waveform shorter than one analysis window."""


class NonFiniteInputError(DataError):
    """Waveform contains NaN or infinity."""


class CorruptFeatureFileError(DataError):
    """Feature file truncated or carries a bad header."""


class EmotionLabel(Enum):
    ANGRY = 0
    HAPPY = 1
    NEUTRAL = 2
    SAD = 3


class GenderLabel(Enum):
    MALE = 0
    FEMALE = 1


N_EMOTIONS = len(EmotionLabel)
N_GENDERS = len(GenderLabel)

# Raw tag -> canonical category. "excited" folds into "happy"; everything
# else (frustrated, fearful, ...) is rejected and excluded upstream.
_RAW_EMOTION_MAP = {
    "angry": EmotionLabel.ANGRY,
    "happy": EmotionLabel.HAPPY,
    "excited": EmotionLabel.HAPPY,
    "neutral": EmotionLabel.NEUTRAL,
    "sad": EmotionLabel.SAD,
}

_RAW_GENDER_MAP = {
    "male": GenderLabel.MALE,
    "m": GenderLabel.MALE,
    "female": GenderLabel.FEMALE,
    "f": GenderLabel.FEMALE,
}


def map_emotion_label(raw: str) -> EmotionLabel:
    """Canonicalize a raw emotion tag to one of the four categories.

    Accepts angry/happy/excited/neutral/sad (case-insensitive); "excited"
    merges into HAPPY. Any other tag raises UnknownLabelError.
    """
    key = raw.strip().lower()
    try:
        return _RAW_EMOTION_MAP[key]
    except KeyError:
        raise UnknownLabelError(f"unknown emotion tag: {raw!r}") from None


def map_gender_label(raw: str) -> GenderLabel:
    """Canonicalize a raw gender tag (male/m / female/f, case-insensitive)."""
    key = raw.strip().lower()
    try:
        return _RAW_GENDER_MAP[key]
    except KeyError:
        raise UnknownLabelError(f"unknown gender tag: {raw!r}") from None


@dataclass
class FrameFeatureMatrix:
    """T x D real-valued frame representation of one utterance.

    frames: float32 array of shape (T, D), all values finite, T >= 1.
    frame_rate_hz: frames per second (nominal 50 for a 20 ms stride).
    """

    frames: np.ndarray
    frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"feature matrix must be (T>=1, D), got shape {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise DataError("feature matrix contains non-finite values")
        if self.frame_rate_hz <= 0:
            raise DataError("frame_rate_hz must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class UtteranceRecord:
    """One labeled utterance.

    Features are either inline (``features``) or on disk (``feature_path``);
    ``load_features`` resolves whichever is present and caches the result.
    """

    id: str
    emotion: EmotionLabel
    gender: GenderLabel | None
    speaker_id: str
    session_id: str
    feature_path: Path | None = None
    features: FrameFeatureMatrix | None = None

    def load_features(self) -> FrameFeatureMatrix:
        if self.features is None:
            if self.feature_path is None:
                raise DataError(f"utterance {self.id!r} has neither inline features nor a path")
            self.features = read_feature_file(self.feature_path)
        return self.features


def write_feature_file(matrix: FrameFeatureMatrix, path: Path | str) -> None:
    """Write an FTM1 file: magic, u32 T, u32 D, then T*D little-endian float32."""
    frames = np.ascontiguousarray(matrix.frames, dtype="<f4")
    t, d = frames.shape
    with open(path, "wb") as f:
        f.write(FEATURE_FILE_MAGIC)
        f.write(struct.pack("<II", t, d))
        f.write(frames.tobytes())


def read_feature_file(path: Path | str) -> FrameFeatureMatrix:
    """Read an FTM1 file back into a FrameFeatureMatrix."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != FEATURE_FILE_MAGIC:
        raise CorruptFeatureFileError(f"{path}: missing FTM1 header")
    t, d = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * t * d
    if len(raw) != expected:
        raise CorruptFeatureFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    frames = np.frombuffer(raw[12:], dtype="<f4").reshape(t, d)
    return FrameFeatureMatrix(frames=frames.copy())


def load_manifest(path: Path | str, *, drop_unknown: bool = True) -> list[UtteranceRecord]:
    """Load a tab-separated manifest of utterances.

    Each line holds ``id  feature_path  raw_emotion  gender  speaker_id
    session_id``; lines starting with ``#`` and blank lines are skipped.
    Relative feature paths resolve against the manifest's directory.

    Records whose raw emotion falls outside the five accepted tags are
    dropped (count logged) when ``drop_unknown`` is set, mirroring the
    usual four-way IEMOCAP convention; with ``drop_unknown=False`` such a
    record raises UnknownLabelError instead.
    """
    path = Path(path)
    base = path.parent
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    n_dropped = 0
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise MalformedManifestError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(fields)}")
        utt_id, feat_path, raw_emotion, raw_gender, speaker_id, session_id = (f.strip() for f in fields)
        if not utt_id or not speaker_id or not session_id:
            raise MalformedManifestError(f"{path}:{lineno}: empty id/speaker/session field")
        if utt_id in seen:
            raise DuplicateIdError(f"{path}:{lineno}: duplicate utterance id {utt_id!r}")
        seen.add(utt_id)
        try:
            emotion = map_emotion_label(raw_emotion)
        except UnknownLabelError:
            if drop_unknown:
                n_dropped += 1
                continue
            raise
        gender = map_gender_label(raw_gender)
        resolved = Path(feat_path)
        if not resolved.is_absolute():
            resolved = base / resolved
        records.append(
            UtteranceRecord(
                id=utt_id,
                emotion=emotion,
                gender=gender,
                speaker_id=speaker_id,
                session_id=session_id,
                feature_path=resolved,
            )
        )
    if n_dropped:
        logger.info("dropped %d utterance(s) with out-of-set emotion tags", n_dropped)
    return records


def write_manifest(records: list[UtteranceRecord], path: Path | str, feature_dir: Path | str) -> None:
    """Write records (and their FTM1 feature files) under ``feature_dir``.

    Inline features are materialized to ``<feature_dir>/<id>.ftm``; records
    that already point at a file keep their path. Stored paths are made
    relative to the manifest's directory when they live under it, so the
    manifest stays relocatable and round-trips through load_manifest.
    """
    path = Path(path)
    base = path.resolve().parent
    feature_dir = Path(feature_dir)
    feature_dir.mkdir(parents=True, exist_ok=True)
    lines = ["#id\tfeature_path\temotion\tgender\tspeaker_id\tsession_id"]
    for rec in records:
        if rec.gender is None:
            raise DataError(f"utterance {rec.id!r} has no gender label")
        if rec.features is not None:
            feat_path = feature_dir / f"{rec.id}.ftm"
            write_feature_file(rec.features, feat_path)
        elif rec.feature_path is not None:
            feat_path = rec.feature_path
        else:
            raise DataError(f"utterance {rec.id!r} has no features to write")
        resolved = Path(feat_path).resolve()
        try:
            stored = resolved.relative_to(base)
        except ValueError:
            stored = resolved
        emotion_tag = rec.emotion.name.lower()
        gender_tag = rec.gender.name.lower()
        lines.append(
            f"{rec.id}\t{stored}\t{emotion_tag}\t{gender_tag}\t{rec.speaker_id}\t{rec.session_id}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Log-mel filterbank front end
# --------------------------------------------------------------------------

LOG_FLOOR = 1e-10


def _mel_scale(hz: np.ndarray) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + hz / 700.0)


def _mel_to_hz(mel: np.ndarray) -> np.ndarray:
    return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)


def _mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters, (n_mels, n_fft//2 + 1)."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(0.0, _mel_scale(np.array(nyquist)), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bins = np.floor((n_fft + 1) * hz_points / sample_rate).astype(int)
    fbank = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(1, n_mels + 1):
        left, center, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, center):
            if center > left:
                fbank[m - 1, k] = (k - left) / (center - left)
        for k in range(center, right):
            if right > center:
                fbank[m - 1, k] = (right - k) / (right - center)
    return fbank


def compute_frontend(
    waveform: np.ndarray,
    sample_rate: int = 16_000,
    *,
    n_mels: int = 40,
    window_ms: float = 25.0,
    hop_ms: float = 20.0,
) -> FrameFeatureMatrix:
    """Log-magnitude mel filterbank features at a 20 ms stride (50 Hz).

    Frames are cut without padding: ``T = (len - window) // hop + 1``, so a
    signal shorter than one window raises EmptySignalError, and shifting
    the waveform by exactly one hop shifts frame contents by one index.
    Filterbank energies are floored at 1e-10 before the log, which keeps
    silence finite (every band equals ``log(1e-10)``).
    """
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if not np.isfinite(waveform).all():
        raise NonFiniteInputError("waveform contains non-finite samples")
    window = int(round(sample_rate * window_ms / 1000.0))
    hop = int(round(sample_rate * hop_ms / 1000.0))
    if waveform.size < window:
        raise EmptySignalError(f"waveform has {waveform.size} samples, need at least {window}")
    n_frames = (waveform.size - window) // hop + 1
    n_fft = 1
    while n_fft < window:
        n_fft *= 2
    win = np.hanning(window)
    fbank = _mel_filterbank(n_mels, n_fft, sample_rate)
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = waveform[idx] * win[None, :]
    spectrum = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = spectrum @ fbank.T
    feats = np.log(np.maximum(energies, LOG_FLOOR))
    return FrameFeatureMatrix(
        frames=feats.astype(np.float32), frame_rate_hz=sample_rate / hop
    )


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------


@dataclass
class SyntheticCorpusSpec:
    """Desk-scale stand-in for an IEMOCAP-style corpus.

    Per-frame means are ``mu(emotion) + nu(gender)`` where the four emotion
    means sit pairwise ``separability`` apart (in units of the within-
    category standard deviation, which is 1) and the gender offset has half
    the emotion offset's norm, so the auxiliary task is learnable without
    dominating. Speakers split evenly across the 5 sessions, alternating
    gender within each session.
    """

    n_utterances: int
    n_speakers: int
    feature_dim: int
    frame_range: tuple[int, int]
    separability: float
    seed: int
    n_sessions: int = 5

    def validate(self) -> None:
        if self.n_sessions != 5:
            raise InvalidSpecError("n_sessions must be 5 for the cross-validation layout")
        if self.n_utterances < 1:
            raise InvalidSpecError("n_utterances must be positive")
        if self.n_speakers < self.n_sessions or self.n_speakers % self.n_sessions != 0:
            raise InvalidSpecError("n_speakers must be a positive multiple of 5")
        if self.feature_dim < 5:
            raise InvalidSpecError("feature_dim must be >= 5 (4 emotion axes + 1 gender axis)")
        t_min, t_max = self.frame_range
        if t_min < 1 or t_min > t_max:
            raise InvalidSpecError(f"bad frame_range {self.frame_range}")
        if self.separability < 0:
            raise InvalidSpecError("separability must be non-negative")


# Gender offset norm relative to the emotion offset norm.
GENDER_SIGNAL_RATIO = 0.5


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> list[UtteranceRecord]:
    """Generate a deterministic labeled corpus from a SyntheticCorpusSpec.

    Emotions are assigned round-robin (marginals uniform up to remainder)
    and each utterance's session equals its speaker's session. Identical
    specs produce byte-identical feature matrices.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    per_session = spec.n_speakers // spec.n_sessions

    speakers = []
    for s in range(spec.n_speakers):
        session = s // per_session + 1
        gender = GenderLabel.MALE if s % 2 == 0 else GenderLabel.FEMALE
        speakers.append((f"spk{s:02d}", f"Ses{session:02d}", gender))

    # Emotion axes occupy dims 0..3, the gender axis dim 4. Pairwise
    # distance between emotion means is exactly `separability`.
    emo_scale = spec.separability / np.sqrt(2.0)
    gender_scale = GENDER_SIGNAL_RATIO * emo_scale
    t_min, t_max = spec.frame_range

    records: list[UtteranceRecord] = []
    for i in range(spec.n_utterances):
        # Emotion cycles fastest, speaker advances once per emotion cycle, so
        # every speaker sees every category and marginals stay uniform.
        speaker_id, session_id, gender = speakers[(i // N_EMOTIONS) % spec.n_speakers]
        emotion = EmotionLabel(i % N_EMOTIONS)
        n_frames = int(rng.integers(t_min, t_max + 1))
        mean = np.zeros(spec.feature_dim)
        mean[emotion.value] = emo_scale
        mean[4] = gender_scale if gender is GenderLabel.MALE else -gender_scale
        frames = mean + rng.standard_normal((n_frames, spec.feature_dim))
        records.append(
            UtteranceRecord(
                id=f"utt{i:04d}",
                emotion=emotion,
                gender=gender,
                speaker_id=speaker_id,
                session_id=session_id,
                features=FrameFeatureMatrix(frames=frames.astype(np.float32)),
            )
        )
    return records
