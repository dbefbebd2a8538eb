"""Synthetic parallel multichannel corpus: generation, segmentation, splits,
normalization and on-disk persistence.

Every subject "hears" every stimulus. A stimulus is a set of smoothed-noise
source signals; a subject is a fixed linear mixing of those sources into the
channels plus a constant per-channel offset. Recordings of one stimulus are
therefore parallel: they share the content factor and differ in the subject
factor.
"""
from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._random import substream
from .exceptions import ConfigurationError, DataError, SplitError

SEGMENT_LENGTH = 32
NORM_EPS = 1e-8

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")

_FHVC_MAGIC = b"FHVC"
_FHVC_VERSION = 1


@dataclass(frozen=True)
class CorpusConfig:
    n_subjects: int = 8
    n_stimuli: int = 4
    stimulus_duration_s: float = 60.0
    sample_rate_hz: int = 64
    n_channels: int = 8
    subject_mix_strength: float = 1.0
    content_source_count: int = 4
    noise_std: float = 0.1
    smoothing_frames: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("n_subjects", "n_stimuli", "sample_rate_hz", "n_channels",
                     "content_source_count", "smoothing_frames"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.stimulus_duration_s <= 0:
            raise ConfigurationError("stimulus_duration_s must be positive")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if self.subject_mix_strength < 0:
            raise ConfigurationError("subject_mix_strength must be >= 0")

    @property
    def n_frames(self) -> int:
        return int(round(self.stimulus_duration_s * self.sample_rate_hz))

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown corpus config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc


@dataclass
class Recording:
    sequence_id: int
    subject_id: int
    stimulus_id: int
    frames: np.ndarray  # (T, C) float32


@dataclass(frozen=True)
class Segment:
    sequence_id: int
    index: int
    content_label: int
    data: np.ndarray


@dataclass
class LabelIndex:
    """Dense content labels. Label ``l`` is window ``offsets[l]`` of stimulus
    ``stimulus_ids[l]``; ``counts[l]`` is S(l), its number of occurrences."""

    stimulus_ids: np.ndarray
    offsets: np.ndarray
    counts: np.ndarray

    def __len__(self):
        return len(self.counts)

    def lookup(self) -> dict:
        return {(int(s), int(o)): l for l, (s, o) in enumerate(zip(self.stimulus_ids, self.offsets))}


@dataclass
class SegmentSet:
    """Column-oriented collection of fixed-length segments."""

    data: np.ndarray  # (N, T, C)
    sequence_ids: np.ndarray
    subject_ids: np.ndarray
    stimulus_ids: np.ndarray
    offsets: np.ndarray
    labels: np.ndarray
    split: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.split is None:
            self.split = np.full(len(self.labels), TRAIN, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Segment:
        return Segment(int(self.sequence_ids[i]), int(self.offsets[i]), int(self.labels[i]), self.data[i])

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]

    def subset(self, mask) -> "SegmentSet":
        return SegmentSet(
            self.data[mask], self.sequence_ids[mask], self.subject_ids[mask],
            self.stimulus_ids[mask], self.offsets[mask], self.labels[mask], self.split[mask],
        )

    def where_split(self, split: int) -> "SegmentSet":
        return self.subset(self.split == split)


@dataclass(frozen=True)
class SplitAssignment:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


# --------------------------------------------------------------------------
# generation


def _smoothed_sources(rng, n_frames, n_sources, width):
    white = rng.standard_normal((n_frames + width - 1, n_sources))
    kernel = np.ones(width) / width
    smooth = np.stack([np.convolve(white[:, k], kernel, mode="valid") for k in range(n_sources)], axis=1)
    # moving average of unit white noise has variance 1/width
    return smooth * np.sqrt(width)


def generate_corpus(cfg: CorpusConfig) -> list[Recording]:
    """Generate ``n_subjects * n_stimuli`` parallel recordings.

    Sequence ids are subject-major: ``subject * n_stimuli + stimulus``.
    """
    T, C, k = cfg.n_frames, cfg.n_channels, cfg.content_source_count
    if T < SEGMENT_LENGTH:
        raise ConfigurationError(f"recordings of {T} frames are shorter than one segment")

    base_mix = substream(cfg.seed, "mixing").standard_normal((C, k)) / np.sqrt(k)
    sources = [
        _smoothed_sources(substream(cfg.seed, "stimulus", m), T, k, cfg.smoothing_frames)
        for m in range(cfg.n_stimuli)
    ]
    recordings = []
    for j in range(cfg.n_subjects):
        rng = substream(cfg.seed, "subject", j)
        mix = base_mix + cfg.subject_mix_strength * rng.standard_normal((C, k)) / np.sqrt(k)
        offset = cfg.subject_mix_strength * rng.standard_normal(C)
        for m in range(cfg.n_stimuli):
            frames = sources[m] @ mix.T + offset
            if cfg.noise_std > 0:
                frames = frames + cfg.noise_std * substream(cfg.seed, "noise", j, m).standard_normal((T, C))
            recordings.append(Recording(j * cfg.n_stimuli + m, j, m, frames.astype(np.float32)))
    return recordings


# --------------------------------------------------------------------------
# segmentation and splitting


def segment_and_label(recordings: list[Recording], seg_len: int = SEGMENT_LENGTH) -> tuple[SegmentSet, LabelIndex]:
    """Cut recordings into non-overlapping windows and assign content labels.

    Labels enumerate ``(stimulus_id, window offset)`` pairs in sorted order, so
    parallel recordings get identical label sequences. Trailing frames that do
    not fill a window are dropped.
    """
    if seg_len < 1:
        raise ConfigurationError("seg_len must be >= 1")
    if not recordings:
        empty = np.zeros(0, dtype=np.int64)
        return (SegmentSet(np.zeros((0, seg_len, 0), np.float32), empty, empty, empty, empty, empty),
                LabelIndex(empty, empty, empty))

    n_windows = {}
    for r in recordings:
        n = r.frames.shape[0] // seg_len
        n_windows[r.stimulus_id] = max(n_windows.get(r.stimulus_id, 0), n)
    keys = [(s, o) for s in sorted(n_windows) for o in range(n_windows[s])]
    lookup = {key: l for l, key in enumerate(keys)}

    data, seq, subj, stim, offs, labs = [], [], [], [], [], []
    for r in recordings:
        n = r.frames.shape[0] // seg_len
        data.append(r.frames[: n * seg_len].reshape(n, seg_len, -1))
        seq.append(np.full(n, r.sequence_id))
        subj.append(np.full(n, r.subject_id))
        stim.append(np.full(n, r.stimulus_id))
        offs.append(np.arange(n))
        labs.append(np.array([lookup[(r.stimulus_id, o)] for o in range(n)], dtype=np.int64))
    labels = np.concatenate(labs)
    counts = np.bincount(labels, minlength=len(keys))
    segments = SegmentSet(
        np.concatenate(data), np.concatenate(seq).astype(np.int64), np.concatenate(subj).astype(np.int64),
        np.concatenate(stim).astype(np.int64), np.concatenate(offs).astype(np.int64), labels,
    )
    index = LabelIndex(np.array([k[0] for k in keys], np.int64), np.array([k[1] for k in keys], np.int64), counts)
    return segments, index


def split_recording(n_segments: int) -> SplitAssignment:
    """Train on the first and last 40%; the middle block is halved into
    validation then test, with any rounding remainder going to test."""
    if n_segments < 5:
        raise SplitError(f"need at least 5 segments to split, got {n_segments}")
    edge = (2 * n_segments) // 5
    middle = np.arange(edge, n_segments - edge)
    n_val = len(middle) // 2
    return SplitAssignment(
        train=np.concatenate([np.arange(edge), np.arange(n_segments - edge, n_segments)]),
        val=middle[:n_val],
        test=middle[n_val:],
    )


def assign_splits(segments: SegmentSet) -> SegmentSet:
    """Fill ``segments.split`` per recording, in place; returns ``segments``."""
    for sid in np.unique(segments.sequence_ids):
        rows = np.flatnonzero(segments.sequence_ids == sid)
        rows = rows[np.argsort(segments.offsets[rows], kind="stable")]
        a = split_recording(len(rows))
        segments.split[rows[a.train]] = TRAIN
        segments.split[rows[a.val]] = VAL
        segments.split[rows[a.test]] = TEST
    return segments


# --------------------------------------------------------------------------
# normalization


def compute_norm_stats(data: np.ndarray) -> NormStats:
    flat = np.asarray(data, dtype=np.float64).reshape(-1, data.shape[-1])
    return NormStats(flat.mean(axis=0), flat.std(axis=0))


def normalize(data: np.ndarray, stats: NormStats) -> np.ndarray:
    scale = np.maximum(stats.std, NORM_EPS)
    return ((data - stats.mean) / scale).astype(data.dtype, copy=False)


class ChannelScaler(TransformerMixin, BaseEstimator):
    """Per-channel standardization of ``(n_segments, n_frames, n_channels)`` arrays."""

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 3 or len(X) == 0:
            raise DataError("expected a non-empty (n_segments, n_frames, n_channels) array")
        stats = compute_norm_stats(X)
        self.mean_, self.std_ = stats.mean, stats.std
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        return normalize(np.asarray(X), NormStats(self.mean_, self.std_))


# --------------------------------------------------------------------------
# dataset assembly


@dataclass
class Dataset:
    """Normalized, split segments of a corpus plus its label table."""

    segments: SegmentSet
    labels: LabelIndex
    stats: NormStats
    n_sequences: int

    @property
    def train(self):
        return self.segments.where_split(TRAIN)

    @property
    def val(self):
        return self.segments.where_split(VAL)

    @property
    def test(self):
        return self.segments.where_split(TEST)


def build_dataset(recordings: list[Recording], seg_len: int = SEGMENT_LENGTH) -> Dataset:
    if not recordings:
        raise DataError("corpus has no recordings")
    segments, labels = segment_and_label(recordings, seg_len)
    assign_splits(segments)
    stats = compute_norm_stats(segments.data[segments.split == TRAIN])
    segments.data = normalize(segments.data, stats)
    n_seq = int(max(r.sequence_id for r in recordings)) + 1
    return Dataset(segments, labels, stats, n_seq)


# --------------------------------------------------------------------------
# persistence


def write_frames(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    T, C = frames.shape
    with open(path, "wb") as fh:
        fh.write(_FHVC_MAGIC + struct.pack("<III", _FHVC_VERSION, T, C))
        fh.write(frames.tobytes())


def read_frames(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != _FHVC_MAGIC:
            raise DataError(f"{path}: not an FHVC recording file")
        version, T, C = struct.unpack("<III", head[4:])
        if version != _FHVC_VERSION:
            raise DataError(f"{path}: unsupported FHVC version {version}")
        payload = fh.read()
    if len(payload) != 4 * T * C:
        raise DataError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(T, C).astype(np.float32)


def save_corpus(directory, cfg: CorpusConfig, recordings: list[Recording], seg_len: int = SEGMENT_LENGTH) -> None:
    """Write ``corpus.json`` and one ``.fhvc`` file per recording.

    Files are staged in a sibling temp directory and moved into place at the
    end, so a failure leaves no partial corpus behind.
    """
    directory = Path(directory)
    segments, labels = segment_and_label(recordings, seg_len)
    assign_splits(segments)
    parent = directory.parent
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".corpus-", dir=parent))
    try:
        entries, splits = [], {}
        for r in recordings:
            name = f"seq{r.sequence_id:05d}.fhvc"
            write_frames(tmp / name, r.frames)
            entries.append({"sequence_id": r.sequence_id, "subject_id": r.subject_id,
                            "stimulus_id": r.stimulus_id, "n_frames": int(r.frames.shape[0]), "file": name})
            rows = segments.sequence_ids == r.sequence_id
            splits[str(r.sequence_id)] = {
                SPLIT_NAMES[s]: segments.offsets[rows & (segments.split == s)].tolist() for s in (TRAIN, VAL, TEST)
            }
        meta = {
            "config": asdict(cfg),
            "segment_length": seg_len,
            "recordings": entries,
            "labels": [{"label": l, "stimulus_id": int(s), "offset": int(o), "count": int(c)}
                       for l, (s, o, c) in enumerate(zip(labels.stimulus_ids, labels.offsets, labels.counts))],
            "splits": splits,
        }
        with open(tmp / "corpus.json", "w") as fh:
            json.dump(meta, fh, indent=1)
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_corpus(directory) -> tuple[CorpusConfig, list[Recording], int]:
    directory = Path(directory)
    try:
        with open(directory / "corpus.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"{directory}: no corpus.json") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{directory}/corpus.json: {exc}") from exc
    cfg = CorpusConfig.from_dict(meta["config"])
    recordings = [
        Recording(e["sequence_id"], e["subject_id"], e["stimulus_id"], read_frames(directory / e["file"]))
        for e in meta["recordings"]
    ]
    return cfg, recordings, int(meta.get("segment_length", SEGMENT_LENGTH))
