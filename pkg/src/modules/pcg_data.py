"""Phonocardiogram ingestion, S1-systolic segment extraction and sample building."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.io import wavfile

from .errors import IngestionError, ShapeError
from .labels import Location, LabelSet, Murmur, PatientLabels

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE_HZ = 4000
DEFAULT_SEGMENTS_PER_SAMPLE = 10
DEFAULT_SEGMENT_LENGTH = 1024
STANDARDIZE_EPSILON = 1e-8
PCM_SCALE = 32768.0


class State(IntEnum):
    """Cardiac cycle states as coded in segmentation files."""

    UNLABELED = 0
    S1 = 1
    SYSTOLE = 2
    S2 = 3
    DIASTOLE = 4


@dataclass(frozen=True)
class AudioRecording:
    """One single-channel PCG recording at one auscultation point."""

    patient_id: str
    location: Location
    sample_rate_hz: int
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise IngestionError(f"sample rate must be positive, got {self.sample_rate_hz}", self.recording_id)
        if not np.all(np.isfinite(self.samples)):
            raise IngestionError("recording contains non-finite samples", self.recording_id)

    @property
    def recording_id(self) -> str:
        return f"{self.patient_id}_{Location(self.location).value}"

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class StateInterval:
    start_s: float
    end_s: float
    state: State


@dataclass
class Sample:
    """N standardized S1-systolic segments of one recording sharing one LabelSet.

    The last `pad_count` rows of `segments` are zero padding.
    """

    segments: np.ndarray = field(repr=False)
    labels: LabelSet
    patient_id: str = ""
    location: Location = Location.AV
    pad_count: int = 0
    recording_id: str = ""


def parse_timestamp_rows(rows: Union[str, Iterable[str]], source: str = "") -> List[StateInterval]:
    """Parse `start_s end_s state_code` rows into validated intervals.

    Args:
        rows (Union[str, Iterable[str]]): TSV text or its lines.
        source (str, optional): File name used in diagnostics.

    Returns:
        List[StateInterval]: Intervals in file order; sorted and non-overlapping.
    """
    lines = rows.splitlines() if isinstance(rows, str) else list(rows)
    intervals: List[StateInterval] = []
    for row, line in enumerate(lines, 1):
        if not line.strip():
            continue
        fields = line.rstrip("\r\n").split("\t")
        if len(fields) != 3:
            raise IngestionError(f"expected 3 tab-separated fields, got {len(fields)}", source, row)
        try:
            start_s, end_s = float(fields[0]), float(fields[1])
            code = int(float(fields[2]))
        except ValueError:
            raise IngestionError(f"non-numeric field in {line.strip()!r}", source, row)
        if code not in State._value2member_map_:
            raise IngestionError(f"state code {code} outside 0-4", source, row)
        if not (np.isfinite(start_s) and np.isfinite(end_s)) or start_s < 0:
            raise IngestionError(f"invalid start time {start_s}", source, row)
        if end_s <= start_s:
            raise IngestionError(f"interval end {end_s} is not after start {start_s}", source, row)
        if intervals and start_s < intervals[-1].end_s - 1e-9:
            raise IngestionError(
                f"interval starting at {start_s} overlaps or precedes the previous one ending at {intervals[-1].end_s}",
                source,
                row,
            )
        intervals.append(StateInterval(start_s, end_s, State(code)))
    return intervals


def format_timestamp_rows(intervals: Iterable[StateInterval]) -> str:
    """Render intervals in the segmentation TSV format."""
    return "".join(f"{interval.start_s:.6f}\t{interval.end_s:.6f}\t{int(interval.state)}\n" for interval in intervals)


def encode_wav(samples: np.ndarray, sample_rate_hz: int = DEFAULT_SAMPLE_RATE_HZ) -> bytes:
    """Write a waveform in [-1, 1) as mono 16-bit little-endian PCM in a RIFF container.

    Args:
        samples (np.ndarray): Waveform.
        sample_rate_hz (int, optional): Declared sample rate.

    Returns:
        bytes: WAV file contents.
    """
    pcm = np.clip(np.round(np.asarray(samples, dtype=float) * PCM_SCALE), -PCM_SCALE, PCM_SCALE - 1).astype("<i2")
    buffer = io.BytesIO()
    wavfile.write(buffer, int(sample_rate_hz), pcm)
    return buffer.getvalue()


def parse_recording(
    audio_bytes: bytes,
    timestamp_rows: Union[str, Iterable[str]],
    patient_id: str = "",
    location: Location = Location.AV,
    source: str = "",
) -> Tuple[AudioRecording, List[StateInterval]]:
    """Decode a mono 16-bit PCM recording and its segmentation rows.

    Args:
        audio_bytes (bytes): WAV file contents.
        timestamp_rows (Union[str, Iterable[str]]): Segmentation TSV text or lines.
        patient_id (str, optional): Patient the recording belongs to.
        location (Location, optional): Auscultation point.
        source (str, optional): Name used in diagnostics.

    Returns:
        Tuple[AudioRecording, List[StateInterval]]: Waveform scaled to [-1, 1) and its intervals.
    """
    if not audio_bytes:
        raise IngestionError("no samples", source)
    lines = timestamp_rows.splitlines() if isinstance(timestamp_rows, str) else list(timestamp_rows)
    try:
        sample_rate_hz, data = wavfile.read(io.BytesIO(audio_bytes))
    except (ValueError, EOFError, OSError, struct.error) as error:
        raise IngestionError(f"malformed header: {error}", source) from error

    if data.ndim != 1:
        raise IngestionError(f"expected mono audio, got {data.shape[1]} channels", source)
    if data.dtype != np.int16:
        raise IngestionError(f"expected 16-bit signed PCM, got {data.dtype}", source)
    if data.size == 0:
        raise IngestionError("no samples", source)

    recording = AudioRecording(patient_id, Location(location), int(sample_rate_hz), data.astype(np.float64) / PCM_SCALE)
    intervals = parse_timestamp_rows(lines, source)

    data_rows = [row for row, line in enumerate(lines, 1) if line.strip()]
    for row, interval in zip(data_rows, intervals):
        if int(round(interval.end_s * recording.sample_rate_hz)) > len(recording.samples):
            raise IngestionError(
                f"interval end {interval.end_s}s beyond recording length {recording.duration_s:.6f}s", source, row
            )
    return recording, intervals


def extract_s1_systolic_segments(recording: AudioRecording, intervals: Sequence[StateInterval]) -> List[np.ndarray]:
    """Slice every S1 interval immediately followed by a Systole interval.

    Args:
        recording (AudioRecording): Source waveform.
        intervals (Sequence[StateInterval]): Validated segmentation.

    Returns:
        List[np.ndarray]: Raw segments from S1 start to systole end, in temporal order.
    """
    rate = recording.sample_rate_hz
    segments = []
    for current, following in zip(intervals, intervals[1:]):
        if current.state is State.S1 and following.state is State.SYSTOLE:
            start = int(round(current.start_s * rate))
            end = int(round(following.end_s * rate))
            segments.append(recording.samples[start:end].copy())
    return segments


def resample_to_length(segment: np.ndarray, length: int = DEFAULT_SEGMENT_LENGTH) -> np.ndarray:
    """Linearly interpolate a segment onto `length` evenly spaced points.

    Args:
        segment (np.ndarray): Raw segment, at least 2 points.
        length (int, optional): Output length, at least 2.

    Returns:
        np.ndarray: Resampled segment with identical endpoints.
    """
    values = np.asarray(segment, dtype=float)
    if values.shape[0] < 2:
        raise ShapeError(f"cannot resample a segment of {values.shape[0]} points")
    if length < 2:
        raise ShapeError(f"target length must be at least 2, got {length}")
    positions = np.linspace(0.0, values.shape[0] - 1, length)
    return np.interp(positions, np.arange(values.shape[0]), values)


def standardize(vector: np.ndarray, mode: str = "unit", epsilon: float = STANDARDIZE_EPSILON) -> np.ndarray:
    """Zero-mean standardization; `mode="unit"` also divides by the population std.

    Args:
        vector (np.ndarray): Finite input.
        mode (str, optional): "unit" or "mean".
        epsilon (float, optional): Added to the std before dividing.

    Returns:
        np.ndarray: Standardized copy; all zeros for constant input.
    """
    values = np.asarray(vector, dtype=float)
    if values.size == 0 or np.ptp(values) == 0:
        return np.zeros_like(values)
    centred = values - values.mean()
    if mode == "mean":
        return centred
    if mode != "unit":
        raise ValueError(f"unknown standardization mode {mode!r}")
    return centred / (values.std() + epsilon)


def preprocess_segments(
    segments: Iterable[np.ndarray], length: int = DEFAULT_SEGMENT_LENGTH, mode: str = "unit"
) -> List[np.ndarray]:
    """Resample then standardize every raw segment; segments under 2 points are dropped."""
    prepared = []
    for segment in segments:
        if len(segment) < 2:
            logger.debug("dropping a %d-point segment", len(segment))
            continue
        prepared.append(standardize(resample_to_length(segment, length), mode))
    return prepared


def _stack_rows(rows: Sequence[np.ndarray], n_segments: int) -> Tuple[np.ndarray, int]:
    length = len(rows[0])
    matrix = np.zeros((n_segments, length))
    for index, row in enumerate(rows):
        if len(row) != length:
            raise ShapeError(f"segment {index} has {len(row)} points, expected {length}")
        matrix[index] = row
    return matrix, n_segments - len(rows)


def build_samples(
    segments: Sequence[np.ndarray],
    labels: LabelSet,
    n_segments: int = DEFAULT_SEGMENTS_PER_SAMPLE,
    rng_seed: int = 0,
    patient_id: str = "",
    location: Location = Location.AV,
    recording_id: str = "",
) -> List[Sample]:
    """Turn one recording's segment sequence into labelled samples.

    Murmur recordings get a step-1 sliding window (one padded sample when
    shorter than the window). Normal recordings longer than the window get two
    independent ordered draws without replacement; otherwise one sample,
    padded when short.

    Args:
        segments (Sequence[np.ndarray]): Resampled, standardized segments.
        labels (LabelSet): Labels shared by every sample.
        n_segments (int, optional): Segments per sample.
        rng_seed (int, optional): Seed for the normal-branch draws.
        patient_id (str, optional): Carried into every sample.
        location (Location, optional): Carried into every sample.
        recording_id (str, optional): Carried into every sample.

    Returns:
        List[Sample]: Samples in window/draw order.
    """
    if n_segments < 1:
        raise ValueError(f"segments per sample must be at least 1, got {n_segments}")
    count = len(segments)
    if count == 0:
        return []

    def make(rows: Sequence[np.ndarray]) -> Sample:
        matrix, pad_count = _stack_rows(rows, n_segments)
        return Sample(matrix, labels, patient_id, Location(location), pad_count, recording_id)

    if labels.is_murmur:
        if count < n_segments:
            return [make(segments)]
        return [make(segments[start : start + n_segments]) for start in range(count - n_segments + 1)]

    if count <= n_segments:
        return [make(segments)]
    rng = np.random.default_rng(rng_seed)
    samples = []
    for _ in range(2):
        chosen = np.sort(rng.choice(count, size=n_segments, replace=False))
        samples.append(make([segments[index] for index in chosen]))
    return samples


def window_segments(segments: Sequence[np.ndarray], n_segments: int = DEFAULT_SEGMENTS_PER_SAMPLE) -> List[Tuple[np.ndarray, int]]:
    """Cut a segment sequence into non-overlapping windows, zero-padding the tail.

    Args:
        segments (Sequence[np.ndarray]): Prepared segments of one recording.
        n_segments (int, optional): Window size.

    Returns:
        List[Tuple[np.ndarray, int]]: (N x L matrix, pad_count) per window.
    """
    return [_stack_rows(segments[start : start + n_segments], n_segments) for start in range(0, len(segments), n_segments)]


@dataclass(frozen=True)
class ManifestEntry:
    """One recording listed in a dataset manifest; paths are as written in the file."""

    patient_id: str
    location: Location
    audio: str
    segmentation: str
    labels: str


def write_manifest(path: Union[str, Path], entries: Sequence[ManifestEntry]) -> Path:
    """Write a dataset manifest as JSON.

    Args:
        path (Union[str, Path]): Destination file.
        entries (Sequence[ManifestEntry]): Recordings to list.

    Returns:
        Path: The written path.
    """
    document = {
        "format": "cardiolabel-manifest",
        "version": 1,
        "recordings": [
            {
                "patient_id": entry.patient_id,
                "location": Location(entry.location).value,
                "audio": entry.audio,
                "segmentation": entry.segmentation,
                "labels": entry.labels,
            }
            for entry in entries
        ],
    }
    path = Path(path)
    path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """Read a dataset manifest; relative paths are resolved against its directory."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError("manifest not found", str(path))
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
        records = document["recordings"]
        entries = [
            ManifestEntry(
                str(record["patient_id"]),
                Location.parse(record["location"]),
                str(path.parent / record["audio"]),
                str(path.parent / record["segmentation"]),
                str(path.parent / record["labels"]),
            )
            for record in records
        ]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as error:
        raise IngestionError(f"malformed manifest: {error}", str(path)) from error
    return entries


def load_recording(entry: ManifestEntry) -> Tuple[AudioRecording, List[StateInterval]]:
    """Read and parse the audio and segmentation files of one manifest entry."""
    audio_path, segmentation_path = Path(entry.audio), Path(entry.segmentation)
    for file_path in (audio_path, segmentation_path):
        if not file_path.is_file():
            raise IngestionError("file not found", str(file_path))
    recording, intervals = parse_recording(
        audio_path.read_bytes(),
        segmentation_path.read_text(encoding="utf-8"),
        entry.patient_id,
        entry.location,
        source=f"{audio_path.name}/{segmentation_path.name}",
    )
    return recording, intervals


def summarize_dataset(
    recordings: Sequence[AudioRecording],
    intervals: Sequence[Sequence[StateInterval]],
    patients: Sequence[PatientLabels],
) -> pd.DataFrame:
    """Patient counts by murmur status plus recording and S1-systole duration statistics.

    Args:
        recordings (Sequence[AudioRecording]): All recordings.
        intervals (Sequence[Sequence[StateInterval]]): Segmentation of each recording.
        patients (Sequence[PatientLabels]): Patient annotations.

    Returns:
        pd.DataFrame: Columns metric, value.
    """
    rows = [(f"patients_{status.value.lower()}", float(sum(p.murmur is status for p in patients))) for status in Murmur]
    rows.append(("recordings", float(len(recordings))))

    durations = np.array([recording.duration_s for recording in recordings])
    periods = np.array(
        [
            following.end_s - current.start_s
            for recording_intervals in intervals
            for current, following in zip(recording_intervals, recording_intervals[1:])
            if current.state is State.S1 and following.state is State.SYSTOLE
        ]
    )
    for name, values in (("recording_duration_s", durations), ("s1_systole_duration_s", periods)):
        if values.size == 0:
            continue
        rows += [
            (f"{name}_max", float(values.max())),
            (f"{name}_min", float(values.min())),
            (f"{name}_mean", float(values.mean())),
            (f"{name}_median", float(np.median(values))),
        ]
    return pd.DataFrame(rows, columns=["metric", "value"])
