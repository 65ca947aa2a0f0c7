"""
Dataset-level steps behind the command line: writing a synthetic dataset,
preparing a sample store from a manifest, loading per-patient recordings and
patient-level evaluation.

Each step walks its inputs one recording at a time, reports progress through
the ProgressBar component and fails on the first unreadable file, naming it.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import pandas as pd

from src.components.ProgressBar.progress_bar import ProgressBar
from src.components.ReportTable.report_table import ReportTable
from .cardionet import EnsembleParams
from .errors import IngestionError
from .labels import GROUP_NAMES, Location, Murmur, PatientLabels, format_patient_labels, label_distribution, parse_patient_labels
from .pcg_data import (
    AudioRecording,
    ManifestEntry,
    Sample,
    StateInterval,
    build_samples,
    encode_wav,
    extract_s1_systolic_segments,
    format_timestamp_rows,
    load_recording,
    preprocess_segments,
    read_manifest,
    summarize_dataset,
    write_manifest,
)
from .synthetic import SynthSpec, generate_synthetic_dataset
from .train_eval import PatientRecording, patient_accuracy, patient_level_predict
from .utils import derive_seed

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
STORE_NAME = "samples.bin"
SPLITS_NAME = "splits.json"
CONFIG_NAME = "config.txt"


def write_synthetic_dataset(out_dir: Path, spec: SynthSpec, seed: int = 0, show_progress: bool = False) -> Path:
    """
    Generate a synthetic dataset and write it in the on-disk formats read by `prepare`.

    Layout: audio/<recording>.wav, segmentation/<recording>.tsv, labels/<patient>.txt
    and manifest.json at the top.

    Args:
        out_dir (Path): Destination directory, created if missing.
        spec (SynthSpec): Dataset shape.
        seed (int): Generator seed.
        show_progress (bool): Show a progress bar while writing.

    Returns:
        Path: Path of the written manifest.
    """
    recordings, intervals, patients = generate_synthetic_dataset(spec, seed)
    out_dir = Path(out_dir)
    for sub in ("audio", "segmentation", "labels"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    for patient in patients:
        (out_dir / "labels" / f"{patient.patient_id}.txt").write_text(format_patient_labels(patient), encoding="utf-8")

    entries = []
    progress = ProgressBar(list(zip(recordings, intervals))).set_name("writing").set_enabled(show_progress)
    for recording, recording_intervals in progress:
        name = recording.recording_id
        (out_dir / "audio" / f"{name}.wav").write_bytes(encode_wav(recording.samples, recording.sample_rate_hz))
        (out_dir / "segmentation" / f"{name}.tsv").write_text(format_timestamp_rows(recording_intervals), encoding="utf-8")
        entries.append(
            ManifestEntry(
                recording.patient_id,
                recording.location,
                f"audio/{name}.wav",
                f"segmentation/{name}.tsv",
                f"labels/{recording.patient_id}.txt",
            )
        )
    manifest = write_manifest(out_dir / MANIFEST_NAME, entries)
    logger.info("wrote %d patients, %d recordings to %s", len(patients), len(entries), out_dir)
    return manifest


def read_patient_labels(entries: Sequence[ManifestEntry]) -> Dict[str, PatientLabels]:
    """Parse every distinct label file listed in a manifest, keyed by patient id."""
    patients: Dict[str, PatientLabels] = {}
    for entry in entries:
        if entry.patient_id in patients:
            continue
        path = Path(entry.labels)
        if not path.is_file():
            raise IngestionError("file not found", str(path))
        patient = parse_patient_labels(path.read_text(encoding="utf-8"), str(path))
        if patient.patient_id != entry.patient_id:
            raise IngestionError(f"label file names patient {patient.patient_id}, manifest says {entry.patient_id}", str(path))
        patients[entry.patient_id] = patient
    return patients


@dataclass
class PreparedDataset:
    samples: List[Sample]
    recordings: List[AudioRecording] = field(default_factory=list)
    intervals: List[List[StateInterval]] = field(default_factory=list)
    patients: Dict[str, PatientLabels] = field(default_factory=dict)
    skipped_unknown: int = 0

    def location_counts(self) -> pd.DataFrame:
        """Sample counts per location split into normal and murmur, with their ratio."""
        table = ReportTable(["location", "samples", "normal", "murmur", "normal_ratio", "murmur_ratio"])
        for location in Location:
            chosen = [sample for sample in self.samples if Location(sample.location) is location]
            if not chosen:
                continue
            murmur = sum(sample.labels.is_murmur for sample in chosen)
            table.add_row({
                "location": location.value,
                "samples": len(chosen),
                "normal": len(chosen) - murmur,
                "murmur": murmur,
                "normal_ratio": (len(chosen) - murmur) / len(chosen),
                "murmur_ratio": murmur / len(chosen),
            })
        return table.to_frame()

    def summary(self) -> pd.DataFrame:
        return summarize_dataset(self.recordings, self.intervals, list(self.patients.values()))

    def label_distribution(self) -> pd.DataFrame:
        return label_distribution(self.patients.values())


def prepare_dataset(
    manifest_path: Path,
    n_segments: int,
    segment_length: int,
    standardize_mode: str = "unit",
    seed: int = 0,
    show_progress: bool = False,
) -> PreparedDataset:
    """
    Run extraction, resampling, standardization and sample building over every manifest recording.

    Patients with murmur status Unknown are skipped. A recording at a location
    where the patient's murmur is not audible is labelled normal.

    Args:
        manifest_path (Path): Dataset manifest.
        n_segments (int): Segments per sample.
        segment_length (int): Points per resampled segment.
        standardize_mode (str): "unit" or "mean".
        seed (int): Root seed; recording i draws with a seed derived from (seed, i).
        show_progress (bool): Show a progress bar.

    Returns:
        PreparedDataset: Samples plus what the dataset reports need.
    """
    entries = read_manifest(manifest_path)
    if not entries:
        raise IngestionError("no recordings", str(manifest_path))
    patients = read_patient_labels(entries)
    dataset = PreparedDataset([], patients={pid: p for pid, p in patients.items() if p.murmur is not Murmur.UNKNOWN})
    dataset.skipped_unknown = len(patients) - len(dataset.patients)

    progress = ProgressBar(list(enumerate(entries))).set_name("recordings").set_enabled(show_progress)
    for index, entry in progress:
        patient = patients[entry.patient_id]
        if patient.murmur is Murmur.UNKNOWN:
            continue
        recording, intervals = load_recording(entry)
        segments = preprocess_segments(extract_s1_systolic_segments(recording, intervals), segment_length, standardize_mode)
        dataset.recordings.append(recording)
        dataset.intervals.append(intervals)
        dataset.samples += build_samples(
            segments,
            patient.recording_labels(entry.location),
            n_segments,
            derive_seed(seed, index),
            entry.patient_id,
            entry.location,
            recording.recording_id,
        )
    logger.info(
        "prepared %d samples from %d recordings (%d Unknown patients skipped)",
        len(dataset.samples),
        len(dataset.recordings),
        dataset.skipped_unknown,
    )
    return dataset


def load_patient_recordings(
    manifest_path: Path,
    segment_length: int,
    standardize_mode: str = "unit",
    recording_ids: Optional[Set[str]] = None,
    patient_ids: Optional[Set[str]] = None,
) -> Tuple[Dict[str, List[PatientRecording]], Dict[str, PatientLabels]]:
    """
    Prepared segments of each patient's recordings, for patient-level prediction.

    Args:
        manifest_path (Path): Dataset manifest.
        segment_length (int): Points per resampled segment.
        standardize_mode (str): "unit" or "mean".
        recording_ids (Set[str], optional): Keep only these recordings.
        patient_ids (Set[str], optional): Keep only these patients.

    Returns:
        Tuple[Dict[str, List[PatientRecording]], Dict[str, PatientLabels]]: Recordings and labels per patient.
    """
    entries = read_manifest(manifest_path)
    if patient_ids is not None:
        entries = [entry for entry in entries if entry.patient_id in patient_ids]
    if recording_ids is not None:
        entries = [entry for entry in entries if f"{entry.patient_id}_{Location(entry.location).value}" in recording_ids]
    patients = read_patient_labels(entries)

    by_patient: Dict[str, List[PatientRecording]] = {}
    for entry in entries:
        patient = patients[entry.patient_id]
        if patient.murmur is Murmur.UNKNOWN:
            continue
        recording, intervals = load_recording(entry)
        segments = preprocess_segments(extract_s1_systolic_segments(recording, intervals), segment_length, standardize_mode)
        by_patient.setdefault(entry.patient_id, []).append(
            PatientRecording(entry.location, segments, patient.recording_labels(entry.location).is_murmur)
        )
    return by_patient, {pid: patients[pid] for pid in by_patient}


def patient_accuracy_row(
    split: str,
    models_by_location: Mapping[str, EnsembleParams],
    recordings: Mapping[str, List[PatientRecording]],
    patients: Mapping[str, PatientLabels],
) -> Dict[str, object]:
    """
    Patient-level accuracy of one set of models, as a table row.

    Each patient is scored against the labels their given recordings can show:
    a murmur patient whose recordings all sit at inaudible locations counts as
    Normal.
    """
    predictions, truths = [], []
    for patient_id, patient_recordings in recordings.items():
        if not any(recording.segments for recording in patient_recordings):
            logger.debug("patient %s has no segments, skipped", patient_id)
            continue
        predictions.append(patient_level_predict(models_by_location, patient_recordings))
        truths.append(patients[patient_id].visible_labels(recording.location for recording in patient_recordings))
    accuracy = patient_accuracy(predictions, truths)
    return {"split": split, "patients": len(truths), **{group: accuracy[group] for group in GROUP_NAMES}, "average": accuracy["average"]}
