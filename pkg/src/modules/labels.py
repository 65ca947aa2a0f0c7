"""Murmur label taxonomy, the 22-dimensional label encoding and patient label files."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import IngestionError, LabelError

logger = logging.getLogger(__name__)

GROUP_NAMES: Tuple[str, ...] = ("timing", "pitch", "quality", "shape", "grading")
GROUP_WIDTHS: Tuple[int, ...] = (5, 4, 4, 5, 4)
LABEL_VECTOR_LENGTH = sum(GROUP_WIDTHS)

# Index 0 of every group is the murmur-absent class.
CATEGORY_NAMES: Dict[str, Tuple[str, ...]] = {
    "timing": ("Normal", "Early-systolic", "Mid-systolic", "Late-systolic", "Holosystolic"),
    "pitch": ("Normal", "Low", "Medium", "High"),
    "quality": ("Normal", "Blowing", "Harsh", "Musical"),
    "shape": ("Normal", "Crescendo", "Decrescendo", "Diamond", "Plateau"),
    "grading": ("Normal", "I/VI", "II/VI", "III/VI"),
}


class Location(str, Enum):
    """Auscultation points."""

    AV = "AV"
    PV = "PV"
    TV = "TV"
    MV = "MV"
    PHC = "Phc"

    @classmethod
    def parse(cls, text: str) -> Location:
        """Parse a location code, case-insensitively.

        Args:
            text (str): Location code such as "AV" or "phc".

        Returns:
            Location: Matching location.
        """
        for location in cls:
            if location.value.lower() == text.strip().lower():
                return location
        raise LabelError(f"unknown auscultation location {text!r}")


class Murmur(str, Enum):
    PRESENT = "Present"
    ABSENT = "Absent"
    UNKNOWN = "Unknown"


def group_offsets(widths: Sequence[int] = GROUP_WIDTHS) -> List[int]:
    """Start offset of every label group inside the concatenated encoding."""
    return [int(offset) for offset in np.concatenate(([0], np.cumsum(widths)[:-1]))]


@dataclass(frozen=True)
class LabelSet:
    """One categorical value per label group; 0 means murmur absent.

    Range checks run on construction. The all-zero/all-nonzero consistency rule
    is checked separately through `validate_consistency`, because network
    predictions may legitimately be inconsistent.
    """

    timing: int = 0
    pitch: int = 0
    quality: int = 0
    shape: int = 0
    grading: int = 0

    def __post_init__(self):
        for name, width in zip(GROUP_NAMES, GROUP_WIDTHS):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or not 0 <= value < width:
                raise LabelError(f"{name} value {value!r} outside [0, {width - 1}]")
            object.__setattr__(self, name, int(value))

    @classmethod
    def from_tuple(cls, values: Sequence[int]) -> LabelSet:
        if len(values) != len(GROUP_NAMES):
            raise LabelError(f"expected {len(GROUP_NAMES)} group values, got {len(values)}")
        return cls(*[int(value) for value in values])

    @classmethod
    def from_names(cls, names: Dict[str, str]) -> LabelSet:
        """Build a LabelSet from category names; "nan" and "" map to Normal."""
        return cls(**{group: category_index(group, names.get(group, "nan")) for group in GROUP_NAMES})

    def as_tuple(self) -> Tuple[int, ...]:
        return tuple(getattr(self, name) for name in GROUP_NAMES)

    def names(self) -> Dict[str, str]:
        return {group: CATEGORY_NAMES[group][value] for group, value in zip(GROUP_NAMES, self.as_tuple())}

    @property
    def is_murmur(self) -> bool:
        return any(self.as_tuple())

    @property
    def is_consistent(self) -> bool:
        values = self.as_tuple()
        return all(values) or not any(values)

    def validate_consistency(self) -> LabelSet:
        if not self.is_consistent:
            raise LabelError(f"inconsistent label set {self.as_tuple()}: groups must be all zero or all nonzero")
        return self


NORMAL = LabelSet()


def _normalise_category(text: str) -> str:
    return text.strip().lower().replace(" ", "-").replace("_", "-")


def category_index(group: str, name: str) -> int:
    """Index of a category name inside its group.

    Args:
        group (str): Label group name.
        name (str): Category name as written in Table-1 vocabulary, or "nan".

    Returns:
        int: Category index, 0 for "nan"/empty.
    """
    if group not in CATEGORY_NAMES:
        raise LabelError(f"unknown label group {group!r}")
    wanted = _normalise_category(name)
    if wanted in ("", "nan", "none"):
        return 0
    for index, candidate in enumerate(CATEGORY_NAMES[group]):
        if _normalise_category(candidate) == wanted:
            return index
    raise LabelError(f"unknown {group} category {name!r}")


def encode_labels(labels: LabelSet) -> np.ndarray:
    """Concatenate one one-hot block per group (widths 5, 4, 4, 5, 4).

    Args:
        labels (LabelSet): Label set to encode.

    Returns:
        np.ndarray: Binary vector of length 22 with exactly five ones.
    """
    vector = np.zeros(LABEL_VECTOR_LENGTH)
    for offset, value in zip(group_offsets(), labels.as_tuple()):
        vector[offset + value] = 1.0
    return vector


def decode_labels(vector: Sequence[float]) -> LabelSet:
    """Per-block argmax of a 22-long score vector, ties going to the lowest index.

    Args:
        vector (Sequence[float]): One-hot or soft scores.

    Returns:
        LabelSet: Decoded labels.
    """
    scores = np.asarray(vector, dtype=float).reshape(-1)
    if scores.shape[0] != LABEL_VECTOR_LENGTH:
        raise LabelError(f"expected a vector of length {LABEL_VECTOR_LENGTH}, got {scores.shape[0]}")
    values = [
        int(np.argmax(scores[offset : offset + width]))
        for offset, width in zip(group_offsets(), GROUP_WIDTHS)
    ]
    return LabelSet.from_tuple(values)


@dataclass(frozen=True)
class PatientLabels:
    """Summarised murmur annotation of one patient."""

    patient_id: str
    murmur: Murmur
    audible_locations: FrozenSet[Location] = field(default_factory=frozenset)
    label_set: LabelSet = NORMAL

    def __post_init__(self):
        if self.murmur is Murmur.ABSENT and self.label_set.is_murmur:
            raise LabelError(f"patient {self.patient_id}: murmur Absent but labels {self.label_set.as_tuple()}")
        if self.murmur is Murmur.PRESENT and not all(self.label_set.as_tuple()):
            raise LabelError(
                f"patient {self.patient_id}: murmur Present needs every group populated, got {self.label_set.as_tuple()}"
            )

    def recording_labels(self, location: Location) -> LabelSet:
        """Labels applied to one recording: the patient labels where the murmur is audible, Normal elsewhere."""
        if self.murmur is Murmur.PRESENT and location in self.audible_locations:
            return self.label_set
        return NORMAL

    def visible_labels(self, locations: Iterable[Location]) -> LabelSet:
        """Labels heard across `locations`: the patient labels if any of them is audible, Normal otherwise."""
        if any(self.recording_labels(location).is_murmur for location in locations):
            return self.label_set
        return NORMAL


_LABEL_FILE_KEYS = ("patient_id", "murmur", "locations") + GROUP_NAMES


def parse_patient_labels(text: str, source: str = "") -> PatientLabels:
    """Parse a key:value patient label file.

    Args:
        text (str): File contents.
        source (str, optional): File name used in diagnostics.

    Returns:
        PatientLabels: Parsed annotation.
    """
    values: Dict[str, str] = {}
    for row, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if ":" not in line:
            raise IngestionError(f"expected 'key: value', got {line!r}", source, row)
        key, value = (part.strip() for part in line.split(":", 1))
        if key not in _LABEL_FILE_KEYS:
            raise IngestionError(f"unknown key {key!r}", source, row)
        if key in values:
            raise IngestionError(f"duplicate key {key!r}", source, row)
        values[key] = value

    missing = [key for key in _LABEL_FILE_KEYS if key not in values]
    if missing:
        raise IngestionError(f"missing keys {', '.join(missing)}", source)

    try:
        murmur = Murmur(values["murmur"].capitalize())
    except ValueError:
        raise IngestionError(f"murmur must be Present, Absent or Unknown, got {values['murmur']!r}", source)

    try:
        locations = frozenset(
            Location.parse(code)
            for code in values["locations"].split(",")
            if code.strip() and code.strip().lower() != "nan"
        )
        label_set = LabelSet.from_names(values)
        if murmur is Murmur.UNKNOWN:
            label_set = NORMAL
        return PatientLabels(values["patient_id"], murmur, locations, label_set)
    except LabelError as error:
        raise IngestionError(str(error), source) from error


def format_patient_labels(patient: PatientLabels) -> str:
    """Render a PatientLabels in the key:value label file format."""
    names = patient.label_set.names() if patient.murmur is Murmur.PRESENT else {}
    lines = [
        f"patient_id: {patient.patient_id}",
        f"murmur: {patient.murmur.value}",
        "locations: " + ",".join(sorted(location.value for location in patient.audible_locations)),
    ]
    lines += [f"{group}: {names.get(group, 'nan')}" for group in GROUP_NAMES]
    return "\n".join(lines) + "\n"


def label_distribution(patients: Iterable[PatientLabels]) -> pd.DataFrame:
    """Count category occurrences per group over murmur-present patients.

    Args:
        patients (Iterable[PatientLabels]): Patient annotations.

    Returns:
        pd.DataFrame: Columns group, category, count; one row per murmur category.
    """
    present = [patient.label_set for patient in patients if patient.murmur is Murmur.PRESENT]
    rows = []
    for position, group in enumerate(GROUP_NAMES):
        values = np.asarray([labels.as_tuple()[position] for labels in present], dtype=int)
        counts = np.bincount(values, minlength=GROUP_WIDTHS[position])
        for index, name in enumerate(CATEGORY_NAMES[group][1:], 1):
            rows.append({"group": group, "category": name, "count": int(counts[index])})
    return pd.DataFrame(rows, columns=["group", "category", "count"])
