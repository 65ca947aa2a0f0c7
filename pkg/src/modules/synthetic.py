"""Seeded synthetic phonocardiograms whose murmurs carry separable label signatures.

Every recording is a chain of cardiac cycles (S1 burst, systolic window, S2
burst, diastolic window). A murmur-present recording at an audible location
gets a signature added to each systolic window:

  timing   temporal support: first, middle or last third, or the whole window
  pitch    carrier band: low, medium or high
  quality  harmonic content: two-tone mix (Blowing), noise band-passed around the pitch carrier (Harsh),
           pure tone (Musical)
  shape    envelope: 1 Crescendo rises linearly, 2 Decrescendo falls linearly from
           its peak, 3 Diamond rises then falls, any other code (4 Plateau) is flat
  grading  amplitude tier
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import signal

from .errors import ConfigError
from .labels import GROUP_WIDTHS, LabelSet, Location, Murmur, PatientLabels
from .pcg_data import DEFAULT_SAMPLE_RATE_HZ, AudioRecording, State, StateInterval

logger = logging.getLogger(__name__)

PITCH_BANDS_HZ = ((60.0, 90.0), (150.0, 200.0), (280.0, 360.0))
GRADE_AMPLITUDES = (0.12, 0.3, 0.6)
S1_AMPLITUDE = 0.5
S2_AMPLITUDE = 0.4
HARSH_FILTER_ORDER = 2


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a synthetic dataset.

    Args:
        n_patients (int): Number of patients.
        murmur_prevalence (float): Probability that a patient has a murmur.
        unknown_prevalence (float): Probability that a murmur-free patient is marked Unknown.
        segments_per_recording (int): Cardiac cycles per recording.
        noise_level (float): Std of additive white noise.
        sample_rate_hz (int): Sample rate of every recording.
        locations (Tuple[str, ...]): Auscultation points recorded for every patient.
    """

    n_patients: int = 20
    murmur_prevalence: float = 0.5
    unknown_prevalence: float = 0.0
    segments_per_recording: int = 12
    noise_level: float = 0.01
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE_HZ
    locations: Tuple[str, ...] = ("AV", "PV", "TV", "MV")

    def validate(self) -> SynthSpec:
        if self.n_patients < 1:
            raise ConfigError(f"n_patients must be at least 1, got {self.n_patients}")
        for name in ("murmur_prevalence", "unknown_prevalence"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.segments_per_recording < 1:
            raise ConfigError(f"segments_per_recording must be at least 1, got {self.segments_per_recording}")
        if not 0.0 <= self.noise_level < 0.5:
            raise ConfigError(f"noise_level must lie in [0, 0.5), got {self.noise_level}")
        if self.sample_rate_hz < 2 * PITCH_BANDS_HZ[-1][1] * 3:
            raise ConfigError(f"sample_rate_hz {self.sample_rate_hz} too low for the pitch bands")
        if not self.locations:
            raise ConfigError("at least one location is required")
        for code in self.locations:
            Location.parse(code)
        return self


def _burst(rng: np.random.Generator, length: int, rate: int, low_hz: float, high_hz: float, amplitude: float) -> np.ndarray:
    t = np.arange(length) / rate
    return amplitude * np.sin(2 * np.pi * rng.uniform(low_hz, high_hz) * t) * np.hanning(length)


def _envelope(shape: int, length: int) -> np.ndarray:
    """Envelope over `length` points: 1 rising ramp, 2 falling ramp, 3 triangle peaking mid-window, otherwise flat."""
    u = np.linspace(0.0, 1.0, length)
    if shape == 1:
        return u
    if shape == 2:
        return 1.0 - u
    if shape == 3:
        return 1.0 - np.abs(2.0 * u - 1.0)
    return np.ones(length)


def _band_noise(rng: np.random.Generator, length: int, rate: int, centre_hz: float) -> np.ndarray:
    """White noise band-passed to [0.8, 1.25] x `centre_hz`, cut from the middle of a longer filtered run."""
    margin = rate // 20
    sos = signal.butter(HARSH_FILTER_ORDER, [0.8 * centre_hz, 1.25 * centre_hz], btype="bandpass", fs=rate, output="sos")
    noise = signal.sosfiltfilt(sos, rng.normal(size=length + 2 * margin))
    return noise[margin : margin + length]


def murmur_signature(rng: np.random.Generator, labels: LabelSet, length: int, rate: int) -> np.ndarray:
    """Signal added to one systolic window of `length` points.

    Args:
        rng (np.random.Generator): Source of carrier and phase jitter.
        labels (LabelSet): Murmur-present labels.
        length (int): Systolic window length in points.
        rate (int): Sample rate.

    Returns:
        np.ndarray: Signature with the same length as the window.
    """
    signature = np.zeros(length)
    third = length // 3
    start, stop = {1: (0, third), 2: (third, 2 * third), 3: (2 * third, length), 4: (0, length)}[labels.timing]
    support = stop - start
    if support < 2:
        return signature

    t = np.arange(support) / rate
    carrier_hz = rng.uniform(*PITCH_BANDS_HZ[labels.pitch - 1])
    phase = rng.uniform(0, 2 * np.pi)
    if labels.quality == 1:
        carrier = np.sin(2 * np.pi * carrier_hz * t + phase) + np.sin(2 * np.pi * 2.3 * carrier_hz * t)
    elif labels.quality == 2:
        carrier = _band_noise(rng, support, rate, carrier_hz)
    else:
        carrier = np.sin(2 * np.pi * carrier_hz * t + phase)
    carrier = carrier / (np.sqrt(np.mean(carrier**2)) + 1e-12)

    amplitude = GRADE_AMPLITUDES[labels.grading - 1] * rng.uniform(0.9, 1.1)
    signature[start:stop] = amplitude * _envelope(labels.shape, support) * carrier
    return signature


def synthesize_recording(
    rng: np.random.Generator, spec: SynthSpec, patient_id: str, location: Location, labels: LabelSet
) -> Tuple[AudioRecording, List[StateInterval]]:
    """Generate one recording and its segmentation.

    Args:
        rng (np.random.Generator): Shared generator, advanced in place.
        spec (SynthSpec): Dataset shape.
        patient_id (str): Owner of the recording.
        location (Location): Auscultation point.
        labels (LabelSet): Labels of this recording; all zero for a normal recording.

    Returns:
        Tuple[AudioRecording, List[StateInterval]]: Waveform and intervals on exact sample boundaries.
    """
    rate = spec.sample_rate_hz
    pieces, intervals = [], []
    cursor = 0
    for _ in range(spec.segments_per_recording):
        lengths = [
            int(rate * rng.uniform(0.08, 0.11)),
            int(rate * rng.uniform(0.14, 0.18)),
            int(rate * rng.uniform(0.07, 0.10)),
            int(rate * rng.uniform(0.30, 0.50)),
        ]
        systole = np.zeros(lengths[1])
        if labels.is_murmur:
            systole += murmur_signature(rng, labels, lengths[1], rate)
        pieces += [
            _burst(rng, lengths[0], rate, 30.0, 50.0, S1_AMPLITUDE),
            systole,
            _burst(rng, lengths[2], rate, 50.0, 70.0, S2_AMPLITUDE),
            np.zeros(lengths[3]),
        ]
        for state, length in zip((State.S1, State.SYSTOLE, State.S2, State.DIASTOLE), lengths):
            intervals.append(StateInterval(cursor / rate, (cursor + length) / rate, state))
            cursor += length

    waveform = np.concatenate(pieces)
    waveform += spec.noise_level * rng.normal(size=waveform.shape[0])
    waveform = np.clip(waveform, -0.99, 0.99)
    return AudioRecording(patient_id, location, rate, waveform), intervals


def generate_synthetic_dataset(
    spec: SynthSpec, rng_seed: int = 0
) -> Tuple[List[AudioRecording], List[List[StateInterval]], List[PatientLabels]]:
    """Generate recordings, segmentations and patient annotations.

    The first draw of the generator is `rng.random(n_patients) < murmur_prevalence`,
    which decides murmur presence per patient.

    Args:
        spec (SynthSpec): Dataset shape.
        rng_seed (int, optional): Seed; equal seeds give bit-identical datasets.

    Returns:
        Tuple[List[AudioRecording], List[List[StateInterval]], List[PatientLabels]]:
            One recording and interval list per (patient, location), and one annotation per patient.
    """
    spec.validate()
    rng = np.random.default_rng(rng_seed)
    has_murmur = rng.random(spec.n_patients) < spec.murmur_prevalence
    is_unknown = rng.random(spec.n_patients) < spec.unknown_prevalence
    locations = [Location.parse(code) for code in spec.locations]

    recordings, intervals, patients = [], [], []
    for index in range(spec.n_patients):
        patient_id = f"{index + 1:05d}"
        if has_murmur[index]:
            labels = LabelSet.from_tuple([int(rng.integers(1, width)) for width in GROUP_WIDTHS])
            audible_mask = rng.random(len(locations)) < 0.75
            if not audible_mask.any():
                audible_mask[int(rng.integers(len(locations)))] = True
            audible = frozenset(location for location, flag in zip(locations, audible_mask) if flag)
            patient = PatientLabels(patient_id, Murmur.PRESENT, audible, labels)
        elif is_unknown[index]:
            patient = PatientLabels(patient_id, Murmur.UNKNOWN)
        else:
            patient = PatientLabels(patient_id, Murmur.ABSENT)
        patients.append(patient)

        for location in locations:
            recording, recording_intervals = synthesize_recording(
                rng, spec, patient_id, location, patient.recording_labels(location)
            )
            recordings.append(recording)
            intervals.append(recording_intervals)

    logger.debug(
        "generated %d patients (%d with murmur), %d recordings", spec.n_patients, int(has_murmur.sum()), len(recordings)
    )
    return recordings, intervals, patients
