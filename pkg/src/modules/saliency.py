"""Input-gradient saliency maps and per-segment contribution shares."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .autodiff import Tensor, backward, mul, total
from .cardionet import EnsembleParams, group_block_forward
from .errors import IngestionError, LabelError, ShapeError
from .labels import GROUP_NAMES, GROUP_WIDTHS

logger = logging.getLogger(__name__)

SALIENCY_FLOAT_FORMAT = "%.12g"


@dataclass
class SaliencyMap:
    """Absolute input gradients aligned with a sample's (N, L) segment matrix."""

    values: np.ndarray
    group: str
    class_index: int


@dataclass
class ContributionVector:
    percentages: np.ndarray
    # Set when the map was all zero and every segment got an equal share.
    uniform: bool = False

    @property
    def most_contributing(self) -> Tuple[int, float]:
        index = int(np.argmax(self.percentages))
        return index, float(self.percentages[index])


def gradient_saliency(logit_fn: Callable[[Tensor], Tensor], segments: np.ndarray) -> np.ndarray:
    """|d logit / d input| for every input point.

    Args:
        logit_fn (Callable[[Tensor], Tensor]): Maps the input tensor to a scalar logit.
        segments (np.ndarray): Input values.

    Returns:
        np.ndarray: Non-negative array shaped like `segments`.
    """
    x = Tensor(np.array(segments, dtype=np.float64), requires_grad=True)
    backward(logit_fn(x))
    return np.zeros_like(x.data) if x.grad is None else np.abs(x.grad)


def input_saliency(params: EnsembleParams, sample: np.ndarray, group: str, class_index: Optional[int] = None) -> SaliencyMap:
    """Saliency of one group logit with respect to a sample.

    Args:
        params (EnsembleParams): Network parameters.
        sample (np.ndarray): (N, L) segment matrix.
        group (str): Label group whose block is explained.
        class_index (int, optional): Target class; the predicted class when None.

    Returns:
        SaliencyMap: Map with the sample's shape.
    """
    if group not in GROUP_NAMES:
        raise LabelError(f"unknown label group {group!r}; expected one of {', '.join(GROUP_NAMES)}")
    width = GROUP_WIDTHS[GROUP_NAMES.index(group)]
    sample = np.asarray(sample, dtype=np.float64)
    config = params.config
    if sample.shape != (config.segments_per_sample, config.segment_length):
        raise ShapeError(f"sample shape {sample.shape} does not match ({config.segments_per_sample}, {config.segment_length})")
    block = params.blocks[group]

    if class_index is None:
        logits, _ = group_block_forward(block, sample, config)
        class_index = int(np.argmax(logits.data[0]))
    if not 0 <= class_index < width:
        raise LabelError(f"{group} class {class_index} outside [0, {width - 1}]")

    selector = np.zeros((1, width))
    selector[0, class_index] = 1.0

    def target_logit(x: Tensor) -> Tensor:
        logits, _ = group_block_forward(block, x, config)
        return total(mul(logits, selector))

    values = gradient_saliency(target_logit, sample)
    params.zero_grad()
    return SaliencyMap(values, group, class_index)


def segment_contributions(saliency: SaliencyMap) -> ContributionVector:
    """Share of total saliency per segment, in percent.

    Args:
        saliency (SaliencyMap): Map to summarise.

    Returns:
        ContributionVector: Percentages summing to 100; uniform 100/N when the map is all zero.
    """
    row_sums = np.asarray(saliency.values, dtype=np.float64).sum(axis=1)
    grand_total = row_sums.sum()
    if grand_total <= 0:
        return ContributionVector(np.full(row_sums.shape[0], 100.0 / row_sums.shape[0]), uniform=True)
    return ContributionVector(100.0 * row_sums / grand_total)


def _value_columns(saliency: SaliencyMap) -> list:
    return [f"{saliency.group}_{saliency.class_index}_{j}" for j in range(saliency.values.shape[1])]


def export_saliency(saliency: SaliencyMap, contributions: ContributionVector, path: Union[str, Path]) -> Path:
    """Write one CSV row per segment: index, contribution percent, then the saliency values.

    Value columns are named <group>_<class>_<position>, so the header records the target.

    Args:
        saliency (SaliencyMap): Map to export.
        contributions (ContributionVector): Shares aligned with the map rows.
        path (Union[str, Path]): Destination CSV.

    Returns:
        Path: The written file.
    """
    frame = pd.DataFrame(saliency.values, columns=_value_columns(saliency))
    frame.insert(0, "contribution_pct", contributions.percentages)
    frame.insert(0, "segment", np.arange(saliency.values.shape[0]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=SALIENCY_FLOAT_FORMAT)
    segment, share = contributions.most_contributing
    logger.info("%s: segment %d contributes most (%.2f%%)", path, segment, share)
    return path


def read_saliency_csv(path: Union[str, Path]) -> Tuple[SaliencyMap, ContributionVector]:
    """Parse a file written by `export_saliency`."""
    frame = pd.read_csv(path)
    value_columns = [column for column in frame.columns if column not in ("segment", "contribution_pct")]
    if not value_columns or "contribution_pct" not in frame.columns:
        raise IngestionError("not a saliency export", str(path))
    try:
        group, class_index, _ = value_columns[0].rsplit("_", 2)
        class_index = int(class_index)
    except ValueError as error:
        raise IngestionError(f"unrecognised value column {value_columns[0]!r}", str(path)) from error
    values = frame[value_columns].to_numpy(dtype=np.float64)
    percentages = frame["contribution_pct"].to_numpy(dtype=np.float64)
    return SaliencyMap(values, group, class_index), ContributionVector(percentages)
