from __future__ import annotations
from typing import Iterable, Iterator, Optional, TypeVar
from tqdm import tqdm

T = TypeVar("T")


class ProgressBar:
    """ProgressBar object for showing the progress of long loops (recording ingestion, epochs, folds)."""

    def __init__(self, iterable: Optional[Iterable[T]] = None):
        """ProgressBar constructor. Note that the bar is enabled and unnamed until configured.

        Args:
            iterable (Iterable, optional): Items to iterate over.
        """
        self.iterable = iterable
        self.name = ""
        self.total: Optional[int] = None
        self.enabled = True
        self.unit = "it"

    def set_name(self, text: str) -> ProgressBar:
        """Method for setting the label shown before the bar.

        Args:
            text (str): Bar label.

        Returns:
            ProgressBar: ProgressBar object.
        """
        self.name = text
        return self

    def set_total(self, total: int) -> ProgressBar:
        """Method for setting the expected number of iterations.

        Args:
            total (int): Number of iterations.

        Returns:
            ProgressBar: ProgressBar object.
        """
        self.total = total
        return self

    def set_unit(self, unit: str) -> ProgressBar:
        self.unit = unit
        return self

    def set_enabled(self, enabled: bool) -> ProgressBar:
        """Method for switching the bar on or off. A disabled bar still iterates.

        Args:
            enabled (bool): False hides the bar.

        Returns:
            ProgressBar: ProgressBar object.
        """
        self.enabled = enabled
        return self

    def __iter__(self) -> Iterator[T]:
        total = self.total
        if total is None and hasattr(self.iterable, "__len__"):
            total = len(self.iterable)
        yield from tqdm(
            self.iterable,
            desc=self.name or None,
            total=total,
            unit=self.unit,
            disable=not self.enabled,
            leave=False,
        )
