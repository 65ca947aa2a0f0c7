from __future__ import annotations
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union
import pandas as pd


class ReportTable:
    """ReportTable object for rendering result tables (counts, metrics, predictions) as text and CSV."""

    def __init__(self, columns: Optional[Sequence[str]] = None):
        """ReportTable constructor.

        Args:
            columns (Sequence[str], optional): Column order; inferred from the first row when omitted.
        """
        self.title = ""
        self.columns = list(columns) if columns else []
        self.rows: list = []
        self.float_format = "{:.4f}"

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> ReportTable:
        table = cls(list(frame.columns))
        table.rows = frame.to_dict("records")
        return table

    def set_title(self, text: str) -> ReportTable:
        """Method for setting the heading printed above the table.

        Args:
            text (str): Table heading.

        Returns:
            ReportTable: ReportTable object.
        """
        self.title = text
        return self

    def set_float_format(self, pattern: str) -> ReportTable:
        self.float_format = pattern
        return self

    def add_row(self, row: Dict[str, Any]) -> ReportTable:
        """Method for appending one row.

        Args:
            row (Dict[str, Any]): Values keyed by column name.

        Returns:
            ReportTable: ReportTable object.
        """
        if not self.columns:
            self.columns = list(row)
        self.rows.append(dict(row))
        return self

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns)

    def render(self) -> str:
        """Render the table as aligned text, preceded by the title when set."""
        frame = self.to_frame()
        body = "(empty)" if frame.empty else frame.to_string(index=False, float_format=self.float_format.format)
        return f"{self.title}\n{body}" if self.title else body

    def to_csv(self, path: Union[str, Path]) -> Path:
        """Write the table as CSV, creating parent directories.

        Args:
            path (Union[str, Path]): Destination file.

        Returns:
            Path: The written file.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path
