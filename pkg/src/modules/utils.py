import logging
from pathlib import Path
from typing import Sequence
import numpy as np

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(verbose: bool = False) -> logging.Logger:
    """Install a single stream handler on the package logger.

    Args:
        verbose (bool, optional): DEBUG instead of INFO.

    Returns:
        logging.Logger: The configured `src` logger.
    """
    logger = logging.getLogger("src")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False
    return logger


def file_valid(file_path: str, suffixes: Sequence[str]) -> bool:
    """Determining if the file exists and has one of the expected suffixes. i.e. .json or .bin.

    Args:
        file_path (str): File path string.
        suffixes (Sequence[str]): Accepted suffixes, dot included.

    Returns:
        bool: True if path is valid and False if not.
    """
    path = Path(file_path)
    return path.is_file() and path.suffix.lower() in suffixes


def assess_paths(source_file: str, suffixes: Sequence[str], destination_path: str) -> str:
    """Assess whether an input file and an output directory are usable. The output directory may not exist yet.

    Args:
        source_file (str): Path to the input file.
        suffixes (Sequence[str]): Accepted input suffixes.
        destination_path (str): The output directory.

    Returns:
        str: Empty when usable, otherwise the reason.
    """
    destination = Path(destination_path)
    destination_ok = not destination.exists() or destination.is_dir()
    if not file_valid(source_file, suffixes) and not destination_ok:
        return "Both source and destination are invalid."
    elif not file_valid(source_file, suffixes):
        return f"Source file {source_file} is not valid (expected {', '.join(suffixes)})."
    elif not destination_ok:
        return f"Destination path {destination_path} is not a directory."
    else:
        return ""


def construct_destination_file_path(
    destination_dir: str,
    source_name: str,
    destination_file_format: str,
    group_name: str,
) -> str:
    """Construct an output file path of the form <destination_dir>/<source_name>_<group_name>.<format>.

    Args:
        destination_dir (str): Destination directory.
        source_name (str): Name of what the file describes, e.g. a patient or recording id.
        destination_file_format (str): Destination file format. i.e. csv
        group_name (str): Label group or other qualifier.

    Returns:
        str: Destination file path.
    """
    destination_file_name = f"{Path(source_name).stem}_{group_name}.{destination_file_format}"
    return f"{Path(destination_dir)/destination_file_name}"


def derive_seed(root_seed: int, *path: int) -> int:
    """Child seed for one item (a recording, a fold) under a root seed."""
    return int(np.random.SeedSequence([root_seed, *path]).generate_state(1)[0])
