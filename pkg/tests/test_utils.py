import logging
from pathlib import Path

from src.modules.utils import assess_paths, configure_logging, construct_destination_file_path, derive_seed


def test_assess_paths(tmp_path):
    source = tmp_path / "manifest.json"
    source.write_text("{}")
    blocker = tmp_path / "file.txt"
    blocker.write_text("")
    assert assess_paths(str(source), (".json",), str(tmp_path / "new")) == ""
    assert "not valid" in assess_paths(str(tmp_path / "missing.json"), (".json",), str(tmp_path))
    assert "expected .bin" in assess_paths(str(source), (".bin",), str(tmp_path))
    assert "not a directory" in assess_paths(str(source), (".json",), str(blocker))
    assert assess_paths(str(tmp_path / "missing.json"), (".json",), str(blocker)) == "Both source and destination are invalid."


def test_destination_file_path():
    path = construct_destination_file_path("out/saliency", "sample_3", "csv", "pitch")
    assert Path(path) == Path("out/saliency/sample_3_pitch.csv")


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(0, 1) == derive_seed(0, 1)
    assert len({derive_seed(0, index) for index in range(50)}) == 50
    assert derive_seed(1, 1) != derive_seed(0, 1)


def test_configure_logging_installs_one_handler():
    configure_logging()
    logger = configure_logging(verbose=True)
    assert logger.name == "src"
    assert len(logger.handlers) == 1
    assert logger.level == logging.DEBUG
