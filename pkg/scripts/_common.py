import logging
import sys
from pathlib import Path

from gradleak.config import load_config

CONFIGS = Path(__file__).resolve().parent / "configs"


def config(name, output=None, seeds=None):
    cfg = load_config(CONFIGS / f"{name}.ini")
    if seeds is not None:
        cfg = cfg.with_seeds(seeds)
    return cfg if output is None else cfg.with_output(Path(output) / name)


def setup_logging():
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(asctime)s %(message)s")
