"""
Utility functions for use with tests.
"""
import csv
import json
import pathlib

import numpy as np

from .defaults import tiny_document


def write_config(directory: pathlib.Path, document=None, name="config.json") -> pathlib.Path:
    """Writes a config document (the tiny one by default) and returns its path."""
    path = pathlib.Path(directory) / name
    path.write_text(json.dumps(document or tiny_document(), indent=4), encoding="utf-8")
    return path


def read_csv(path: pathlib.Path):
    """Returns (header, rows) of a CSV file."""
    with open(path, encoding="utf-8", newline="") as handle:
        rows = list(csv.reader(handle))
    return rows[0], rows[1:]


def standard_normal_target(particles):
    """log N(0, I) and its gradient, row by row."""
    particles = np.atleast_2d(particles)
    return -0.5 * np.sum(particles**2, axis=1), -particles


def random_simplex(rng: np.random.Generator, size: int) -> np.ndarray:
    """A random probability vector with full support."""
    values = rng.uniform(0.05, 1.0, size)
    return values / values.sum()
