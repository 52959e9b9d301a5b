"""Plain-text artifact writers: loss curves, field images, summary tables.

Everything here is deterministic byte-for-byte given the same inputs, which
the pipeline relies on for reproducibility checks.  Floats are written with
``repr`` so values round-trip exactly.
"""

from __future__ import annotations

import csv
import json
from typing import Sequence

import numpy as np


def write_loss_curve(path, curve: Sequence[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in curve:
            writer.writerow([epoch, repr(float(loss))])


def save_field_csv(path, field: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(field, dtype=np.float64):
            writer.writerow([repr(float(v)) for v in row])


def load_field_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def save_field_pgm(path, field: np.ndarray) -> None:
    """ASCII portable graymap; the value range is mapped linearly to 0..255."""
    arr = np.asarray(field, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    span = hi - lo if hi > lo else 1.0
    gray = np.rint((arr - lo) / span * 255).astype(int)
    lines = [f"P2", f"# range [{lo!r}, {hi!r}]", f"{arr.shape[1]} {arr.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in gray]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
