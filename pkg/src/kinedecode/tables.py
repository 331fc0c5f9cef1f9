# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""CSV tables with a header row; floats are written with nine significant digits."""

import csv
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

FLOAT_FORMAT = "%.9g"

#: Shortest repr that reads back to the same float64.
EXACT_FORMAT = "%r"


def _cell(value, float_format: str = FLOAT_FORMAT) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return float_format % float(value)
    return str(value)


def write_table(path, header: Sequence[str], rows: Iterable[Sequence],
                float_format: str = FLOAT_FORMAT) -> int:
    """Write *rows* under *header*; returns the number of data rows."""
    count = 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError("Row %d has %d cells, header has %d"
                                 % (count, len(row), len(header)))
            w.writerow([_cell(v, float_format) for v in row])
            count += 1
    return count


def write_matrix(path, header: Sequence[str], matrix: np.ndarray,
                 float_format: str = FLOAT_FORMAT) -> int:
    """Write a ``samples x columns`` numeric matrix."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[1] != len(header):
        raise ValueError("Matrix of shape %s does not fit %d columns" % (matrix.shape, len(header)))
    return write_table(path, header, matrix.tolist(), float_format)


def read_table(path) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError("%s is empty" % Path(path).name) from None
        return header, [row for row in reader if row]


def read_matrix(path) -> Tuple[List[str], np.ndarray]:
    """Read a numeric table; raises ``ValueError`` on ragged rows or non-numbers."""
    header, rows = read_table(path)
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError("%s row %d has %d cells, header has %d"
                             % (Path(path).name, i + 1, len(row), len(header)))
    try:
        data = np.array([[float(c) for c in row] for row in rows], dtype=np.float64)
    except ValueError as e:
        raise ValueError("%s: %s" % (Path(path).name, e)) from None
    return header, data.reshape(len(rows), len(header))
