import numpy as np

from typing import Sequence


def key_values(line: str) -> dict[str, str]:
    """Parse one `key=value key=value` report line."""
    pairs = {}
    for token in line.split():
        key, separator, value = token.partition("=")
        if separator == "":
            raise ValueError(f"not a key=value token: {token!r}")
        pairs[key] = value
    return pairs


def mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) != 0 else 0.0


def table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned columns separated by two spaces."""
    widths = [
        max(len(row[i]) for row in [header, *rows])
        for i in range(len(header))
    ]
    lines = [
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths))
        for row in [header, *rows]
    ]
    return "\n".join(line.rstrip() for line in lines)
