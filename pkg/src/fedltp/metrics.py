"""Communication-cost accounting and CSV/JSON metrics files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List

from .errors import FedLTPError

BITS_PER_PARAM = 32

COLUMNS = (
    "round",
    "test_accuracy",
    "noisy_val_score",
    "epsilon",
    "comm_bits_cumulative",
    "retention_p",
    "scheme",
    "seed",
)


def comm_cost_bits(p: float, d: int, rounds: float, q: float, direction_factor: int = 1) -> float:
    """``direction_factor * p * d * 32 * rounds * q`` bits for one client."""
    if min(p, d, rounds, q) < 0:
        raise ValueError("communication cost inputs must be non-negative")
    if direction_factor not in (1, 2):
        raise ValueError("direction_factor must be 1 (upload) or 2 (upload + download)")
    return direction_factor * p * d * BITS_PER_PARAM * rounds * q


def bits_to_mb(bits: float) -> float:
    return bits / 8.0 / 1e6


@dataclass
class MetricsRow:
    round: int
    test_accuracy: float
    noisy_val_score: float
    epsilon: float
    comm_bits_cumulative: float
    retention_p: float
    scheme: str
    seed: int


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _parse(column: str, text: str):
    if column in ("round", "seed"):
        return int(text)
    if column == "scheme":
        return text
    return float(text)


def render_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, c)) for c in COLUMNS])
    return buf.getvalue()


def render_json(rows: Iterable[MetricsRow]) -> str:
    # json uses the shortest repr, which round-trips every finite float exactly
    return json.dumps([{c: getattr(r, c) for c in COLUMNS} for r in rows], indent=1) + "\n"


def write_metrics(rows: Iterable[MetricsRow], path, fmt: str = "csv") -> Path:
    path = Path(path)
    if fmt == "csv":
        text = render_csv(rows)
    elif fmt == "json":
        text = render_json(rows)
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")
    try:
        path.write_text(text)
    except OSError as exc:
        raise FedLTPError(f"cannot write metrics to {path}: {exc.strerror}") from exc
    return path


def read_metrics(path, fmt: str = None) -> List[MetricsRow]:
    path = Path(path)
    if fmt is None:
        fmt = "json" if path.suffix == ".json" else "csv"
    text = path.read_text()
    if fmt == "json":
        return [MetricsRow(**{c: _parse(c, str(v)) if c in ("round", "seed") else v
                              for c, v in item.items()}) for item in json.loads(text)]
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != COLUMNS:
        raise FedLTPError(f"unexpected metrics header in {path}: {header}")
    return [MetricsRow(**{c: _parse(c, v) for c, v in zip(COLUMNS, line)}) for line in reader]


def write_json(obj, path) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")
    except OSError as exc:
        raise FedLTPError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def _json_default(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "__dataclass_fields__"):
        return asdict(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")

