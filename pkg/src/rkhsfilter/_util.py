"""Small shared helpers: canonical config hashing, CSV/JSON writing, environment stamps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import platform
import sys
from typing import Any, Iterable, Mapping, Sequence

import numpy as np


def to_jsonable(obj: Any) -> Any:
    """Recursively convert dataclasses/arrays/tuples into plain JSON types."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace variance)."""
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    """sha256 hex digest of the canonical JSON form of a config object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def env_stamp() -> dict:
    """Versions and platform info recorded next to experiment outputs."""
    import numpy
    import scipy

    return {
        "python": sys.version.split()[0],
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
    }


def fmt_float(x: float) -> str:
    # shortest round-trip representation keeps CSV output byte-stable
    return repr(float(x))


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write rows to CSV with round-trip float formatting and unix newlines."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_json(path: str | os.PathLike, obj: Any) -> None:
    with open(path, "w") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str | os.PathLike) -> Any:
    with open(path) as fh:
        return json.load(fh)
