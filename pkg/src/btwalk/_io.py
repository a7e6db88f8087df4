"""CSV/JSON emission shared by the scenario runners."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def write_csv(path, header, rows, notes=()):
    """Comment lines (``# ...``) with units and censoring semantics, then a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        for line in notes:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path):
    """(header, rows as lists of strings); comment lines are skipped."""
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rd = list(csv.reader(lines))
    if not rd:
        raise ValueError(f"{path}: no header row")
    return rd[0], rd[1:]


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    try:
        import numpy as np
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
    except ImportError:  # pragma: no cover
        pass
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
