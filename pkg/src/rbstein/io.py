"""CSV / JSON-lines writers shared by the harness and the CLI.

Floats are written with 12 significant digits so that reruns are byte-identical.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.12g}"
    return str(x)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(f"{float(x):.12g}")
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(Path(path), "w") as fh:
        for r in records:
            fh.write(json.dumps(_jsonable(r), sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(Path(path)) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_params(path, P, eta=None) -> None:
    """Fitted dynamics as ``param, i, j, value`` rows (``eta`` uses ``j = 0``)."""
    P = np.asarray(P, dtype=float)
    rows = [("P", i, j, P[i, j]) for i in range(P.shape[0]) for j in range(P.shape[1])]
    if eta is not None:
        rows += [("eta", i, 0, v) for i, v in enumerate(np.asarray(eta, dtype=float))]
    write_csv(path, ["param", "i", "j", "value"], rows)


def read_params(path):
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    n = 1 + max(int(r["i"]) for r in rows if r["param"] == "P")
    P = np.zeros((n, n))
    eta = {}
    for r in rows:
        if r["param"] == "P":
            P[int(r["i"]), int(r["j"])] = float(r["value"])
        elif r["param"] == "eta":
            eta[int(r["i"])] = float(r["value"])
    return P, (np.array([eta[i] for i in sorted(eta)]) if eta else None)


def parse_date(s: str) -> dt.date:
    return dt.date.fromisoformat(s.strip())
