"""CSV/JSON emission with a provenance header line."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence


def fmt(v) -> str:
    """Floats with 6 significant digits; everything else via ``str``."""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    if isinstance(v, tuple) and len(v) == 2 and all(isinstance(x, int) for x in v):
        return f"{v[0]}x{v[1]}"
    return str(v)


def header_line(config_hash: str, seed: int) -> str:
    return f"# config_sha256={config_hash} seed={seed}"


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence], header: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        if header:
            f.write(header + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(columns))
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def _round_floats(obj):
    if isinstance(obj, float):
        return float(fmt(obj)) if math.isfinite(obj) else fmt(obj)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def write_json(path: str | Path, payload: dict, config_hash: str, seed: int) -> Path:
    """JSON has no comments, so the header goes in a leading ``_header`` key."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"_header": header_line(config_hash, seed), **_round_floats(payload)}
    path.write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    return path
