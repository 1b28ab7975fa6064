"""Deterministic, atomic artifact writers and readers."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

from lawline.analysis import InterventionMatrix
from lawline.core import InvalidArgumentError
from lawline.fitlaw import ComputeToLossLaw, LossToLossLaw, law_from_dict


def _clean(obj: Any) -> Any:
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dumps_json(obj: Any) -> str:
    """Stable JSON text; non-finite floats become ``null``."""
    return json.dumps(_clean(obj), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def atomic_write_text(path: str | Path, text: str) -> Path:
    """Write ``text`` to a sibling temp file, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path: str | Path, obj: Any) -> Path:
    return atomic_write_text(path, dumps_json(obj))


def fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ""
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    return atomic_write_text(path, csv_text(header, rows))


def load_laws(paths: Iterable[str | Path]) -> list[ComputeToLossLaw | LossToLossLaw]:
    """Read laws from JSON files holding one law, a list of laws, or ``{"laws": [...]}``."""
    laws = []
    for path in paths:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, dict) and "laws" in data:
            data = data["laws"]
        items = data if isinstance(data, list) else [data]
        for item in items:
            try:
                laws.append(law_from_dict(item))
            except (KeyError, TypeError) as exc:
                raise InvalidArgumentError(f"{path}: malformed law entry ({exc})") from None
    return laws


def load_matrices(paths: Iterable[str | Path]) -> list[InterventionMatrix]:
    out = []
    for path in paths:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, dict) and "matrices" in data:
            data = data["matrices"]
        items = data if isinstance(data, list) else [data]
        out.extend(InterventionMatrix.from_dict(item) for item in items)
    return out


def matrix_csv(matrix: InterventionMatrix) -> str:
    rows = [[label, *row] for label, row in zip(matrix.labels, matrix.areas)]
    return csv_text(["config", *matrix.labels], rows)


def matrix_long_csv(matrix: InterventionMatrix) -> str:
    rows = [
        [a, b, matrix.areas[i][j]]
        for i, a in enumerate(matrix.labels)
        for j, b in enumerate(matrix.labels)
    ]
    return csv_text(["row", "column", "area"], rows)


def slug(text: str) -> str:
    keep = [c if c.isalnum() or c in "-_." else "_" for c in text]
    return "".join(keep).strip("_") or "unnamed"
