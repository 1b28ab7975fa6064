"""Reading, validating, grouping and writing checkpoint evaluation records.

Two on-disk formats are supported:

* JSON Lines (canonical): one record per line::

    {"config": {"pretrain_data": ..., "architecture": ..., "tokenizer": ..., "extra": {...}},
     "params_n": 421000000, "tokens_d": 8000000000, "seed": 0, "step": 1000,
     "losses": {"C4": {"value": 3.66, "unit": "nats", "token_count": 10, "byte_count": 42}}}

* CSV (flat view): fixed columns ``pretrain_data, architecture, tokenizer, params_n,
  tokens_d`` and optional ``seed, step``; ``extra.<key>`` columns become config extras,
  ``tokens.<label>`` / ``bytes.<label>`` columns carry counts, and every other column is
  a loss. A ``#unit=<nats|bpb>`` line before the header sets the unit for the whole
  file (default nats). Empty cells mean "not evaluated".
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

from lawline.core import (
    CheckpointRecord,
    ConfigId,
    InvalidArgumentError,
    LawlineError,
    LossMeasurement,
    LossUnit,
    average_loss,
)

logger = logging.getLogger(__name__)

_CSV_FIXED = ("pretrain_data", "architecture", "tokenizer", "params_n", "tokens_d", "seed", "step")


class EmptyInputError(LawlineError):
    pass


@dataclass(frozen=True)
class Diagnostic:
    line: int
    message: str
    level: str = "error"
    field: Optional[str] = None

    def __str__(self) -> str:
        where = f"line {self.line}" if self.line else "input"
        what = f" [{self.field}]" if self.field else ""
        return f"{self.level}: {where}{what}: {self.message}"


@dataclass(frozen=True)
class RecordSet:
    records: tuple[CheckpointRecord, ...]
    source: str = "synthetic"
    diagnostics: tuple[Diagnostic, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[CheckpointRecord]:
        return iter(self.records)

    @property
    def datasets(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            for label in r.losses:
                seen.setdefault(label)
        return list(seen)


@dataclass(frozen=True)
class ConfigGroup:
    config: ConfigId
    records: tuple[CheckpointRecord, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        for r in self.records:
            if r.config != self.config:
                raise InvalidArgumentError(f"record with config {r.config.label} placed in group {self.config.label}")

    def __len__(self) -> int:
        return len(self.records)

    def with_dataset(self, dataset: str) -> list[CheckpointRecord]:
        return [r for r in self.records if dataset in r.losses]


class _RowError(Exception):
    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


def _require(obj: dict, key: str):
    if key not in obj or obj[key] is None:
        raise _RowError(f"missing required field {key!r}", key)
    return obj[key]


def _as_int(value, name: str, minimum: int) -> int:
    if isinstance(value, bool):
        raise _RowError(f"{name} must be an integer", name)
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise _RowError(f"{name} must be an integer, got {value!r}", name) from None
    if not number.is_integer() or number < minimum:
        raise _RowError(f"{name} must be an integer >= {minimum}, got {value!r}", name)
    return int(number)


def record_from_dict(obj: dict) -> CheckpointRecord:
    """Build a record from its JSON object form, raising ``ValueError`` on bad input."""
    if not isinstance(obj, dict):
        raise _RowError("record must be a JSON object")
    cfg = _require(obj, "config")
    if not isinstance(cfg, dict):
        raise _RowError("config must be an object", "config")
    try:
        config = ConfigId(
            str(_require(cfg, "pretrain_data")),
            str(_require(cfg, "architecture")),
            str(_require(cfg, "tokenizer")),
            tuple((str(k), str(v)) for k, v in (cfg.get("extra") or {}).items()),
        )
    except InvalidArgumentError as exc:
        raise _RowError(str(exc), "config") from None
    params_n = _as_int(_require(obj, "params_n"), "params_n", 1)
    tokens_d = _as_int(_require(obj, "tokens_d"), "tokens_d", 1)
    seed = None if obj.get("seed") is None else _as_int(obj["seed"], "seed", -(2**63))
    step = None if obj.get("step") is None else _as_int(obj["step"], "step", 0)
    raw_losses = _require(obj, "losses")
    if not isinstance(raw_losses, dict) or not raw_losses:
        raise _RowError("losses must be a non-empty object", "losses")
    losses = {}
    for label, m in raw_losses.items():
        if not isinstance(m, dict):
            m = {"value": m}
        try:
            losses[label] = LossMeasurement(
                label,
                float(_require(m, "value")),
                LossUnit.parse(str(m.get("unit", "nats"))),
                None if m.get("token_count") is None else _as_int(m["token_count"], "token_count", 1),
                None if m.get("byte_count") is None else _as_int(m["byte_count"], "byte_count", 1),
            )
        except (TypeError, ValueError) as exc:
            raise _RowError(f"loss {label!r}: {exc}", f"losses.{label}") from None
    try:
        return CheckpointRecord(config, params_n, tokens_d, losses, seed, step)
    except ValueError as exc:
        raise _RowError(str(exc)) from None


def record_to_dict(record: CheckpointRecord) -> dict:
    return {
        "config": record.config.to_dict(),
        "params_n": record.params_n,
        "tokens_d": record.tokens_d,
        "seed": record.seed,
        "step": record.step,
        "losses": {label: m.to_dict() for label, m in record.losses.items()},
    }


def dumps_jsonl(records: Iterable[CheckpointRecord]) -> str:
    """Canonical JSONL text for ``records``; stable across runs."""
    lines = [json.dumps(record_to_dict(r), ensure_ascii=False, separators=(", ", ": ")) for r in records]
    return "".join(line + "\n" for line in lines)


def _consistency_diagnostics(records: Sequence[CheckpointRecord]) -> list[Diagnostic]:
    out: list[Diagnostic] = []
    labels_by_config: dict[ConfigId, set[frozenset]] = defaultdict(set)
    seen: dict[tuple, int] = {}
    for i, r in enumerate(records):
        labels_by_config[r.config].add(frozenset(r.losses))
        k = r.key()
        if k in seen:
            out.append(
                Diagnostic(
                    0,
                    f"duplicate checkpoint (N={r.params_n}, D={r.tokens_d}, seed={r.seed}, step={r.step}) "
                    f"for {r.config.label}; records {seen[k]} and {i} both kept",
                    "warning",
                )
            )
        else:
            seen[k] = i
    for config, label_sets in labels_by_config.items():
        if len(label_sets) > 1:
            out.append(Diagnostic(0, f"ragged dataset coverage within config {config.label}", "warning"))
    return out


def parse_jsonl(text: str, source: str = "<string>") -> RecordSet:
    records: list[CheckpointRecord] = []
    diags: list[Diagnostic] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            diags.append(Diagnostic(lineno, f"invalid JSON: {exc.msg}"))
            continue
        try:
            records.append(record_from_dict(obj))
        except _RowError as exc:
            diags.append(Diagnostic(lineno, str(exc), field=exc.field))
    return RecordSet(tuple(records), source, tuple(diags + _consistency_diagnostics(records)))


def parse_csv(text: str, source: str = "<string>") -> RecordSet:
    unit = LossUnit.NATS_PER_TOKEN
    lines = text.splitlines(keepends=True)
    offset = 0
    while offset < len(lines) and lines[offset].lstrip().startswith("#"):
        directive = lines[offset].strip().lstrip("#").strip()
        if directive.lower().startswith("unit="):
            unit = LossUnit.parse(directive.split("=", 1)[1])
        offset += 1
    reader = csv.reader(io.StringIO("".join(lines[offset:])))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        return RecordSet((), source, (Diagnostic(0, "CSV has no header row"),))

    extra_cols = [h for h in header if h.startswith("extra.")]
    count_cols = {h for h in header if h.startswith(("tokens.", "bytes."))}
    loss_cols = [h for h in header if h not in _CSV_FIXED and h not in count_cols and h not in extra_cols]

    records: list[CheckpointRecord] = []
    diags: list[Diagnostic] = []
    for row_index, row in enumerate(reader):
        lineno = offset + 2 + row_index
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            diags.append(Diagnostic(lineno, f"expected {len(header)} columns, found {len(row)}"))
            continue
        cells = {h: c.strip() for h, c in zip(header, row)}
        obj: dict = {
            "config": {
                "pretrain_data": cells.get("pretrain_data") or None,
                "architecture": cells.get("architecture") or None,
                "tokenizer": cells.get("tokenizer") or None,
                "extra": {h[len("extra."):]: cells[h] for h in extra_cols if cells[h]},
            },
            "params_n": cells.get("params_n") or None,
            "tokens_d": cells.get("tokens_d") or None,
            "seed": cells.get("seed") or None,
            "step": cells.get("step") or None,
            "losses": {},
        }
        for label in loss_cols:
            if not cells[label]:
                continue
            m: dict = {"value": cells[label], "unit": unit.value}
            if cells.get(f"tokens.{label}"):
                m["token_count"] = cells[f"tokens.{label}"]
            if cells.get(f"bytes.{label}"):
                m["byte_count"] = cells[f"bytes.{label}"]
            obj["losses"][label] = m
        try:
            records.append(record_from_dict(obj))
        except _RowError as exc:
            diags.append(Diagnostic(lineno, str(exc), field=exc.field))
    return RecordSet(tuple(records), source, tuple(diags + _consistency_diagnostics(records)))


def load_records(path: str | Path, format: Optional[str] = None) -> RecordSet:
    """Load a record file.

    Args:
        path: JSONL or CSV file.
        format: ``"jsonl"`` or ``"csv"``; inferred from the suffix when omitted.

    Raises:
        OSError: the file cannot be read.
        EmptyInputError: no line produced a valid record.
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    format = format.lower()
    text = path.read_text(encoding="utf-8")
    if format in ("jsonl", "jsonlines", "json"):
        rs = parse_jsonl(text, str(path))
    elif format == "csv":
        rs = parse_csv(text, str(path))
    else:
        raise InvalidArgumentError(f"unknown record format {format!r}")
    for d in rs.diagnostics:
        logger.warning("%s: %s", path, d)
    if not rs.records:
        detail = "; ".join(str(d) for d in rs.diagnostics[:5])
        raise EmptyInputError(f"{path}: no valid records" + (f" ({detail})" if detail else ""))
    return rs


def group_by_config(rs: RecordSet | Iterable[CheckpointRecord]) -> list[ConfigGroup]:
    """Partition records by configuration, groups sorted by config fields."""
    buckets: dict[ConfigId, list[CheckpointRecord]] = {}
    for r in rs:
        buckets.setdefault(r.config, []).append(r)
    return [ConfigGroup(cfg, tuple(buckets[cfg])) for cfg in sorted(buckets)]


def filter_group(group: ConfigGroup, predicate: Callable[[CheckpointRecord], bool]) -> ConfigGroup:
    return ConfigGroup(group.config, tuple(r for r in group.records if predicate(r)))


def average_label(datasets: Sequence[str]) -> str:
    return datasets[0] if len(datasets) == 1 else "avg(" + ",".join(datasets) + ")"


def with_average(records: Iterable[CheckpointRecord], datasets: Sequence[str], label: Optional[str] = None) -> list[CheckpointRecord]:
    """Add an averaged-loss entry to every record that has all of ``datasets``.

    Records lacking any of them are passed through unchanged. With a single dataset the
    records are returned as they are.
    """
    datasets = list(datasets)
    label = label or average_label(datasets)
    out = []
    for r in records:
        if label in r.losses or not all(d in r.losses for d in datasets):
            out.append(r)
            continue
        losses = dict(r.losses)
        losses[label] = LossMeasurement(label, average_loss(r, datasets), r.unit)
        out.append(r.with_losses(losses))
    return out


def convert_unit(records: Iterable[CheckpointRecord], unit: LossUnit) -> list[CheckpointRecord]:
    """Express every record in ``unit``; bits-per-byte cannot be turned back into nats."""
    out = []
    for r in records:
        if r.unit is unit:
            out.append(r)
        elif unit is LossUnit.BITS_PER_BYTE:
            out.append(r.to_bpb())
        else:
            raise InvalidArgumentError("records in bits per byte cannot be converted to nats per token")
    return out
