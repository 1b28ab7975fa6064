"""Domain types, unit conversion, and loss aggregation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional


class LawlineError(Exception):
    """Base class for all domain errors raised by lawline."""


class InvalidArgumentError(LawlineError, ValueError):
    pass


class MissingDataError(LawlineError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class UnitMismatchError(LawlineError, ValueError):
    pass


class LossUnit(str, enum.Enum):
    NATS_PER_TOKEN = "nats"
    BITS_PER_BYTE = "bpb"

    @classmethod
    def parse(cls, text: str) -> "LossUnit":
        key = text.strip().lower().replace("-", "_")
        aliases = {
            "nats": cls.NATS_PER_TOKEN,
            "nats_per_token": cls.NATS_PER_TOKEN,
            "natspertoken": cls.NATS_PER_TOKEN,
            "nll": cls.NATS_PER_TOKEN,
            "bpb": cls.BITS_PER_BYTE,
            "bits_per_byte": cls.BITS_PER_BYTE,
            "bitsperbyte": cls.BITS_PER_BYTE,
        }
        try:
            return aliases[key]
        except KeyError:
            raise InvalidArgumentError(f"unknown loss unit {text!r}") from None


@dataclass(frozen=True, order=True)
class ConfigId:
    """A training setup: pretraining data, architecture, tokenizer plus free-form extras.

    ``extra`` is stored as a tuple of ``(key, value)`` pairs in insertion order, so
    two ids are equal only when every field, including extras, matches.
    """

    pretrain_data: str
    architecture: str
    tokenizer: str
    extra: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        for name in ("pretrain_data", "architecture", "tokenizer"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise InvalidArgumentError(f"ConfigId.{name} must be a non-empty string")
        extra = self.extra
        if isinstance(extra, Mapping):
            extra = tuple(extra.items())
        object.__setattr__(self, "extra", tuple((str(k), str(v)) for k, v in extra))

    @classmethod
    def make(cls, pretrain_data: str, architecture: str, tokenizer: str, **extra: object) -> "ConfigId":
        return cls(pretrain_data, architecture, tokenizer, tuple((k, str(v)) for k, v in extra.items()))

    @property
    def extra_dict(self) -> dict[str, str]:
        return dict(self.extra)

    @property
    def label(self) -> str:
        parts = [self.pretrain_data, self.architecture, self.tokenizer]
        parts += [f"{k}={v}" for k, v in self.extra]
        return "/".join(parts)

    def to_dict(self) -> dict:
        return {
            "pretrain_data": self.pretrain_data,
            "architecture": self.architecture,
            "tokenizer": self.tokenizer,
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ConfigId":
        return cls(
            data["pretrain_data"],
            data["architecture"],
            data["tokenizer"],
            tuple((str(k), str(v)) for k, v in (data.get("extra") or {}).items()),
        )


@dataclass(frozen=True)
class LossMeasurement:
    dataset: str
    value: float
    unit: LossUnit = LossUnit.NATS_PER_TOKEN
    token_count: Optional[int] = None
    byte_count: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.dataset:
            raise InvalidArgumentError("LossMeasurement.dataset must be non-empty")
        value = float(self.value)
        if not math.isfinite(value) or value < 0:
            raise InvalidArgumentError(f"loss for {self.dataset!r} must be finite and >= 0, got {self.value!r}")
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "unit", LossUnit(self.unit))
        for name in ("token_count", "byte_count"):
            count = getattr(self, name)
            if count is not None and (int(count) != count or count < 1):
                raise InvalidArgumentError(f"{name} must be a positive integer, got {count!r}")

    def to_bpb(self) -> "LossMeasurement":
        """Return this measurement expressed in bits per byte."""
        if self.unit is LossUnit.BITS_PER_BYTE:
            return self
        if self.token_count is None or self.byte_count is None:
            raise MissingDataError(
                f"converting {self.dataset!r} to bits/byte needs both token_count and byte_count"
            )
        return LossMeasurement(
            self.dataset,
            nll_to_bpb(self.value, self.token_count, self.byte_count),
            LossUnit.BITS_PER_BYTE,
            self.token_count,
            self.byte_count,
        )

    def to_dict(self) -> dict:
        out: dict = {"value": self.value, "unit": self.unit.value}
        if self.token_count is not None:
            out["token_count"] = self.token_count
        if self.byte_count is not None:
            out["byte_count"] = self.byte_count
        return out


@dataclass(frozen=True)
class CheckpointRecord:
    config: ConfigId
    params_n: int
    tokens_d: int
    losses: Mapping[str, LossMeasurement] = field(default_factory=dict, hash=False)
    seed: Optional[int] = None
    step: Optional[int] = None

    def __post_init__(self) -> None:
        if int(self.params_n) != self.params_n or self.params_n < 1:
            raise InvalidArgumentError(f"params_n must be a positive integer, got {self.params_n!r}")
        if int(self.tokens_d) != self.tokens_d or self.tokens_d < 1:
            raise InvalidArgumentError(f"tokens_d must be a positive integer, got {self.tokens_d!r}")
        object.__setattr__(self, "params_n", int(self.params_n))
        object.__setattr__(self, "tokens_d", int(self.tokens_d))
        if self.step is not None and self.step < 0:
            raise InvalidArgumentError(f"step must be >= 0, got {self.step!r}")
        if not self.losses:
            raise InvalidArgumentError("a checkpoint record needs at least one loss")
        losses = dict(self.losses)
        for label, m in losses.items():
            if m.dataset != label:
                raise InvalidArgumentError(f"loss keyed {label!r} carries dataset {m.dataset!r}")
        units = {m.unit for m in losses.values()}
        if len(units) > 1:
            raise UnitMismatchError(
                f"record mixes loss units {sorted(u.value for u in units)}; convert before building it"
            )
        object.__setattr__(self, "losses", losses)

    @property
    def unit(self) -> LossUnit:
        return next(iter(self.losses.values())).unit

    def loss(self, dataset: str) -> float:
        try:
            return self.losses[dataset].value
        except KeyError:
            raise MissingDataError(f"record has no loss for dataset {dataset!r}") from None

    def key(self) -> tuple:
        return (self.config, self.params_n, self.tokens_d, self.seed, self.step)

    def to_bpb(self) -> "CheckpointRecord":
        return CheckpointRecord(
            self.config,
            self.params_n,
            self.tokens_d,
            {k: m.to_bpb() for k, m in self.losses.items()},
            self.seed,
            self.step,
        )

    def with_losses(self, losses: Mapping[str, LossMeasurement]) -> "CheckpointRecord":
        return CheckpointRecord(self.config, self.params_n, self.tokens_d, losses, self.seed, self.step)


def nll_to_bpb(loss_nats_per_token: float, token_count: int, byte_count: int) -> float:
    """Convert a per-token negative log-likelihood (nats) into bits per byte.

    ``bpb = loss * token_count / (byte_count * ln 2)``
    """
    if byte_count is None or byte_count <= 0:
        raise InvalidArgumentError(f"byte_count must be >= 1, got {byte_count!r}")
    if token_count is None or token_count <= 0:
        raise InvalidArgumentError(f"token_count must be >= 1, got {token_count!r}")
    loss = float(loss_nats_per_token)
    if not math.isfinite(loss) or loss < 0:
        raise InvalidArgumentError(f"loss must be finite and >= 0, got {loss_nats_per_token!r}")
    return loss * token_count / (byte_count * math.log(2))


def average_loss(record: CheckpointRecord, datasets: Iterable[str]) -> float:
    """Arithmetic mean of the record's losses on ``datasets``."""
    datasets = list(datasets)
    if not datasets:
        raise InvalidArgumentError("average_loss needs at least one dataset")
    missing = [d for d in datasets if d not in record.losses]
    if missing:
        raise MissingDataError(f"record is missing datasets: {', '.join(missing)}")
    values = sorted(record.losses[d].value for d in datasets)
    # division can round past the extremes when all values are equal
    return min(max(math.fsum(values) / len(values), values[0]), values[-1])
