"""Synthetic checkpoint records drawn from known scaling laws.

A world has compute-to-loss laws for its "x" datasets and loss-to-loss couplings for its
"y" datasets. Each grid point (N, D, seed) yields one record: x losses follow the
compute-to-loss law, y losses follow the coupling applied to the noiseless x loss, and
independent Gaussian noise is added to every loss.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from lawline.core import (
    CheckpointRecord,
    ConfigId,
    InvalidArgumentError,
    LossMeasurement,
    LossUnit,
)
from lawline.fitlaw import (
    COEF_MAX,
    EXPONENT_MAX,
    K_MAX,
    KAPPA_MAX,
)
from lawline.ingest import RecordSet

# Llama sizes trained from scratch, 59M to 416M parameters
DEFAULT_N_VALUES = (59_000_000, 72_000_000, 76_000_000, 145_000_000, 158_000_000,
                    172_000_000, 314_000_000, 365_000_000, 416_000_000)
DEFAULT_EVAL_TOKENS = 1_000_000


def default_d_values(n_max: int = DEFAULT_N_VALUES[-1], count: int = 20, d_min: float = 1e2) -> tuple[int, ...]:
    """Log-spaced token counts up to 20 tokens per parameter of the largest model.

    The low end stands in for very early checkpoints; with the reference law constants
    it spans losses from about twice the floor down to the floor itself.
    """
    return tuple(int(round(v)) for v in np.geomspace(d_min, 20 * n_max, count))


@dataclass(frozen=True)
class ComputeLawParams:
    e: float
    a: float
    b: float
    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if not (self.e >= 0 and 0 < self.a <= COEF_MAX and 0 < self.b <= COEF_MAX):
            raise InvalidArgumentError(f"compute-to-loss parameters out of bounds: {self}")
        if not (0 < self.alpha <= EXPONENT_MAX and 0 < self.beta <= EXPONENT_MAX):
            raise InvalidArgumentError(f"compute-to-loss exponents out of bounds: {self}")

    def loss(self, n, d):
        n = np.asarray(n, dtype=float)
        d = np.asarray(d, dtype=float)
        return self.e + ((self.a / n) ** (self.alpha / self.beta) + self.b / d) ** self.beta


@dataclass(frozen=True)
class Coupling:
    x_dataset: str
    k: float
    kappa: float
    e_x: float
    e_y: float

    def __post_init__(self) -> None:
        if not (0 < self.k <= K_MAX and 0 < self.kappa <= KAPPA_MAX and self.e_x >= 0 and self.e_y >= 0):
            raise InvalidArgumentError(f"coupling parameters out of bounds: {self}")

    def loss(self, l_x):
        return self.e_y + self.k * np.maximum(np.asarray(l_x, dtype=float) - self.e_x, 0.0) ** self.kappa


@dataclass(frozen=True)
class WorldSpec:
    """Ground truth for one configuration.

    When ``bytes_per_token`` is set, the laws are read as bits-per-byte and records are
    emitted in nats per token with token and byte counts attached, so converting them back
    to bits per byte recovers the laws.
    """

    config: ConfigId
    train_laws: Mapping[str, ComputeLawParams]
    couplings: Mapping[str, Coupling] = field(default_factory=dict)
    noise_sigma: float = 0.0
    n_values: tuple[int, ...] = DEFAULT_N_VALUES
    d_values: tuple[int, ...] = field(default_factory=default_d_values)
    seeds: tuple[int, ...] = (0,)
    unit: LossUnit = LossUnit.NATS_PER_TOKEN
    bytes_per_token: Optional[float] = None
    eval_tokens: int = DEFAULT_EVAL_TOKENS

    def __post_init__(self) -> None:
        object.__setattr__(self, "train_laws", dict(self.train_laws))
        object.__setattr__(self, "couplings", dict(self.couplings))
        object.__setattr__(self, "n_values", tuple(int(v) for v in self.n_values))
        object.__setattr__(self, "d_values", tuple(int(v) for v in self.d_values))
        object.__setattr__(self, "seeds", tuple(int(v) for v in self.seeds))
        if not self.train_laws:
            raise InvalidArgumentError("a world needs at least one compute-to-loss law")
        if not (self.n_values and self.d_values and self.seeds):
            raise InvalidArgumentError("the N, D and seed grids must be non-empty")
        if min(self.n_values) < 1 or min(self.d_values) < 1:
            raise InvalidArgumentError("N and D grid values must be >= 1")
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise InvalidArgumentError("noise_sigma must be finite and >= 0")
        for y, c in self.couplings.items():
            if c.x_dataset not in self.train_laws:
                raise InvalidArgumentError(f"coupling {y!r} refers to unknown x dataset {c.x_dataset!r}")
            if y in self.train_laws:
                raise InvalidArgumentError(f"dataset {y!r} has both a compute law and a coupling")
        if self.bytes_per_token is not None and not self.bytes_per_token > 0:
            raise InvalidArgumentError("bytes_per_token must be positive")

    @property
    def datasets(self) -> list[str]:
        return list(self.train_laws) + list(self.couplings)

    def true_loss(self, dataset: str, n, d):
        """Noiseless loss on ``dataset`` at ``(N, D)`` in the laws' unit."""
        if dataset in self.train_laws:
            return self.train_laws[dataset].loss(n, d)
        c = self.couplings[dataset]
        return c.loss(self.train_laws[c.x_dataset].loss(n, d))

    def implied_compute_law(self, dataset: str) -> ComputeLawParams:
        """Compute-to-loss parameters that a coupled dataset follows exactly.

        Substituting the x law into the coupling keeps the same family when the
        coupling's shift equals the x floor: ``A' = A K^(1/(alpha kappa))``,
        ``B' = B K^(1/(beta kappa))``, ``alpha' = alpha kappa``, ``beta' = beta kappa``.
        """
        if dataset in self.train_laws:
            return self.train_laws[dataset]
        c = self.couplings[dataset]
        x = self.train_laws[c.x_dataset]
        if not math.isclose(c.e_x, x.e, rel_tol=0, abs_tol=1e-15):
            raise InvalidArgumentError(f"coupling {dataset!r} is not anchored at the x floor")
        return ComputeLawParams(
            c.e_y,
            x.a * c.k ** (1.0 / (x.alpha * c.kappa)),
            x.b * c.k ** (1.0 / (x.beta * c.kappa)),
            x.alpha * c.kappa,
            x.beta * c.kappa,
        )

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "train_laws": {k: vars(v).copy() for k, v in self.train_laws.items()},
            "couplings": {k: vars(v).copy() for k, v in self.couplings.items()},
            "noise_sigma": self.noise_sigma,
            "n_values": list(self.n_values),
            "d_values": list(self.d_values),
            "seeds": list(self.seeds),
            "unit": self.unit.value,
            "bytes_per_token": self.bytes_per_token,
            "eval_tokens": self.eval_tokens,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "WorldSpec":
        kwargs: dict = {
            "config": ConfigId.from_dict(data["config"]),
            "train_laws": {k: ComputeLawParams(**v) for k, v in data["train_laws"].items()},
            "couplings": {k: Coupling(**v) for k, v in (data.get("couplings") or {}).items()},
            "noise_sigma": float(data.get("noise_sigma", 0.0)),
        }
        for key in ("n_values", "d_values", "seeds"):
            if data.get(key) is not None:
                kwargs[key] = tuple(data[key])
        if data.get("unit") is not None:
            kwargs["unit"] = LossUnit.parse(data["unit"])
        if data.get("bytes_per_token") is not None:
            kwargs["bytes_per_token"] = float(data["bytes_per_token"])
        if data.get("eval_tokens") is not None:
            kwargs["eval_tokens"] = int(data["eval_tokens"])
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "WorldSpec":
        return cls.from_dict(json.loads(text))


def _point_rng(rng_seed: int, index: int) -> np.random.Generator:
    # counter-based stream per grid point: parallel and serial generation agree
    key = np.random.SeedSequence([rng_seed & 0xFFFFFFFF, rng_seed >> 32 & 0xFFFFFFFF, index]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def generate(spec: WorldSpec, rng_seed: int = 0) -> RecordSet:
    """One record per (N, D, seed) grid point, in N-major, then D, then seed order."""
    datasets = spec.datasets
    records = []
    index = 0
    for n in spec.n_values:
        for step, d in enumerate(spec.d_values):
            clean = {name: float(spec.true_loss(name, n, d)) for name in datasets}
            for seed in spec.seeds:
                rng = _point_rng(rng_seed, index)
                index += 1
                noise = rng.standard_normal(len(datasets)) if spec.noise_sigma > 0 else np.zeros(len(datasets))
                losses = {}
                for j, name in enumerate(datasets):
                    value = max(clean[name] + spec.noise_sigma * float(noise[j]), 0.0)
                    losses[name] = _measurement(spec, name, value)
                records.append(CheckpointRecord(spec.config, n, d, losses, seed, step))
    return RecordSet(tuple(records), "synthetic")


def _measurement(spec: WorldSpec, name: str, value: float) -> LossMeasurement:
    if spec.bytes_per_token is None:
        return LossMeasurement(name, value, spec.unit)
    tokens = spec.eval_tokens
    n_bytes = max(1, int(round(tokens * spec.bytes_per_token)))
    nats = value * n_bytes * math.log(2) / tokens
    return LossMeasurement(name, nats, LossUnit.NATS_PER_TOKEN, tokens, n_bytes)


class Intervention(str, enum.Enum):
    DATA_SHIFT = "data"
    ARCH_NOISE = "arch"
    TOKENIZER_SHIFT = "tokenizer"


def apply_intervention(
    spec: WorldSpec,
    kind: Intervention | str,
    magnitude: float,
    *,
    k_factor: float = 1.0,
    kappa_factor: float = 1.0,
    label: Optional[str] = None,
) -> WorldSpec:
    """Perturb a world the way a training intervention would.

    * ``DATA_SHIFT`` moves every coupling's ``E_y`` up by ``magnitude`` and scales ``K``
      and ``kappa`` by ``k_factor`` and ``kappa_factor``: a new loss-to-loss line.
    * ``ARCH_NOISE`` only adds ``magnitude`` to the noise level: same line, more scatter.
    * ``TOKENIZER_SHIFT`` scales bytes per token by ``1 + magnitude``; the bits-per-byte
      line is unchanged while per-token losses move.

    ``magnitude == 0`` returns ``spec`` untouched. ``label`` renames the changed config
    field (defaults to the old value with a suffix).
    """
    kind = Intervention(kind)
    if not magnitude >= 0:
        raise InvalidArgumentError("intervention magnitude must be >= 0")
    if magnitude == 0:
        return spec
    cfg = spec.config
    if kind is Intervention.DATA_SHIFT:
        couplings = {
            y: replace(c, e_y=c.e_y + magnitude, k=c.k * k_factor, kappa=c.kappa * kappa_factor)
            for y, c in spec.couplings.items()
        }
        config = replace(cfg, pretrain_data=label or f"{cfg.pretrain_data}+shift")
        return replace(spec, couplings=couplings, config=config)
    if kind is Intervention.ARCH_NOISE:
        config = replace(cfg, architecture=label or f"{cfg.architecture}+alt")
        return replace(spec, noise_sigma=spec.noise_sigma + magnitude, config=config)
    bpt = spec.bytes_per_token if spec.bytes_per_token is not None else 4.0
    config = replace(cfg, tokenizer=label or f"{cfg.tokenizer}+alt")
    return replace(spec, bytes_per_token=bpt * (1.0 + magnitude), config=config)


def reference_world(
    noise_sigma: float = 0.0,
    seeds: Sequence[int] = (0, 1, 2),
    d_values: Optional[Sequence[int]] = None,
    x_dataset: str = "train",
    y_dataset: str = "test",
    e_y: float = 1.8,
    k: float = 0.8,
    kappa: float = 1.3,
) -> WorldSpec:
    """The 9 x 20 x 3 world used throughout the tests and the acceptance suite."""
    law = ComputeLawParams(2.0, 400.0, 2000.0, 0.34, 0.28)
    return WorldSpec(
        ConfigId("fineweb-edu", "llama", "tiktoken"),
        {x_dataset: law},
        {y_dataset: Coupling(x_dataset, k, kappa, law.e, e_y)},
        noise_sigma,
        DEFAULT_N_VALUES,
        tuple(d_values) if d_values is not None else default_d_values(),
        tuple(seeds),
    )


def intervention_scenario(noise_sigma: float = 0.005) -> tuple[WorldSpec, WorldSpec, WorldSpec]:
    """Base, data-shifted and architecture-noise worlds on a bits-per-byte scale.

    The floors sit well inside the default [0, 2] comparison interval. The data shift
    raises the test floor by 0.1 and scales ``K`` by 1.2; the architecture change only
    adds scatter.
    """
    law = ComputeLawParams(0.7, 400.0, 2000.0, 0.34, 0.28)
    base = WorldSpec(
        ConfigId("fineweb-edu", "llama", "tiktoken"),
        {"val": law},
        {"test": Coupling("val", 0.8, 1.3, law.e, 0.6)},
        noise_sigma=noise_sigma,
        seeds=(0, 1, 2),
        bytes_per_token=4.2,
    )
    data = apply_intervention(base, Intervention.DATA_SHIFT, 0.1, k_factor=1.2, label="c4")
    arch = apply_intervention(base, Intervention.ARCH_NOISE, noise_sigma, label="mamba")
    return base, data, arch
