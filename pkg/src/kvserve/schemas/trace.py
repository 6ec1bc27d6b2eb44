from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class TraceRecord(BaseModel):
    """One line of a JSONL trace; field names are the on-disk keys."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    ts: int = Field(ge=0)
    user: int = Field(ge=0)
    dn: int = Field(ge=0)
    nc: int = Field(ge=1)
    tokens: list[int] | None = None
    cands: list[int] | None = None

    @model_validator(mode="after")
    def _check_ids(self) -> TraceRecord:
        if self.tokens is not None and len(self.tokens) != self.dn:
            raise ValueError(f"tokens tiene {len(self.tokens)} ids y dn={self.dn}")
        if self.cands is not None and len(self.cands) != self.nc:
            raise ValueError(f"cands tiene {len(self.cands)} ids y nc={self.nc}")
        if (self.tokens is None) != (self.cands is None):
            raise ValueError("tokens y cands deben venir juntos")
        return self


class GenConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_users: int = Field(default=100, ge=1)
    total_requests: int = Field(default=1000, ge=0)
    seed: int = Field(default=0, ge=0)
    length_min: int = Field(default=1, ge=1)
    length_max: int = Field(default=20000, ge=1)
    length_mean: float | None = None
    beta_a: float = Field(default=1.5, gt=0)
    delta_mean: float = Field(default=32.0, ge=1)
    delta_dist: Literal["fixed", "geometric"] = "geometric"
    num_candidates: int = Field(default=16, ge=1)
    interarrival: Literal["lognormal", "pareto"] = "lognormal"
    gap_scale_ms: float = Field(default=300_000.0, gt=0)
    gap_shape: float = Field(default=1.5, gt=0)
    session_gap_ms: int = Field(default=60_000, ge=1)
    revisit_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    revisit_gap_ms: float = Field(default=14_400_000.0, gt=0)
    revisit_shape: float = Field(default=0.3, gt=0)
    start_spread_ms: int = Field(default=3_600_000, ge=0)
    vocab_size: int = Field(default=1000, ge=2)
    with_tokens: bool = False

    @model_validator(mode="after")
    def _check_lengths(self) -> GenConfig:
        if self.length_min > self.length_max:
            raise ValueError(
                f"length_min={self.length_min} supera length_max={self.length_max}"
            )
        if self.length_mean is not None and not (
            self.length_min < self.length_mean < self.length_max
        ):
            raise ValueError(
                f"la longitud media {self.length_mean} debe quedar estrictamente entre "
                f"{self.length_min} y {self.length_max}"
            )
        return self

    @property
    def beta_b(self) -> float:
        fraction = (self.length_mean - self.length_min) / (self.length_max - self.length_min)
        return self.beta_a * (1.0 - fraction) / fraction
