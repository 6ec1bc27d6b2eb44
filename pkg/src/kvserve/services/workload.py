"""JSONL traces and the seeded synthetic workload generator."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Iterator, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from .. import config
from ..core import Request, pages_needed
from ..schemas.trace import GenConfig, TraceRecord

logger = logging.getLogger(__name__)


class TraceFormatError(ValueError):
    pass


class GeneratorConfigError(ValueError):
    pass


# Short returns within a session plus regular far returns; the far share sets
# how much of the history survives on a device smaller than the working set.
PRESETS: dict[str, dict[str, Any]] = {
    "kuairand1k": {
        "num_users": 1000,
        "total_requests": 20000,
        "length_min": 1,
        "length_max": 20000,
        "length_mean": 6375.0,
        "beta_a": 1.5,
        "delta_mean": 64.0,
        "num_candidates": 16,
        "gap_scale_ms": 120_000.0,
        "gap_shape": 1.0,
        "revisit_prob": 0.5,
        "revisit_gap_ms": 14_400_000.0,
        "revisit_shape": 0.3,
        "start_spread_ms": 14_400_000,
    },
    "mt": {
        "num_users": 2884,
        "total_requests": 20000,
        "length_min": 4000,
        "length_max": 6000,
        "length_mean": 5189.0,
        "beta_a": 4.0,
        "delta_mean": 32.0,
        "num_candidates": 16,
        "gap_scale_ms": 120_000.0,
        "gap_shape": 1.0,
        "revisit_prob": 0.4,
        "revisit_gap_ms": 14_400_000.0,
        "revisit_shape": 0.3,
        "start_spread_ms": 14_400_000,
    },
}


def build_gen_config(**fields: Any) -> GenConfig:
    try:
        return GenConfig.model_validate(fields)
    except ValidationError as exc:
        raise GeneratorConfigError(f"configuración del generador inválida: {exc}") from exc


def preset_config(name: str, **overrides: Any) -> GenConfig:
    if name not in PRESETS:
        raise GeneratorConfigError(
            f"preset desconocido {name!r}; opciones: {', '.join(sorted(PRESETS))}"
        )
    fields = dict(PRESETS[name])
    if config.PRESET_REQUESTS is not None:
        fields["total_requests"] = config.PRESET_REQUESTS
    fields.update({key: value for key, value in overrides.items() if value is not None})
    return build_gen_config(**fields)


# -- file format ---------------------------------------------------------------


def load_trace(path: str | Path) -> list[TraceRecord]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TraceFormatError(f"no se puede leer la traza {path}: {exc.strerror}") from exc

    numbered: list[tuple[int, TraceRecord]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = TraceRecord.model_validate(json.loads(line))
        except (json.JSONDecodeError, ValidationError) as exc:
            message = exc.msg if isinstance(exc, json.JSONDecodeError) else _first_error(exc)
            raise TraceFormatError(f"{path}:{lineno}: {message}") from exc
        numbered.append((lineno, record))

    numbered.sort(key=lambda item: item[1].ts)
    last_seen: dict[int, int] = {}
    for lineno, record in numbered:
        previous = last_seen.get(record.user)
        if previous is not None and record.ts <= previous:
            raise TraceFormatError(
                f"{path}:{lineno}: el usuario {record.user} repite la marca de tiempo {record.ts}"
            )
        last_seen[record.user] = record.ts
    return [record for _, record in numbered]


def _first_error(exc: ValidationError) -> str:
    error = exc.errors()[0]
    where = ".".join(str(part) for part in error["loc"])
    return f"{where}: {error['msg']}" if where else error["msg"]


def save_trace(path: str | Path, records: Iterable[TraceRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.model_dump_json(exclude_none=True))
            handle.write("\n")
    return path


def to_requests(records: Sequence[TraceRecord]) -> list[Request]:
    return [
        Request(
            timestamp=record.ts,
            user=record.user,
            delta_len=record.dn,
            num_candidates=record.nc,
            new_tokens=tuple(record.tokens) if record.tokens is not None else None,
            candidates=tuple(record.cands) if record.cands is not None else None,
            index=index,
        )
        for index, record in enumerate(records)
    ]


def batchify(records: Iterable[Any], batch_size: int) -> Iterator[list[Any]]:
    if batch_size < 1:
        raise ValueError(f"batch_size debe ser al menos 1; recibido {batch_size!r}")
    batch: list[Any] = []
    for record in records:
        batch.append(record)
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


# -- generator -----------------------------------------------------------------


def sample_interarrivals(gen: GenConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    """Same-user gaps in ms, never shorter than one session window.

    Gaps come from the heavy-tailed family (users returning soon). With
    probability ``revisit_prob`` a gap is instead a far return drawn around
    ``revisit_gap_ms`` with little spread, like a daily routine.
    """
    if gen.interarrival == "lognormal":
        raw = rng.lognormal(mean=np.log(gen.gap_scale_ms), sigma=gen.gap_shape, size=count)
    else:
        raw = gen.gap_scale_ms * (1.0 + rng.pareto(gen.gap_shape, size=count))
    if gen.revisit_prob > 0:
        far = rng.random(count) < gen.revisit_prob
        revisits = rng.lognormal(mean=np.log(gen.revisit_gap_ms), sigma=gen.revisit_shape, size=count)
        raw = np.where(far, revisits, raw)
    return np.maximum(gen.session_gap_ms, np.rint(raw)).astype(np.int64)


def _visit_counts(gen: GenConfig, rng: np.random.Generator) -> np.ndarray:
    users, total = gen.num_users, gen.total_requests
    if total >= users:
        spread = rng.multinomial(total - users, np.full(users, 1.0 / users))
        return spread + 1
    counts = np.zeros(users, dtype=np.int64)
    counts[rng.choice(users, size=total, replace=False)] = 1
    return counts


def _draw_deltas(gen: GenConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    if gen.delta_dist == "fixed":
        return np.full(count, int(round(gen.delta_mean)), dtype=np.int64)
    return rng.geometric(1.0 / gen.delta_mean, size=count).astype(np.int64)


def _user_deltas(gen: GenConfig, visits: int, target: int | None, rng: np.random.Generator) -> np.ndarray:
    if target is None:
        deltas = _draw_deltas(gen, visits, rng)
        capped = np.minimum(np.cumsum(deltas), gen.length_max)
        return np.diff(capped, prepend=0)
    rest = _draw_deltas(gen, visits - 1, rng)
    if rest.sum() > target - 1:
        rest = np.floor(rest * (target - 1) / rest.sum()).astype(np.int64)
    first = target - int(rest.sum())
    return np.concatenate([[first], rest]).astype(np.int64)


def generate_trace(gen: GenConfig) -> list[TraceRecord]:
    rng = np.random.default_rng(gen.seed)
    counts = _visit_counts(gen, rng)
    targets: list[int | None] = [None] * gen.num_users
    if gen.length_mean is not None:
        samples = rng.beta(gen.beta_a, gen.beta_b, size=gen.num_users)
        scaled = np.rint(gen.length_min + (gen.length_max - gen.length_min) * samples)
        targets = np.clip(scaled, gen.length_min, gen.length_max).astype(np.int64).tolist()

    rows: list[tuple[int, int, int, int]] = []
    for user in range(gen.num_users):
        visits = int(counts[user])
        if not visits:
            continue
        deltas = _user_deltas(gen, visits, targets[user], rng)
        start = int(rng.integers(0, gen.start_spread_ms + 1))
        gaps = sample_interarrivals(gen, visits - 1, rng)
        times = start + np.concatenate([[0], np.cumsum(gaps)])
        for visit in range(visits):
            rows.append((int(times[visit]), user, visit, int(deltas[visit])))
    rows.sort(key=lambda row: (row[0], row[1]))

    records = []
    for ts, user, _, delta in rows:
        tokens = cands = None
        if gen.with_tokens:
            tokens = rng.integers(0, gen.vocab_size, size=delta).tolist()
            cands = rng.integers(0, gen.vocab_size, size=gen.num_candidates).tolist()
        records.append(
            TraceRecord(ts=ts, user=user, dn=delta, nc=gen.num_candidates, tokens=tokens, cands=cands)
        )
    logger.info("generated %s requests for %s users", len(records), gen.num_users)
    return records


def final_lengths(records: Iterable[TraceRecord]) -> dict[int, int]:
    totals: dict[int, int] = {}
    for record in records:
        totals[record.user] = totals.get(record.user, 0) + record.dn
    return totals


def working_set_pages(records: Iterable[TraceRecord], page_size: int) -> int:
    """Device pages needed to keep every user's final history resident at once."""
    return sum(pages_needed(length, page_size) for length in final_lengths(records).values())
