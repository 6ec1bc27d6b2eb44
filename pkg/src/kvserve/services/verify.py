"""Oracle suite: cached-incremental inference must match full recompute."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..core import Request
from ..schemas.experiment import ExperimentConfig
from ..schemas.kv_config import KVConfig, ModelConfig
from . import ref_model
from .kv_store import Backend
from .simulator import Mode, TraceSimulator, simulate
from .workload import build_gen_config, generate_trace, to_requests

logger = logging.getLogger(__name__)

ORACLE_KV = KVConfig(
    num_layers=2, num_heads=2, head_dim=8, page_size=4, chunk_size=16,
    device_pages=64, onload_pages=256, offload_quota=64,
)
ORACLE_MODEL = ModelConfig(vocab_size=64)
MAX_HISTORY = 256
FAULT_OFFSET = 1e-2


@dataclass(frozen=True)
class OracleResult:
    trials: int
    max_deviation: float
    end_to_end_deviation: float
    end_to_end_requests: int
    tolerance: float

    @property
    def vacuous(self) -> bool:
        return self.trials == 0 and self.end_to_end_requests == 0

    @property
    def passed(self) -> bool:
        return max(self.max_deviation, self.end_to_end_deviation) <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "max_abs_logit_deviation": self.max_deviation,
            "end_to_end_requests": self.end_to_end_requests,
            "end_to_end_max_deviation": self.end_to_end_deviation,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def _perturb(cached: tuple[ref_model.LayerKV, ...]) -> tuple[ref_model.LayerKV, ...]:
    first = cached[0]
    return (ref_model.LayerKV(first.keys + FAULT_OFFSET, first.values), *cached[1:])


def split_point_trials(
    trials: int, seed: int, *, inject_fault: bool = False
) -> float:
    """Max |logit| deviation of incremental vs full over random split points."""
    params = ref_model.init_params(ORACLE_KV, ORACLE_MODEL.model_copy(update={"model_seed": seed}))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        length = int(rng.integers(2, MAX_HISTORY + 1))
        split = int(rng.integers(1, length))
        history = rng.integers(0, ORACLE_MODEL.vocab_size, size=length).tolist()
        candidates = rng.integers(0, ORACLE_MODEL.vocab_size, size=int(rng.integers(1, 9))).tolist()
        cached = ref_model.prefill_kv(history[:split], params)
        if inject_fault:
            cached = _perturb(cached)
        incremental = ref_model.forward_incremental(cached, history[split:], candidates, params)
        full = ref_model.forward_full(history, candidates, params)
        worst = max(worst, float(np.max(np.abs(incremental.logits - full.logits))))
    return worst


def toy_value_trace(requests_count: int, seed: int) -> list[Request]:
    """Token-carrying trace small enough for the reference model, big enough to evict."""
    gen = build_gen_config(
        num_users=12,
        total_requests=requests_count,
        seed=seed,
        length_min=8,
        length_max=120,
        length_mean=60.0,
        beta_a=2.0,
        delta_mean=6.0,
        num_candidates=3,
        vocab_size=ORACLE_MODEL.vocab_size,
        with_tokens=True,
    )
    return to_requests(generate_trace(gen))


def replay_modes(requests: Sequence[Request], *, batch_size: int = 4) -> dict[Mode, TraceSimulator]:
    experiment = ExperimentConfig(kv=ORACLE_KV, model=ORACLE_MODEL)
    params = ref_model.init_params(ORACLE_KV, ORACLE_MODEL)
    return {
        mode: simulate(
            experiment, requests, mode, batch_size=batch_size, backend=Backend.VALUE, params=params
        )
        for mode in Mode
    }


def logit_gap(runs: dict[Mode, TraceSimulator]) -> float:
    baseline = runs[Mode.RECOMPUTE].logits
    worst = 0.0
    for mode in (Mode.GPU_ONLY, Mode.HIERARCHICAL):
        for index, logits in runs[mode].logits.items():
            worst = max(worst, float(np.max(np.abs(logits - baseline[index]))))
    return worst


def end_to_end_deviation(requests_count: int, seed: int, *, batch_size: int = 4) -> float:
    """Replay a value-backend toy trace in every mode; max logit gap to recompute."""
    if requests_count == 0:
        return 0.0
    return logit_gap(replay_modes(toy_value_trace(requests_count, seed), batch_size=batch_size))


def run_oracle_suite(
    trials: int,
    seed: int,
    *,
    tolerance: float,
    end_to_end_requests: int = 200,
    inject_fault: bool = False,
) -> OracleResult:
    if trials == 0:
        logger.warning("oracle suite run with 0 trials: the split-point check is vacuous")
    result = OracleResult(
        trials=trials,
        max_deviation=split_point_trials(trials, seed, inject_fault=inject_fault),
        end_to_end_deviation=end_to_end_deviation(end_to_end_requests, seed),
        end_to_end_requests=end_to_end_requests,
        tolerance=tolerance,
    )
    logger.info("oracle suite: %s", result.to_dict())
    return result
