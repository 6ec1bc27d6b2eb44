"""Trace-driven replay of the serving workflow over simulated time.

Every batch walks the ten workflow steps on the compute lane. Onload and
offload run on their own lanes (see ``pipeline``); the compute lane only sees
them through per-layer waits in Step 8 and the constant submit cost of Step 9.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import StrEnum

import numpy as np
from pydantic import ValidationError

from ..core import Request, tag_span
from ..schemas.experiment import ExperimentConfig
from ..schemas.report import STEP_LABELS, RunReport
from . import ref_model
from .cache_manager import BatchMetadata, BatchRejectedError, KVCacheManager, RequestPlan
from .kv_store import Backend, DevicePagedStore, HostChunkedStore
from .pipeline import Lane, LaneName, TransferPipeline

logger = logging.getLogger(__name__)

SWEEP_PARAMETERS = ("chunk_size", "device_pages", "batch_size")


class Mode(StrEnum):
    RECOMPUTE = "recompute"
    GPU_ONLY = "gpu_only"
    HIERARCHICAL = "hierarchical"


class SimulationError(RuntimeError):
    pass


class SweepError(ValueError):
    pass


@dataclass
class HitAccumulator:
    history_required: int = 0
    device_served: int = 0
    host_served: int = 0

    def add(self, required: int, device: int, host: int) -> None:
        self.history_required += required
        self.device_served += device
        self.host_served += host


def hit_ratios(acc: HitAccumulator) -> tuple[float, float]:
    if acc.history_required == 0:
        return 1.0, 1.0
    gpu = acc.device_served / acc.history_required
    total = (acc.device_served + acc.host_served) / acc.history_required
    return gpu, total


def _ms(seconds: float) -> float:
    return round(seconds * 1000.0, 6)


class TraceSimulator:
    def __init__(
        self,
        experiment: ExperimentConfig,
        mode: Mode | str,
        *,
        batch_size: int = 1,
        backend: Backend | str = Backend.NONE,
        record_events: bool = False,
        params: ref_model.ModelParams | None = None,
    ) -> None:
        if batch_size < 1:
            raise SimulationError(f"batch_size debe ser al menos 1; recibido {batch_size}")
        self.experiment = experiment
        self.config = experiment.kv
        self.cost = experiment.cost
        self.mode = Mode(mode)
        self.backend = Backend(backend)
        self.batch_size = batch_size

        self.manager: KVCacheManager | None = None
        self.pipeline: TransferPipeline | None = None
        if self.mode is Mode.RECOMPUTE:
            self.compute = Lane(LaneName.COMPUTE)
        else:
            store = DevicePagedStore(self.config, self.backend)
            host = (
                HostChunkedStore(self.config, self.backend)
                if self.mode is Mode.HIERARCHICAL
                else None
            )
            self.manager = KVCacheManager(self.config, store, host)
            self.pipeline = TransferPipeline(
                self.config, self.cost, self.manager, record_events=record_events
            )
            self.compute = self.pipeline.lanes[LaneName.COMPUTE]

        self.params = None
        if self.backend is Backend.VALUE:
            self.params = params or ref_model.init_params(self.config, experiment.model)
        self.logits: dict[int, np.ndarray] = {}
        self._histories: dict[int, list[int]] = {}
        self._totals: dict[int, int] = {}

        self.hits = HitAccumulator()
        self.step_totals = [0.0] * len(STEP_LABELS)
        self.wait_total = 0.0
        self.comp_total = 0.0
        self.num_batches = 0
        self.num_requests = 0
        self.tokens_processed = 0
        self.rejected_batches = 0
        self.uncached_requests = 0
        self.onload_overflow_tokens = 0

    # -- helpers ---------------------------------------------------------------

    def _check_tokens(self, request: Request) -> None:
        if self.backend is Backend.VALUE and not request.has_token_ids:
            raise SimulationError(
                f"la petición {request.index} no trae ids de tokens y el backend es value"
            )

    def _close_batch(self, start: float, steps: list[float], wait: float, comp: float) -> float:
        for index, value in enumerate(steps):
            self.step_totals[index] += value
        self.wait_total += wait
        self.comp_total += comp
        self.num_batches += 1
        end = start + sum(steps)
        self.compute.busy_until = end
        if self.pipeline is not None and self.pipeline.record_events:
            self.pipeline.events.append(
                {"time": start, "end": end, "lane": LaneName.COMPUTE, "task": "batch", "user": None, "layer": None}
            )
        return end

    def _step8_cost(self, fresh: Sequence[int], totals: Sequence[int]) -> float:
        # Jagged batch: attention adds up over requests; layer_overhead is paid once.
        attention = self.cost.attn_coeff * sum(f * t for f, t in zip(fresh, totals))
        return self.cost.layer_overhead + attention + self.cost.linear_coeff * sum(fresh)

    def _full_history(self, request: Request) -> list[int]:
        return self._histories.get(request.user, []) + list(request.new_tokens)

    # -- batch execution ---------------------------------------------------------

    def step(self, batch: Sequence[Request]) -> None:
        if not batch:
            return
        for request in batch:
            self._check_tokens(request)
        start = max(self.compute.busy_until, max(r.timestamp for r in batch) / 1000.0)
        if self.mode is Mode.RECOMPUTE:
            self._run_uncached(batch, start, charge_control=False)
            return
        self.pipeline.advance(start)
        try:
            metadata = self.manager.prepare_metadata(batch)
        except BatchRejectedError as exc:
            if len(batch) > 1:
                self.rejected_batches += 1
                logger.warning("batch of %s rejected (%s); splitting", len(batch), exc)
                for request in batch:
                    self.step([request])
                return
            start = max(start, self.pipeline.drain())
            try:
                metadata = self.manager.prepare_metadata(batch)
            except BatchRejectedError:
                logger.warning("request %s served without cache", batch[0].index)
                self._run_uncached(batch, start, charge_control=True)
                return
        self._run_cached(metadata, start)

    def _run_cached(self, metadata: BatchMetadata, start: float) -> None:
        cost = self.cost
        manager = self.manager
        plans = metadata.plans
        steps = [0.0] * len(STEP_LABELS)

        steps[0] = cost.prepare_overhead
        handle = self.pipeline.submit_onload(metadata.onload_plans, start + steps[0])

        fresh = [manager.strip_cached_tokens(plan).fresh_len for plan in plans]
        steps[1] = cost.strip_overhead
        steps[2] = cost.embed_overhead + cost.embed_coeff * sum(fresh)
        steps[3] = cost.layout_overhead + cost.layout_coeff * sum(fresh)
        steps[4] = cost.await_overhead
        manager.commit_onload(metadata.users)
        manager.update_metadata(metadata)
        steps[5] = cost.update_overhead + cost.commit_coeff * len(metadata.onload_plans)

        now = start + sum(steps[:6])
        layer_cost = self._step8_cost(fresh, [plan.sequence_len for plan in plans])
        wait = 0.0
        for layer in range(self.config.num_layers):
            stall = self.pipeline.await_layer(handle, layer, now)
            now += stall + layer_cost
            wait += stall
        comp = layer_cost * self.config.num_layers
        steps[6] = wait + comp

        for plan in plans:
            self._materialize(plan)
            self.hits.add(plan.prior_len, plan.device_served, plan.host_served)

        submitted = 0
        for user in metadata.users:
            submitted += len(self.pipeline.maybe_trigger_offload(user, now))
        steps[7] = cost.offload_submit if submitted else 0.0
        steps[8] = cost.postprocess_overhead

        self.tokens_processed += sum(fresh)
        self.num_requests += len(plans)
        self.onload_overflow_tokens += metadata.onload_overflow_tokens
        self._close_batch(start, steps, wait, comp)

    def _materialize(self, plan: RequestPlan) -> None:
        manager = self.manager
        request = plan.request
        layers = self.config.num_layers
        if self.backend is Backend.VALUE:
            # Stripped here: an earlier request of the same user in this batch
            # has already extended the history.
            reduced = manager.strip_cached_tokens(plan, self._histories.get(plan.user, []))
            cached = [
                ref_model.LayerKV.from_span(
                    manager.store.read(layer, manager.pages_of(plan.user), 0, plan.prefix_len)
                )
                for layer in range(layers)
            ]
            output = ref_model.forward_incremental(
                cached, reduced.fresh_tokens, request.candidates, self.params
            )
            self.logits[request.index] = output.logits
            for layer in range(layers):
                fresh_kv = output.new_kv[layer]
                manager.append_kv(plan, layer, fresh_kv.slice(0, plan.fresh_history).to_span())
                manager.write_scratch(plan, layer, fresh_kv.slice(plan.fresh_history).to_span())
            self._histories.setdefault(plan.user, []).extend(request.new_tokens)
        elif self.backend is Backend.TAG:
            for layer in range(layers):
                manager.append_kv(
                    plan, layer, tag_span(plan.user, plan.prefix_len, plan.fresh_history, layer)
                )
                manager.write_scratch(
                    plan,
                    layer,
                    tag_span(plan.user, plan.history_after, request.num_candidates, layer),
                )
        else:
            span = manager.store.layout.empty_span(plan.fresh_history)
            for layer in range(layers):
                manager.append_kv(plan, layer, span)
        manager.finish_append(plan)
        manager.release_scratch(plan)

    def _run_uncached(self, batch: Sequence[Request], start: float, *, charge_control: bool) -> None:
        cost = self.cost
        steps = [0.0] * len(STEP_LABELS)
        priors = []
        for request in batch:
            if self.manager is not None:
                prior = self.manager.record_uncached(request)
                self.uncached_requests += 1
            else:
                prior = self._totals.get(request.user, 0)
                self._totals[request.user] = prior + request.delta_len
            priors.append(prior)
        totals = [
            prior + r.delta_len + r.num_candidates for prior, r in zip(priors, batch)
        ]
        if charge_control:
            steps[0] = cost.prepare_overhead
            steps[1] = cost.strip_overhead
        steps[2] = cost.embed_overhead + cost.embed_coeff * sum(totals)
        steps[3] = cost.layout_overhead + cost.layout_coeff * sum(totals)
        comp = self._step8_cost(totals, totals) * self.config.num_layers
        steps[6] = comp
        steps[8] = cost.postprocess_overhead

        for request, prior in zip(batch, priors):
            if self.backend is Backend.VALUE:
                history = self._full_history(request)
                output = ref_model.forward_full(history, request.candidates, self.params)
                self.logits[request.index] = output.logits
                self._histories[request.user] = history
            self.hits.add(prior, 0, 0)
        self.tokens_processed += sum(totals)
        self.num_requests += len(batch)
        self._close_batch(start, steps, 0.0, comp)

    # -- results -------------------------------------------------------------

    def finish(self) -> RunReport:
        if self.pipeline is not None:
            self.pipeline.drain()
        batches = self.num_batches
        gpu, total = hit_ratios(self.hits)
        total_seconds = sum(self.step_totals)

        def average(value: float) -> float:
            return _ms(value / batches) if batches else 0.0

        manager = self.manager
        pipeline = self.pipeline
        return RunReport(
            mode=self.mode.value,
            backend=self.backend.value,
            batch_size=self.batch_size,
            num_requests=self.num_requests,
            num_batches=batches,
            steps_ms={label: average(value) for label, value in zip(STEP_LABELS, self.step_totals)},
            wait_ms=average(self.wait_total),
            comp_ms=average(self.comp_total),
            avg_latency_ms=average(total_seconds),
            total_ms=_ms(total_seconds),
            gpu_hit_ratio=round(gpu, 6),
            total_hit_ratio=round(total, 6),
            history_tokens=self.hits.history_required,
            device_served_tokens=self.hits.device_served,
            host_served_tokens=self.hits.host_served,
            tokens_processed=self.tokens_processed,
            evictions=len(manager.eviction_log) if manager else 0,
            tail_tokens_lost=manager.tail_tokens_lost if manager else 0,
            allocated_pages=manager.allocated_pages if manager else 0,
            peak_occupancy=manager.peak_occupancy if manager else 0,
            offload_tasks=pipeline.offload_tasks if pipeline else 0,
            offload_rejections=pipeline.offload_rejections if pipeline else 0,
            onloaded_chunks=pipeline.onloaded_chunks if pipeline else 0,
            rejected_batches=self.rejected_batches,
            uncached_requests=self.uncached_requests,
            onload_overflow_tokens=self.onload_overflow_tokens,
            chunk_size=self.config.chunk_size,
            device_pages=self.config.device_pages,
        )

    @property
    def events(self) -> list[dict]:
        return self.pipeline.events if self.pipeline is not None else []


def _batches(requests: Sequence[Request], batch_size: int) -> Iterable[Sequence[Request]]:
    for start in range(0, len(requests), batch_size):
        yield requests[start : start + batch_size]


def simulate(
    experiment: ExperimentConfig,
    requests: Sequence[Request],
    mode: Mode | str,
    *,
    batch_size: int = 1,
    backend: Backend | str = Backend.NONE,
    record_events: bool = False,
    params: ref_model.ModelParams | None = None,
) -> TraceSimulator:
    """Replay ``requests`` and return the finished simulator (logits, events, manager)."""
    simulator = TraceSimulator(
        experiment,
        mode,
        batch_size=batch_size,
        backend=backend,
        record_events=record_events,
        params=params,
    )
    for batch in _batches(requests, batch_size):
        simulator.step(batch)
    return simulator


def run_trace(
    experiment: ExperimentConfig,
    requests: Sequence[Request],
    mode: Mode | str,
    *,
    batch_size: int = 1,
    backend: Backend | str = Backend.NONE,
) -> RunReport:
    simulator = simulate(experiment, requests, mode, batch_size=batch_size, backend=backend)
    report = simulator.finish()
    logger.info(
        "%s: %s requests, %.3f ms/batch, hit ratios %.4f/%.4f",
        report.mode,
        report.num_requests,
        report.avg_latency_ms,
        report.gpu_hit_ratio,
        report.total_hit_ratio,
    )
    return report


def _speedup(baseline: RunReport, report: RunReport) -> float | None:
    if report.avg_latency_ms <= 0:
        return None
    return round(baseline.avg_latency_ms / report.avg_latency_ms, 4)


def compare_modes(
    experiment: ExperimentConfig,
    requests: Sequence[Request],
    *,
    batch_size: int = 1,
    backend: Backend | str = Backend.NONE,
) -> dict[Mode, RunReport]:
    reports = {
        mode: run_trace(experiment, requests, mode, batch_size=batch_size, backend=backend)
        for mode in Mode
    }
    return attach_speedups(reports)


def attach_speedups(reports: dict[Mode, RunReport]) -> dict[Mode, RunReport]:
    recompute = reports[Mode.RECOMPUTE]
    gpu_only = reports[Mode.GPU_ONLY]
    return {
        mode: report.model_copy(
            update={
                "speedup_vs_recompute": _speedup(recompute, report),
                "speedup_vs_gpu_only": _speedup(gpu_only, report),
            }
        )
        for mode, report in reports.items()
    }


def tokens_processed(
    requests: Sequence[Request],
    mode: Mode | str,
    experiment: ExperimentConfig | None = None,
    *,
    batch_size: int = 1,
) -> int:
    mode = Mode(mode)
    if mode is Mode.RECOMPUTE:
        totals: dict[int, int] = {}
        processed = 0
        for request in requests:
            prior = totals.get(request.user, 0)
            totals[request.user] = prior + request.delta_len
            processed += prior + request.delta_len + request.num_candidates
        return processed
    experiment = experiment or ExperimentConfig()
    return run_trace(experiment, requests, mode, batch_size=batch_size).tokens_processed


def sweep(
    parameter: str,
    values: Sequence[int],
    experiment: ExperimentConfig,
    requests: Sequence[Request],
    *,
    mode: Mode | str = Mode.HIERARCHICAL,
    batch_size: int = 1,
    backend: Backend | str = Backend.NONE,
) -> list[RunReport]:
    if parameter not in SWEEP_PARAMETERS:
        raise SweepError(
            f"parámetro de barrido desconocido {parameter!r}; "
            f"opciones: {', '.join(SWEEP_PARAMETERS)}"
        )
    if not values:
        raise SweepError("el barrido necesita al menos un valor")
    reports = []
    for value in values:
        run_batch = batch_size
        run_experiment = experiment
        if parameter == "batch_size":
            if value < 1:
                raise SweepError(f"batch_size inválido en el barrido: {value!r}")
            run_batch = value
        else:
            try:
                kv = experiment.kv.with_overrides(**{parameter: value})
            except ValidationError as exc:
                raise SweepError(f"valor inválido {value!r} para {parameter}: {exc}") from exc
            run_experiment = experiment.model_copy(update={"kv": kv})
        reports.append(
            run_trace(run_experiment, requests, mode, batch_size=run_batch, backend=backend)
        )
    return reports


__all__ = [
    "HitAccumulator",
    "Mode",
    "SimulationError",
    "SweepError",
    "TraceSimulator",
    "attach_speedups",
    "compare_modes",
    "hit_ratios",
    "run_trace",
    "simulate",
    "sweep",
    "tokens_processed",
]
