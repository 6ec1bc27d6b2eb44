from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..project_meta import get_app_meta
from . import config
from .schemas.experiment import ExperimentConfig
from .schemas.kv_config import KVConfig
from .services import reporting
from .services.cache_manager import CacheManagerError
from .services.footprint import FootprintError, footprint_lines, memory_footprint
from .services.kv_store import Backend, StoreError
from .services.pipeline import PipelineError
from .services.ref_model import ModelInputError
from .services.reporting import ReportFormatError
from .services.simulator import (
    SWEEP_PARAMETERS,
    Mode,
    SimulationError,
    SweepError,
    attach_speedups,
    simulate,
    sweep,
)
from .services.verify import run_oracle_suite
from .services.workload import (
    GeneratorConfigError,
    TraceFormatError,
    final_lengths,
    generate_trace,
    load_trace,
    preset_config,
    save_trace,
    to_requests,
    working_set_pages,
)
from .settings_file import ConfigError, load_experiment_config

logger = logging.getLogger(__name__)

# Most specific classes first.
_FAILURE_LABELS: tuple[tuple[type[Exception], str], ...] = (
    (ConfigError, "configuración inválida"),
    (TraceFormatError, "traza inválida"),
    (GeneratorConfigError, "generador inválido"),
    (ReportFormatError, "informe inválido"),
    (SweepError, "barrido inválido"),
    (FootprintError, "dimensiones inválidas"),
    (ModelInputError, "entrada del modelo inválida"),
    (CacheManagerError, "lote inviable"),
    (StoreError, "error de almacenamiento"),
    (PipelineError, "error del pipeline"),
    (SimulationError, "simulación inválida"),
)

_VERIFY_E2E_REQUESTS = 200


def _print_json(data: dict) -> None:
    print(json.dumps(data, indent=2, ensure_ascii=False))


def _parse_values(raw: str) -> list[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise SweepError(f"--values debe ser una lista de enteros separada por comas: {raw!r}") from exc


def _load_requests(args: argparse.Namespace, experiment: ExperimentConfig):
    if args.trace:
        records = load_trace(args.trace)
    else:
        gen = preset_config(
            args.preset,
            seed=args.seed,
            vocab_size=experiment.model.vocab_size,
            with_tokens=args.backend == Backend.VALUE,
        )
        records = generate_trace(gen)
    return to_requests(records)


def _add_trace_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="Fichero clave=valor del experimento")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--trace", default=None, help="Traza JSONL")
    source.add_argument("--preset", default=None, help="Preset sintético (kuairand1k, mt)")
    parser.add_argument("--batch", type=int, default=1, help="Tamaño de lote")
    parser.add_argument(
        "--backend",
        choices=[backend.value for backend in Backend],
        default=Backend.NONE.value,
        help="Contenido de las páginas: value (KV real), tag (etiquetas) o none",
    )
    parser.add_argument(
        "--seed", type=int, default=config.DEFAULT_SEED, help="Semilla del preset sintético"
    )


def build_parser() -> argparse.ArgumentParser:
    meta = get_app_meta()
    parser = argparse.ArgumentParser(
        prog="kvsim",
        description="Simulador de caché KV jerárquica para recomendación generativa",
    )
    parser.add_argument(
        "--version", action="version", version=f"{meta.project_name} {meta.display_version}"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser("run", help="Reproduce una traza en uno o todos los modos")
    _add_trace_flags(run_parser)
    run_parser.add_argument(
        "--mode",
        choices=[*(mode.value for mode in Mode), "all"],
        default=Mode.HIERARCHICAL.value,
        help="recompute, gpu_only, hierarchical o all",
    )
    run_parser.add_argument(
        "--out", default=None, help="Ruta base de los informes (.json y .csv)"
    )
    run_parser.add_argument("--events", default=None, help="Escribe la traza de eventos JSONL")
    run_parser.add_argument(
        "--dump-pages", default=None, help="Escribe los mapas de páginas por usuario en JSON"
    )

    sweep_parser = subparsers.add_parser("sweep", help="Barre un parámetro y emite un CSV")
    _add_trace_flags(sweep_parser)
    sweep_parser.add_argument("--param", required=True, choices=SWEEP_PARAMETERS)
    sweep_parser.add_argument("--values", required=True, help="Valores separados por comas")
    sweep_parser.add_argument(
        "--mode", choices=[mode.value for mode in Mode], default=Mode.HIERARCHICAL.value
    )
    sweep_parser.add_argument("--out", default=None, help="Ruta del CSV resultante")

    verify_parser = subparsers.add_parser(
        "verify", help="Compara inferencia incremental con recomputación completa"
    )
    verify_parser.add_argument("--trials", type=int, default=config.VERIFY_TRIALS)
    verify_parser.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    verify_parser.add_argument("--tolerance", type=float, default=config.VERIFY_TOLERANCE)

    footprint_parser = subparsers.add_parser("footprint", help="Calcula la huella de memoria")
    footprint_parser.add_argument("--config", default=None)
    footprint_parser.add_argument("--batch", type=int, default=8)
    footprint_parser.add_argument("--maxseq", type=int, default=40008)
    footprint_parser.add_argument("--onload-pages", type=int, default=None)
    footprint_parser.add_argument("--residual-mib", type=int, default=2187)
    footprint_parser.add_argument("--json", action="store_true", help="Salida en JSON")

    gen_parser = subparsers.add_parser("gen-trace", help="Genera una traza sintética")
    gen_parser.add_argument("--preset", required=True)
    gen_parser.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    gen_parser.add_argument("--users", type=int, default=None)
    gen_parser.add_argument("--requests", type=int, default=None)
    gen_parser.add_argument("--with-tokens", action="store_true")
    gen_parser.add_argument("--out", required=True, help="Fichero JSONL de salida")

    report_parser = subparsers.add_parser("report", help="Muestra un informe como tabla")
    report_parser.add_argument("--input", required=True, help="Informe JSON o CSV")
    return parser


def _run(args: argparse.Namespace) -> int:
    experiment = load_experiment_config(args.config)
    requests = _load_requests(args, experiment)
    modes = list(Mode) if args.mode == "all" else [Mode(args.mode)]
    simulators = {
        mode: simulate(
            experiment,
            requests,
            mode,
            batch_size=args.batch,
            backend=args.backend,
            record_events=bool(args.events),
        )
        for mode in modes
    }
    reports = {mode: simulator.finish() for mode, simulator in simulators.items()}
    if args.mode == "all":
        reports = attach_speedups(reports)

    out = Path(args.out) if args.out else config.OUTPUT_DIR / f"run-{args.mode}"
    json_path, csv_path = reporting.write_outputs(out, list(reports.values()))
    outputs = {"json": str(json_path), "csv": str(csv_path)}
    if args.events:
        events_path = Path(args.events)
        events_path.parent.mkdir(parents=True, exist_ok=True)
        with events_path.open("w", encoding="utf-8") as handle:
            for mode, simulator in simulators.items():
                for event in simulator.events:
                    handle.write(json.dumps({"mode": mode.value, **event}, ensure_ascii=False) + "\n")
        outputs["events"] = str(events_path)
    if args.dump_pages:
        pages_path = Path(args.dump_pages)
        pages_path.parent.mkdir(parents=True, exist_ok=True)
        tables = {
            mode.value: simulator.manager.page_table()
            for mode, simulator in simulators.items()
            if simulator.manager is not None
        }
        pages_path.write_text(json.dumps(tables, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        outputs["pages"] = str(pages_path)
    _print_json({"ok": True, "outputs": outputs, **reporting.report_payload(list(reports.values()))})
    return 0


def _sweep(args: argparse.Namespace) -> int:
    experiment = load_experiment_config(args.config)
    values = _parse_values(args.values)
    requests = _load_requests(args, experiment)
    reports = sweep(
        args.param,
        values,
        experiment,
        requests,
        mode=args.mode,
        batch_size=args.batch,
        backend=args.backend,
    )
    labels = [f"{args.param}={value}" for value in values]
    text = reporting.reports_to_csv(reports, labels)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def _verify(args: argparse.Namespace) -> int:
    if args.trials < 0:
        raise SimulationError(f"--trials no puede ser negativo: {args.trials}")
    result = run_oracle_suite(
        args.trials,
        args.seed,
        tolerance=args.tolerance,
        end_to_end_requests=_VERIFY_E2E_REQUESTS if args.trials else 0,
        inject_fault=config.VERIFY_INJECT_FAULT,
    )
    if result.vacuous:
        print("kvsim: verify: aviso: 0 pruebas, la verificación es vacía", file=sys.stderr)
    _print_json(result.to_dict())
    print(
        f"max |Δlogit| = {max(result.max_deviation, result.end_to_end_deviation):.3e} "
        f"{'≤' if result.passed else '>'} {result.tolerance:g}"
    )
    return 0 if result.passed else 1


def _footprint(args: argparse.Namespace) -> int:
    experiment = load_experiment_config(args.config)
    breakdown = memory_footprint(
        experiment.kv,
        args.batch,
        args.maxseq,
        onload_pages=args.onload_pages,
        residual_mib=args.residual_mib,
    )
    if args.json:
        _print_json(breakdown.model_dump())
        return 0
    rows = footprint_lines(breakdown)
    width = max(len(label) for label, _ in rows)
    for label, value in rows:
        print(f"{label.ljust(width)}  {value}")
    return 0


def _gen_trace(args: argparse.Namespace) -> int:
    gen = preset_config(
        args.preset,
        seed=args.seed,
        num_users=args.users,
        total_requests=args.requests,
        with_tokens=True if args.with_tokens else None,
    )
    records = generate_trace(gen)
    path = save_trace(args.out, records)
    lengths = final_lengths(records)
    _print_json(
        {
            "ok": True,
            "path": str(path),
            "requests": len(records),
            "users": len(lengths),
            "mean_final_length": round(sum(lengths.values()) / len(lengths), 3) if lengths else 0,
            "working_set_pages": working_set_pages(records, KVConfig().page_size),
        }
    )
    return 0


def _report(args: argparse.Namespace) -> int:
    print(reporting.render_table(reporting.load_columns(args.input)))
    return 0


_COMMANDS = {
    "run": _run,
    "sweep": _sweep,
    "verify": _verify,
    "footprint": _footprint,
    "gen-trace": _gen_trace,
    "report": _report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config.configure_logging()
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        for failure, label in _FAILURE_LABELS:
            if isinstance(exc, failure):
                print(f"kvsim: {args.command}: {label}: {exc}", file=sys.stderr)
                return 2
        raise


if __name__ == "__main__":
    raise SystemExit(main())
