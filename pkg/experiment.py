"""
Orquestación de experimentos: corre las réplicas de un modo (en paralelo si
se pide), escribe los CSV por réplica y el resumen con los agregados.
"""
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy import stats

from models import PathMetric, Scenario, StackMode, Window
from sim.metrics import CONTROL_HEADER, DIAGNOSTICS_HEADER, RTT_HEADER, Metrics, write_csv
from sim.replica import run_replica

logger = logging.getLogger(__name__)

REPLICAS_HEADER = [
    "replica", "seed", "mode", "control_bytes", "control_count", "dao_datagrams",
    "table_miss_steady", "last_miss_s", "rtt_samples", "rtt_mean_ms", "echo_sent", "frames_tx",
]
ECDF_HEADER = ["rtt_ms", "ecdf"]
COMPARISON_HEADER = ["metric"]


class ReplicaFailed(Exception):
    def __init__(self, index: int, cause: str):
        super().__init__(index, cause)
        self.index = index
        self.cause = cause

    def __str__(self) -> str:
        return f"la réplica {self.index} falló: {self.cause}"


# --- Overrides de la línea de comandos ---
class ExperimentOverrides(BaseModel):
    replicas: Optional[int] = Field(None, ge=1)
    duration_s: Optional[float] = Field(None, gt=0)
    warmup_s: Optional[float] = Field(None, ge=0)
    seed: Optional[int] = Field(None, ge=0)
    update_period_s: Optional[float] = Field(None, gt=0)
    flow_table_capacity: Optional[int] = Field(None, ge=1)
    routing_capacity: Optional[int] = Field(None, ge=1)
    metric: Optional[PathMetric] = None
    lossy: bool = False
    profile: Optional[Literal["testbed"]] = None


def apply_overrides(scenario: Scenario, ov: ExperimentOverrides) -> Scenario:
    """Aplica los overrides sobre una copia del escenario y la vuelve a validar."""
    run = scenario.run.model_dump()
    sdn = scenario.sdn.model_dump()
    rpl = scenario.rpl.model_dump()
    channel = scenario.channel.model_dump()

    if ov.profile == "testbed":
        sdn.update(flow_table_capacity=20, update_period_s=600.0, path_metric=PathMetric.ETX)
        rpl.update(routing_capacity=20)
    if ov.lossy:
        channel.update(p_tx_success=0.9, p_rx_success=0.9)

    if ov.replicas is not None:
        run["replicas"] = ov.replicas
    if ov.seed is not None:
        run["base_seed"] = ov.seed
    if ov.duration_s is not None:
        run["duration_s"] = ov.duration_s
        # Corridas cortas: si no se indicó warmup y no cabe, se usa un cuarto de la duración
        if ov.warmup_s is None and run["warmup_s"] >= ov.duration_s:
            run["warmup_s"] = ov.duration_s / 4
    if ov.warmup_s is not None:
        run["warmup_s"] = ov.warmup_s
    if ov.update_period_s is not None:
        sdn["update_period_s"] = ov.update_period_s
    if ov.flow_table_capacity is not None:
        sdn["flow_table_capacity"] = ov.flow_table_capacity
    if ov.routing_capacity is not None:
        rpl["routing_capacity"] = ov.routing_capacity
    if ov.metric is not None:
        sdn["path_metric"] = ov.metric

    return Scenario.model_validate({**scenario.model_dump(), "run": run, "sdn": sdn, "rpl": rpl, "channel": channel})


# --- Modelos del reporte ---
class ReplicaRow(BaseModel):
    replica: int
    seed: int
    mode: StackMode
    control_bytes: int
    control_count: int
    dao_datagrams: int
    table_miss_steady: int
    last_miss_s: Optional[float] = None
    rtt_samples: int
    rtt_mean_ms: Optional[float] = None
    echo_sent: int
    frames_tx: int

    def as_row(self) -> list:
        return [getattr(self, name) if name != "mode" else self.mode.value for name in REPLICAS_HEADER]


class ModeSummary(BaseModel):
    mode: StackMode
    replicas: int
    control_bytes_mean: float
    control_bytes_std: float
    control_count_mean: float
    control_count_std: float
    rtt_mean_ms: Optional[float] = None
    rtt_ci_low_ms: Optional[float] = None
    rtt_ci_high_ms: Optional[float] = None
    rtt_samples: int = 0
    convergence_mean_s: Optional[float] = None
    dao_total: int = 0
    table_miss_steady_total: int = 0


class ExperimentReport(BaseModel):
    scenario: str
    mode: StackMode
    summary: ModeSummary
    replicas: List[ReplicaRow]
    ecdf: List[tuple[float, float]] = []

    @property
    def label(self) -> str:
        return f"{self.scenario}_{self.mode.value}"


# --- Estadística ---
def mean_ci(values: list[float], confidence: float = 0.95) -> tuple[float, float, float]:
    """Media e intervalo de confianza con la t de Student."""
    data = np.asarray(values, dtype=float)
    mean = float(data.mean())
    if len(data) < 2:
        return mean, mean, mean
    sem = float(data.std(ddof=1)) / math.sqrt(len(data))
    half = float(stats.t.ppf((1 + confidence) / 2, len(data) - 1)) * sem
    return mean, mean - half, mean + half


def ecdf(values: list[float]) -> list[tuple[float, float]]:
    data = np.sort(np.asarray(values, dtype=float))
    if data.size == 0:
        return []
    probs = np.arange(1, data.size + 1) / data.size
    return [(float(x), float(p)) for x, p in zip(data, probs)]


def replica_row(m: Metrics) -> ReplicaRow:
    steady = m.steady_rtt()
    rtts = [s.rtt_us / 1000 for s in steady]
    return ReplicaRow(
        replica=m.replica,
        seed=m.seed,
        mode=m.mode,
        control_bytes=m.steady_control_bytes(),
        control_count=m.steady_control_count(),
        dao_datagrams=m.dao_datagrams,
        table_miss_steady=m.table_miss_requests[Window.STEADY],
        last_miss_s=m.last_miss_us / 1_000_000 if m.last_miss_us is not None else None,
        rtt_samples=len(rtts),
        rtt_mean_ms=float(np.mean(rtts)) if rtts else None,
        echo_sent=m.echo_sent,
        frames_tx=m.frames_tx,
    )


def summarize(scenario_name: str, mode: StackMode, results: list[Metrics]) -> ExperimentReport:
    rows = [replica_row(m) for m in results]
    control_bytes = np.array([r.control_bytes for r in rows], dtype=float)
    control_count = np.array([r.control_count for r in rows], dtype=float)
    ddof = 1 if len(rows) > 1 else 0

    per_replica_rtt = [r.rtt_mean_ms for r in rows if r.rtt_mean_ms is not None]
    rtt_mean = rtt_low = rtt_high = None
    if per_replica_rtt:
        rtt_mean, rtt_low, rtt_high = mean_ci(per_replica_rtt)
    misses = [r.last_miss_s for r in rows if r.last_miss_s is not None]

    all_rtt = [s.rtt_us / 1000 for m in results for s in m.steady_rtt()]
    summary = ModeSummary(
        mode=mode,
        replicas=len(rows),
        control_bytes_mean=float(control_bytes.mean()),
        control_bytes_std=float(control_bytes.std(ddof=ddof)),
        control_count_mean=float(control_count.mean()),
        control_count_std=float(control_count.std(ddof=ddof)),
        rtt_mean_ms=rtt_mean,
        rtt_ci_low_ms=rtt_low,
        rtt_ci_high_ms=rtt_high,
        rtt_samples=len(all_rtt),
        convergence_mean_s=float(np.mean(misses)) if misses else None,
        dao_total=sum(r.dao_datagrams for r in rows),
        table_miss_steady_total=sum(r.table_miss_steady for r in rows),
    )
    return ExperimentReport(scenario=scenario_name, mode=mode, summary=summary, replicas=rows, ecdf=ecdf(all_rtt))


# --- Ejecución ---
def _run_one(args) -> Metrics:
    scenario, mode, index, dump_graph = args
    try:
        return run_replica(scenario, mode, index, dump_graph=dump_graph)
    except Exception as exc:
        raise ReplicaFailed(index, f"{type(exc).__name__}: {exc}") from exc


def run_replicas(scenario: Scenario, mode: StackMode, jobs: int = 1, dump_graph: bool = False) -> list[Metrics]:
    tasks = [(scenario, mode, i, dump_graph) for i in range(scenario.run.replicas)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(t) for t in tasks]


def write_outputs(report: ExperimentReport, results: list[Metrics], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "control.csv", CONTROL_HEADER, (row for m in results for row in m.control_rows()))
    write_csv(out_dir / "rtt.csv", RTT_HEADER, (row for m in results for row in m.rtt_rows()))
    write_csv(out_dir / "diagnostics.csv", DIAGNOSTICS_HEADER, (row for m in results for row in m.diagnostic_rows()))
    write_csv(out_dir / "replicas.csv", REPLICAS_HEADER, (r.as_row() for r in report.replicas))
    write_csv(out_dir / "ecdf.csv", ECDF_HEADER, ([x, p] for x, p in report.ecdf))
    (out_dir / "summary.json").write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    for m in results:
        if m.graph_snapshot is not None:
            path = out_dir / f"graph_{m.replica}.json"
            path.write_text(json.dumps(m.graph_snapshot, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def run_experiment(
    scenario: Scenario,
    mode: StackMode,
    jobs: int = 1,
    out_dir: Optional[Union[str, Path]] = None,
    dump_graph: bool = False,
) -> ExperimentReport:
    mode = StackMode(mode)
    logger.info(f"🚀 Experimento '{scenario.name}' en modo {mode.value}: {scenario.run.replicas} réplicas, {jobs} procesos.")
    results = run_replicas(scenario, mode, jobs, dump_graph)
    report = summarize(scenario.name, mode, results)
    if out_dir is not None:
        write_outputs(report, results, Path(out_dir))
        logger.info(f"✅ Resultados escritos en {out_dir}")
    return report


# --- Comparación ---
def load_report(path: Union[str, Path]) -> ExperimentReport:
    path = Path(path)
    summary = path / "summary.json" if path.is_dir() else path
    return ExperimentReport.model_validate_json(summary.read_text(encoding="utf-8"))


def comparison_rows(a: ExperimentReport, b: ExperimentReport) -> list[list]:
    fields = [
        "replicas", "control_bytes_mean", "control_bytes_std", "control_count_mean", "control_count_std",
        "rtt_mean_ms", "rtt_ci_low_ms", "rtt_ci_high_ms", "rtt_samples", "convergence_mean_s",
        "dao_total", "table_miss_steady_total",
    ]
    return [[name, getattr(a.summary, name), getattr(b.summary, name)] for name in fields]


def compare(a_path: Union[str, Path], b_path: Union[str, Path], out_dir: Union[str, Path]) -> list[list]:
    """Tabla lado a lado de dos resúmenes y los puntos ECDF de cada uno."""
    a, b = load_report(a_path), load_report(b_path)
    label_a, label_b = a.label, b.label
    if label_a == label_b:
        label_a, label_b = f"{label_a}_a", f"{label_b}_b"
    out = Path(out_dir)
    rows = comparison_rows(a, b)
    write_csv(out / "comparison.csv", COMPARISON_HEADER + [label_a, label_b], rows)
    write_csv(out / f"ecdf_{label_a}.csv", ECDF_HEADER, ([x, p] for x, p in a.ecdf))
    write_csv(out / f"ecdf_{label_b}.csv", ECDF_HEADER, ([x, p] for x, p in b.ecdf))
    logger.info(f"📊 Comparación {label_a} vs {label_b} escrita en {out}")
    return rows
