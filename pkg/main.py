from config import settings
from experiment import ExperimentOverrides, ReplicaFailed, apply_overrides, compare, run_experiment
from models import PathMetric, StackMode
from scenario import ScenarioError, load_scenario
from sim.replica import ConfigError
from pathlib import Path
from pydantic import ValidationError
import click
import logging

# Configuración de logging
logging.basicConfig(
    level=settings.LOG_LEVEL,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


def _load(path: str):
    try:
        return load_scenario(path)
    except ScenarioError as e:
        raise click.ClickException(f"Escenario inválido: {e}")


@click.group()
def cli():
    """Simulador SD-6LoWPAN: subcapa SDN mesh-under frente a RPL route-over."""


@cli.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Archivo de escenario (clave = valor).")
@click.option("--mode", type=click.Choice([m.value for m in StackMode]), required=True, help="Pila a simular: sdn o rpl.")
@click.option("--replicas", type=int, default=None, help="Cantidad de réplicas (por defecto, la del escenario).")
@click.option("--duration", type=float, default=None, help="Duración de cada réplica en segundos.")
@click.option("--warmup", type=float, default=None, help="Ventana de warmup en segundos.")
@click.option("--seed", type=int, default=None, help="Semilla base; la réplica i usa semilla + i.")
@click.option("--jobs", type=int, default=settings.JOBS, show_default=True, help="Réplicas en paralelo (procesos).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Directorio de resultados (por defecto OUT_DIR/<escenario>_<modo>).")
@click.option("--update-period", type=float, default=None, help="Período del Topology Update en segundos.")
@click.option("--flow-table-capacity", type=int, default=None, help="Capacidad de la Flow Table.")
@click.option("--routing-capacity", type=int, default=None, help="Capacidad de la tabla de rutas RPL.")
@click.option("--metric", type=click.Choice([m.value for m in PathMetric]), default=None, help="Métrica de caminos del controlador.")
@click.option("--lossy", is_flag=True, help="Canal con pérdidas (p_tx = p_rx = 0.9).")
@click.option("--profile", type=click.Choice(["testbed"]), default=None, help="Perfil del despliegue físico: capacidades 20, período 600 s, ETX.")
@click.option("--dump-graph", is_flag=True, help="Guarda el grafo del controlador al final de cada réplica (sólo sdn).")
def run(scenario_path, mode, replicas, duration, warmup, seed, jobs, out_dir, update_period,
        flow_table_capacity, routing_capacity, metric, lossy, profile, dump_graph):
    """Corre las réplicas de un escenario en un modo y escribe CSV + resumen."""
    scenario = _load(scenario_path)
    try:
        overrides = ExperimentOverrides(
            replicas=replicas, duration_s=duration, warmup_s=warmup, seed=seed,
            update_period_s=update_period, flow_table_capacity=flow_table_capacity,
            routing_capacity=routing_capacity, metric=metric, lossy=lossy, profile=profile,
        )
        scenario = apply_overrides(scenario, overrides)
    except ValidationError as e:
        raise click.ClickException(f"Parámetros inválidos: {e.errors()[0]['msg']}")
    if jobs < 1:
        raise click.ClickException("--jobs debe ser >= 1")

    out = Path(out_dir) if out_dir else Path(settings.OUT_DIR) / f"{scenario.name}_{mode}"
    try:
        report = run_experiment(scenario, StackMode(mode), jobs=jobs, out_dir=out, dump_graph=dump_graph)
    except (ConfigError, ReplicaFailed) as e:
        logger.error(f"❌ {e}")
        raise click.ClickException(str(e))

    s = report.summary
    click.echo(f"{report.label}: {s.replicas} réplicas")
    click.echo(f"  control (steady): {s.control_bytes_mean:.1f} ± {s.control_bytes_std:.1f} bytes, {s.control_count_mean:.1f} tramas")
    if s.rtt_mean_ms is not None:
        click.echo(f"  RTT medio: {s.rtt_mean_ms:.2f} ms [{s.rtt_ci_low_ms:.2f}, {s.rtt_ci_high_ms:.2f}] ({s.rtt_samples} muestras)")
    else:
        click.echo("  RTT medio: sin muestras en la ventana steady")
    click.echo(f"  resultados en {out}")


@cli.command("compare")
@click.argument("a", type=click.Path(exists=True))
@click.argument("b", type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Directorio para la tabla comparativa y los ECDF.")
def compare_cmd(a, b, out_dir):
    """Compara dos resultados (directorios o summary.json) lado a lado."""
    try:
        rows = compare(a, b, out_dir)
    except (OSError, ValidationError) as e:
        raise click.ClickException(f"No se pudo leer un resumen: {e}")
    for name, va, vb in rows:
        click.echo(f"{name:28} {va!s:>24} {vb!s:>24}")


@cli.command()
@click.option("--scenario", "scenario_path", required=True, type=click.Path(exists=True, dir_okay=False), help="Archivo de escenario a validar.")
def validate(scenario_path):
    """Valida un escenario sin simularlo."""
    scenario = _load(scenario_path)
    senders = sum(1 for n in scenario.nodes if n.role.value == "sender")
    click.echo(
        f"✅ {scenario.name}: {len(scenario.nodes)} nodos, border router {scenario.border_router.id}, "
        f"{senders} senders"
    )


# Punto de entrada
if __name__ == "__main__":
    logger.debug(f"🌍 Ambiente: {settings.ENV}")
    cli()
