"""Costo de procesamiento por salto: mesh-under frente a route-over."""
from models import CostModel, StackMode


def hop_cost(mode: StackMode, fragments: int, costs: CostModel) -> int:
    """
    Demora en µs que un nodo intermedio agrega antes de reenviar.
    SDN: por trama, independiente de las demás. RPL: una vez por datagrama,
    tras el reensamblado completo.
    """
    if mode is StackMode.SDN:
        return costs.t_proc_mesh_us
    return costs.t_proc_routeover_base_us + costs.t_proc_routeover_per_frag_us * fragments
