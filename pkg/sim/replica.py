"""Una réplica: arma la red de un escenario, la simula y devuelve sus métricas."""
import logging
import random
from typing import Optional

from controller import Controller
from coap import SbiMessage
from lowpan import CONTROLLER_ADDR, SERVER_ADDR, Datagram
from models import ControlCategory, NodeRole, Scenario, StackMode
from node import Node
from sim.channel import ExternalLink, UdgmChannel
from sim.kernel import Scheduler, seconds
from sim.metrics import Metrics
from sim.traffic import EchoApp, EchoServer

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Escenario que no se puede simular."""


class Replica:
    def __init__(self, scenario: Scenario, mode: StackMode, index: int = 0, seed: Optional[int] = None):
        if not scenario.nodes:
            raise ConfigError("el escenario no tiene nodos")
        routers = [n for n in scenario.nodes if n.role is NodeRole.BORDER_ROUTER]
        if len(routers) != 1:
            raise ConfigError(f"se requiere exactamente un border router, hay {len(routers)}")

        self.scenario = scenario
        self.mode = StackMode(mode)
        self.index = index
        self.seed = scenario.run.base_seed + index if seed is None else seed
        self.rng = random.Random(self.seed)
        self.scheduler = Scheduler()
        self.metrics = Metrics(index, self.seed, self.mode, seconds(scenario.run.warmup_s))

        positions = {n.id: (n.x_m, n.y_m) for n in scenario.nodes}
        self.channel = UdgmChannel(
            self.scheduler, positions, scenario.channel, self.rng, scenario.costs.bitrate_bps, self.metrics
        )
        self.uplink = ExternalLink(self.scheduler, int(round(scenario.costs.t_ext_link_ms * 1000)))

        gateway = routers[0].id
        self.nodes: dict[int, Node] = {}
        for spec in sorted(scenario.nodes, key=lambda n: n.id):
            self.nodes[spec.id] = Node(spec, scenario, self.mode, self.scheduler, self.channel, self.rng, self.metrics, gateway)
        self.gateway = self.nodes[gateway]
        self.gateway.uplink_sink = self._deliver_outside

        self.server = EchoServer(self.scheduler, self.uplink, self.gateway)
        self.controller: Optional[Controller] = None
        if self.mode is StackMode.SDN:
            self.controller = Controller(scenario.sdn, self.scheduler, self._controller_send, gateway)

        self.apps: dict[int, EchoApp] = {}
        for spec in sorted(scenario.nodes, key=lambda n: n.id):
            destination = None
            if spec.role is NodeRole.SENDER:
                destination = spec.destination if spec.destination is not None else SERVER_ADDR
            self.apps[spec.id] = EchoApp(
                self.nodes[spec.id], self.scheduler, self.rng, scenario.traffic, self.metrics,
                destination, scenario.link.compressed_header_len,
            )

    def _deliver_outside(self, d: Datagram) -> None:
        if d.dst == CONTROLLER_ADDR:
            if self.controller is not None:
                self.uplink.send(self.controller.endpoint.receive, d.src, d.content)
        elif d.dst == SERVER_ADDR:
            self.uplink.send(self.server.receive, d)

    def _controller_send(self, dst: int, msg: SbiMessage, category: ControlCategory) -> None:
        self.uplink.send(self.gateway.from_controller, dst, msg, category)

    def run(self, dump_graph: bool = False) -> Metrics:
        for node in self.nodes.values():
            node.start()
        for app in self.apps.values():
            app.start()
        self.scheduler.run(seconds(self.scenario.run.duration_s))
        if dump_graph and self.controller is not None:
            self.metrics.graph_snapshot = self.controller.snapshot()
        logger.debug(
            f"Réplica {self.index} ({self.mode.value}, semilla {self.seed}): "
            f"{self.scheduler.executed} eventos, {self.metrics.frames_tx} tramas"
        )
        return self.metrics


def run_replica(scenario: Scenario, mode: StackMode, index: int = 0, seed: Optional[int] = None, dump_graph: bool = False) -> Metrics:
    return Replica(scenario, mode, index, seed).run(dump_graph)
