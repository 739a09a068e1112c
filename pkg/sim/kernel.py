"""
Motor de eventos discretos sobre simpy con tiempo entero en microsegundos.

simpy ordena los eventos por (instante, prioridad, id de creación); como el id
se asigna al agendar, dos eventos en el mismo instante se ejecutan en el orden
en que se agendaron.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import simpy

logger = logging.getLogger(__name__)

US_PER_S = 1_000_000


def seconds(value: float) -> int:
    return int(round(value * US_PER_S))


@dataclass(eq=False)
class Timer:
    """Evento agendado. cancel() lo anula sin sacarlo de la cola de simpy."""
    fire_at: int
    seq: int
    action: Callable[[], Any] = field(repr=False)
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True

    def _fire(self, _event) -> None:
        if not self.cancelled:
            self.action()


class Scheduler:
    def __init__(self, env: simpy.Environment = None):
        self.env = env or simpy.Environment()
        self._seq = itertools.count()
        self.executed = 0

    @property
    def now(self) -> int:
        return int(self.env.now)

    def schedule(self, delay_us: int, action: Callable[[], Any]) -> Timer:
        if delay_us < 0:
            raise ValueError(f"no se puede agendar en el pasado ({delay_us} µs)")
        delay_us = int(delay_us)
        timer = Timer(self.now + delay_us, next(self._seq), action)
        event = self.env.timeout(delay_us)
        event.callbacks.append(timer._fire)
        event.callbacks.append(self._count)
        return timer

    def at(self, fire_at_us: int, action: Callable[[], Any]) -> Timer:
        return self.schedule(max(0, fire_at_us - self.now), action)

    def _count(self, _event) -> None:
        self.executed += 1

    def run(self, until_us: int) -> None:
        self.env.run(until=until_us)
