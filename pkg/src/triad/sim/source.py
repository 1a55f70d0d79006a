"""A trusted time source for driving blocking calibration on a simulated host."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..calibration import CalExchange
from .host import SimulatedHost


@dataclass
class SimulatedSource:
    """Answers calibration rounds after ``pp`` plus link latency.

    ``extra_delay_nanos`` is added to each direction, as an on-path
    adversary would. When an exit interrupts a round the caller is resumed
    at re-entry with no reply, like a node that abandons the round.
    """

    host: SimulatedHost
    one_way_nanos: int = 35_000
    jitter_nanos: int = 0
    extra_delay_nanos: int = 0
    epoch_offset_nanos: int = 0
    rng: random.Random = field(default_factory=lambda: random.Random(1))

    def _leg(self) -> int:
        j = self.rng.randint(-self.jitter_nanos, self.jitter_nanos) if self.jitter_nanos else 0
        return self.one_way_nanos + j + self.extra_delay_nanos

    def exchange(self, pp_nanos: int) -> CalExchange | None:
        clock = self.host.clock
        t0 = clock.now
        arrive = t0 + self._leg()
        reply_at = arrive + pp_nanos + self._leg()
        nxt = self.host.next_exit_at()
        if nxt is not None and nxt <= reply_at:
            self.host.advance_to(max(nxt, clock.now))
            self.host.advance_to(self.host.reentry_at)
            return None
        self.host.advance_to(reply_at)
        return CalExchange(pp_nanos, self.epoch_offset_nanos + arrive + pp_nanos)
