"""Incremental aggregation of one-shot client updates in arrival order.

The aggregator keeps every received update and rebuilds the estimate from
them in client-id order, so the estimate for a set of clients does not
depend on the order they arrived in.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .numerics import InvalidInputError, ParamVector, RngStream, weighted_sum

POLICIES = ("renormalize", "absolute")


class DuplicateSubmissionError(InvalidInputError):
    pass


class EmptyAggregationError(InvalidInputError):
    pass


def renormalized(p: Sequence[float]) -> list[float]:
    total = math.fsum(p)
    return [x / total for x in p]


@dataclass
class ParticipationReport:
    received: list[int]
    missing: list[int]
    weight_received: float


class AsyncAggregator:
    """Server state for one-shot aggregation as updates trickle in.

    ``renormalize`` (default) reweights the received clients to sum to one, so
    the estimate is ``base + alpha * sum_S p_i delta_i / sum_S p_i``.
    ``absolute`` uses the raw ``p_i`` and treats missing clients as zero updates.
    """

    def __init__(self, base: ParamVector, p: Sequence[float], alpha: float = 1.0, policy: str = "renormalize"):
        if policy not in POLICIES:
            raise InvalidInputError(f"unknown policy {policy!r}")
        self.base = np.array(base, dtype=np.float64)
        self.base.flags.writeable = False
        self.p = [float(x) for x in p]
        self.alpha = float(alpha)
        self.policy = policy
        self._deltas: dict[int, np.ndarray] = {}
        self.arrivals: list[tuple[int, float]] = []

    @property
    def m(self) -> int:
        return len(self.p)

    @property
    def received(self) -> list[int]:
        return sorted(self._deltas)

    def ingest(self, client: int, delta: ParamVector, p_i: Optional[float] = None, time: float = 0.0) -> ParamVector:
        if not 0 <= client < self.m:
            raise InvalidInputError(f"unknown client id {client}")
        if client in self._deltas:
            raise DuplicateSubmissionError(f"client {client} already submitted an update")
        delta = np.array(delta, dtype=np.float64)
        if delta.shape != self.base.shape:
            raise InvalidInputError(f"delta dim {delta.shape} does not match base {self.base.shape}")
        if p_i is not None:
            self.p[client] = float(p_i)
        self._deltas[client] = delta
        self.arrivals.append((client, float(time)))
        return self.estimate()

    def estimate(self) -> ParamVector:
        ids = self.received
        if not ids:
            return self.base.copy()
        ps = [self.p[i] for i in ids]
        weights = renormalized(ps) if self.policy == "renormalize" else ps
        return self.base + self.alpha * weighted_sum([self._deltas[i] for i in ids], weights)

    def snapshot(self) -> "AsyncAggregator":
        other = AsyncAggregator(self.base, self.p, self.alpha, self.policy)
        other._deltas = dict(self._deltas)
        other.arrivals = list(self.arrivals)
        return other

    def finalize(self) -> tuple[ParamVector, ParticipationReport]:
        if not self._deltas:
            raise EmptyAggregationError("no client updates were received")
        ids = self.received
        missing = [i for i in range(self.m) if i not in self._deltas]
        return self.estimate(), ParticipationReport(ids, missing, math.fsum(self.p[i] for i in ids))


@dataclass
class ArrivalSchedule:
    """Virtual arrival time per client; ``None`` marks a dropped client."""

    times: list[Optional[float]]
    seed: int = 0

    def __post_init__(self) -> None:
        if all(t is None for t in self.times):
            raise InvalidInputError("at least one client must arrive")
        if any(t is not None and t < 0 for t in self.times):
            raise InvalidInputError("arrival times must be >= 0")

    @classmethod
    def in_order(cls, m: int, dropped: Sequence[int] = ()) -> "ArrivalSchedule":
        return cls([None if i in dropped else float(i) for i in range(m)])

    @classmethod
    def random(cls, m: int, seed: int, drop_prob: float = 0.0) -> "ArrivalSchedule":
        """Exponential arrival delays with independent drops (at least one client survives)."""
        g = RngStream(seed, ("arrivals",)).generator()
        delays = g.exponential(1.0, size=m)
        drops = g.random(m) < drop_prob
        if drops.all():
            drops[int(np.argmin(delays))] = False
        return cls([None if d else float(t) for t, d in zip(delays, drops)], seed)

    def order(self) -> list[int]:
        arrived = [(t, i) for i, t in enumerate(self.times) if t is not None]
        return [i for _, i in sorted(arrived)]


@dataclass
class Snapshot:
    arrival_index: int
    client_id: int
    time: float
    metric: Optional[float]
    params: ParamVector = field(repr=False)


def simulate_arrivals(
    schedule: ArrivalSchedule,
    deltas: Sequence[ParamVector],
    base: ParamVector,
    p: Sequence[float],
    *,
    alpha: float = 1.0,
    policy: str = "renormalize",
    metric: Optional[Callable[[ParamVector], float]] = None,
) -> tuple[list[Snapshot], AsyncAggregator]:
    """Feed updates in schedule order; snapshot (and optionally score) the estimate after each."""
    if len(deltas) != len(schedule.times):
        raise InvalidInputError("schedule and deltas disagree on the client count")
    agg = AsyncAggregator(base, p, alpha, policy)
    snaps = []
    for n, i in enumerate(schedule.order(), start=1):
        est = agg.ingest(i, deltas[i], time=schedule.times[i])
        snaps.append(Snapshot(n, i, schedule.times[i], metric(est) if metric else None, est))
    return snaps, agg


def write_snapshots_csv(path: Union[str, Path], snaps: Sequence[Snapshot]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arrival_index", "client_id", "metric"])
        for s in snaps:
            w.writerow([s.arrival_index, s.client_id, repr(s.metric)])
