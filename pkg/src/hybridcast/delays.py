"""Empirical one-way delay tracking and the pessimistic insurance bound.

Delays are measured as receiver clock minus sender timestamp with no
offset correction, so a sample can be wrong by up to the sync accuracy;
the estimator adds that accuracy back once, keeping the estimate
pessimistic.  The insurance bound assumes the sender always crashes
during its first redundant broadcast, leaving one recipient to relay
both copies:

    D = d (first copy reaches a relayer)
      + eta + theta (relayer waits out the second-copy timeout)
      + eta (relayer's own two copies are eta apart)
      + d (the relayed second copy reaches the last recipient)
      + margin
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass

from .errors import EmptyWindowError, NonPositiveDelayError


@dataclass(frozen=True)
class DelaySample:
    from_node: int
    to_node: int
    observed_delay_us: int


@dataclass(frozen=True)
class DelayBoundConfig:
    percentile: float = 0.9999
    eta_us: int = 2000
    theta_us: int = 1000
    epsilon_us: int = 0
    safety_margin_us: int = 0

    def __post_init__(self):
        if not (0.0 < self.percentile < 1.0):
            raise ValueError(f"percentile must be in (0,1), got {self.percentile}")


class DelayDistribution:
    """Bounded FIFO window of observed delays with an exact sorted mirror."""

    def __init__(self, window_size: int = 10_000):
        if window_size <= 0:
            raise ValueError("window_size must be positive")
        self.window_size = window_size
        self._fifo: deque[int] = deque()
        self._sorted: list[int] = []

    def __len__(self):
        return len(self._fifo)

    def observe(self, delay_us: int):
        if delay_us <= 0:
            raise NonPositiveDelayError(f"delay {delay_us}us is not positive")
        if len(self._fifo) == self.window_size:
            oldest = self._fifo.popleft()
            idx = bisect.bisect_left(self._sorted, oldest)
            del self._sorted[idx]
        self._fifo.append(delay_us)
        bisect.insort(self._sorted, delay_us)

    def window(self) -> list[int]:
        return list(self._fifo)

    def quantile(self, q: float) -> int:
        """Nearest-rank quantile: 1-based index ceil(q*n) of the sorted window."""
        n = len(self._sorted)
        if n == 0:
            raise EmptyWindowError("quantile of empty window")
        if not (0.0 < q <= 1.0):
            raise ValueError(f"quantile fraction must be in (0,1], got {q}")
        rank = -(-int(q * n * 10**9) // 10**9)  # ceil without float fuzz at integers
        rank = min(max(rank, 1), n)
        return self._sorted[rank - 1]


def estimate_worst_case(dist: DelayDistribution, cfg: DelayBoundConfig) -> int:
    """Pessimistic per-node worst-case one-way delay estimate."""
    return dist.quantile(cfg.percentile) + cfg.epsilon_us


def compute_D(d_us: int, cfg: DelayBoundConfig) -> int:
    """Insurance bound from the always-crash-during-copy-1 timeline."""
    if d_us <= 0:
        raise NonPositiveDelayError(f"worst-case delay {d_us}us is not positive")
    return 2 * d_us + 2 * cfg.eta_us + cfg.theta_us + cfg.safety_margin_us


class DelayEstimator:
    """Per-origin delay windows owned by one node.

    Raw observations within epsilon below zero are clamped to 1us (clock
    error makes them explicable); anything worse is discarded and counted.
    """

    def __init__(self, window_size: int = 10_000, default_d_us: int = 20_000):
        self.window_size = window_size
        self.default_d_us = default_d_us
        self.per_origin: dict[int, DelayDistribution] = {}
        self.discarded = 0

    def record(self, origin: int, raw_delay_us: int, epsilon_us: int):
        if raw_delay_us <= 0:
            if raw_delay_us > -epsilon_us:
                raw_delay_us = 1
            else:
                self.discarded += 1
                return
        dist = self.per_origin.get(origin)
        if dist is None:
            dist = self.per_origin[origin] = DelayDistribution(self.window_size)
        dist.observe(raw_delay_us)

    def worst_case(self, cfg: DelayBoundConfig) -> int:
        """Max over origins of the pessimistic estimate; a prior before data."""
        best = 0
        for dist in self.per_origin.values():
            if len(dist):
                best = max(best, estimate_worst_case(dist, cfg))
        return best if best > 0 else self.default_d_us
