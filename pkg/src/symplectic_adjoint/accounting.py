"""Retained-scalar memory meter and per-run accounting report."""

from __future__ import annotations

from dataclasses import asdict, dataclass


class MemoryMeter:
    """Counts scalars held by checkpoints and live tapes, tracking the peak.

    Memory is measured in retained floating-point scalars rather than bytes so
    the numbers reflect the algorithm and not the host's allocator.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0

    def retain(self, n: int) -> None:
        self.current += int(n)
        if self.current > self.peak:
            self.peak = self.current

    def release(self, n: int) -> None:
        self.current -= int(n)
        if self.current < 0:
            raise RuntimeError("memory meter released more than it retained")


@dataclass
class AccountingReport:
    peak_retained_scalars: int = 0
    nfe_forward: int = 0
    nfe_backward: int = 0
    recompute_nfe: int = 0
    vjp_count: int = 0
    wall_time_ns: int = 0
    steps_accepted: int = 0
    steps_rejected: int = 0
    steps_backward: int = 0
    evals_per_step: int = 0
    tape_scalars_per_eval: int = 0
    components: int = 1

    def as_dict(self) -> dict:
        return asdict(self)
