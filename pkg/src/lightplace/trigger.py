"""Reconfiguration triggers: FirstStep, LastStep, EveryN and the likelihood-based Logprob."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path


class TriggerError(ValueError):
    pass


KINDS = ("first_step", "last_step", "every_n", "logprob")


@dataclass
class TriggerState:
    """Per-episode trigger state machine.

    Step 0 always counts as a reconfiguration; call :meth:`start` once the initial
    configuration is in place.  ``strict=True`` applies ``log_lik < alpha * max``
    literally even when the running maximum is non-negative.
    """

    kind: str
    n: int = 10
    alpha: float = 1.07
    max_steps: int = 100
    strict: bool = False
    t: int = 0
    t_c: int = 0
    running_max: float = -math.inf
    events: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TriggerError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "every_n" and self.n < 1:
            raise TriggerError("every_n needs n >= 1")
        if self.kind == "logprob" and not self.alpha >= 1:
            raise TriggerError("alpha must lie in [1, inf)")

    @property
    def label(self) -> str:
        if self.kind == "every_n":
            return f"every_{self.n}"
        if self.kind == "logprob":
            return f"logprob_{self.alpha:g}"
        return self.kind

    def start(self, log_lik: float | None = None) -> None:
        """Record the step-0 configuration."""
        self.t = 0
        self.events.append({"step": 0, "kind": self.label, "log_lik": log_lik, "threshold": None})
        self._reset(0, log_lik)

    def _reset(self, t: int, log_lik_after: float | None) -> None:
        self.t_c = t
        self.running_max = -math.inf if log_lik_after is None else float(log_lik_after)

    def observe(self, log_lik: float) -> None:
        """Fold a log-likelihood into the running maximum (e.g. the value right after reconfiguring)."""
        self.running_max = max(self.running_max, float(log_lik))

    def threshold(self) -> float:
        m = self.running_max
        if math.isinf(m):
            return -math.inf
        if math.isinf(self.alpha):
            return -math.inf
        if self.strict or m < 0:
            return self.alpha * m
        # alpha * m would sit above a non-negative max; keep the margin below it instead.
        return m - (self.alpha - 1) * abs(m)

    @property
    def count(self) -> int:
        """Reconfigurations after step 0."""
        return sum(1 for e in self.events if e["step"] > 0)


def should_reconfigure(state: TriggerState, log_lik: float, t: int | None = None) -> bool:
    """Decide whether to reconfigure at step ``t`` (defaults to ``state.t + 1``).

    On a firing the epoch restarts: ``t_c = t`` and the running maximum is cleared;
    feed the post-reconfiguration likelihood back through :meth:`TriggerState.observe`.
    Otherwise the running maximum absorbs ``log_lik``.
    """
    if log_lik is None or not math.isfinite(log_lik):
        raise TriggerError(f"log-likelihood must be finite, got {log_lik}")
    t = state.t + 1 if t is None else int(t)
    state.t = t
    threshold = None
    if state.kind == "first_step":
        fire = t == 0
    elif state.kind == "last_step":
        fire = t == state.max_steps
    elif state.kind == "every_n":
        fire = (t - state.t_c) >= state.n
    else:
        threshold = state.threshold()
        fire = log_lik < threshold
    if fire:
        state.events.append({"step": t, "kind": state.label, "log_lik": float(log_lik), "threshold": threshold})
        state._reset(t, None)
    else:
        state.observe(log_lik)
    return fire


def cumulative_counts(events: list[dict], max_steps: int) -> list[int]:
    """Cumulative number of reconfigurations (after step 0) at each step ``0..max_steps``."""
    fired = {e["step"] for e in events if e["step"] > 0}
    out, total = [], 0
    for t in range(max_steps + 1):
        total += t in fired
        out.append(total)
    return out


def write_cumulative_csv(path: str | Path, series: dict[str, list[int]]) -> None:
    names = list(series)
    length = max(len(v) for v in series.values())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + names)
        for t in range(length):
            w.writerow([t] + [series[n][t] if t < len(series[n]) else "" for n in names])
