"""Ways of combining a base algorithm with historical data.

* Ignorant: discard the history.
* Full Start: feed every historical entry through the base before ``t = 1``.
* Artificial Replay: before each online step, replay unused historical entries
  for the proposed action until its class has none left, then act online.

Environments expose ``opt``, ``mu(action)``, ``reward_class(component)``,
``check_action(action)`` and ``random_action(rng)``; their rewards come from a
shared :class:`~artreplay.model.RewardStack`.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from artreplay.model import (ConfigError, IngestionError, InstanceMismatchError, InvariantViolation,
                             KArmedInstance, RegretLedger, RewardStack, TapeReader, ValidationError)

METAS = ("ignorant", "full-start", "artificial-replay", "random", "optimal")


class KArmedEnv:
    """A K-armed instance played through a reward stack."""

    def __init__(self, instance: KArmedInstance, stack: RewardStack):
        self.instance = instance
        self.stack = stack
        self.opt = instance.opt

    def mu(self, action: int) -> float:
        return self.instance.mean(action)

    def reward_class(self, component: int):
        return component

    def check_action(self, action) -> None:
        self.instance.check_arm(action)

    def random_action(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.instance.k))


class CombFiniteEnv:
    """Choose exactly ``budget`` distinct arms; the reward is the sum over chosen arms."""

    def __init__(self, instance: KArmedInstance, budget: int, stack: RewardStack):
        if not 1 <= budget <= instance.k:
            raise ConfigError(f"B_int={budget} must be in [1, K={instance.k}]")
        self.instance = instance
        self.budget = budget
        self.stack = stack
        self.opt = float(np.sum(np.sort(instance.means)[::-1][:budget]))

    def mu(self, action) -> float:
        return float(sum(self.instance.mean(a) for a in action))

    def reward_class(self, component: int):
        return component

    def check_action(self, action) -> None:
        if len(set(action)) != len(action) or len(action) != self.budget:
            raise InvariantViolation(f"action {action} is not {self.budget} distinct arms")
        for a in action:
            self.instance.check_arm(a)

    def random_action(self, rng: np.random.Generator) -> tuple[int, ...]:
        return tuple(sorted(int(a) for a in rng.choice(self.instance.k, self.budget, replace=False)))


def _play_online(base, env, reader: TapeReader, action) -> list[float]:
    rewards = []
    for c in base.components(action):
        r = reader.draw(env.reward_class(c))
        base.observe(c, r)
        rewards.append(r)
    return rewards


def ignorant_step(base, env, reader: TapeReader):
    """One online step that never looks at history."""
    action = base.decide()
    env.check_action(action)
    return action, _play_online(base, env, reader, action)


def full_start_init(base, history) -> int:
    """Ingest every unused entry of ``history`` in dataset order; returns the number read."""
    n = 0
    for j, entry in history.drain():
        try:
            base.ingest(entry)
        except (ValidationError, InstanceMismatchError, ConfigError, TypeError, ValueError) as exc:
            if isinstance(exc, IngestionError):
                raise
            raise IngestionError(str(exc), j) from exc
        n += 1
    return n


def artificial_replay_step(base, env, reader: TapeReader, history):
    """Replay matching history until the proposal has none, then act once online.

    Returns ``(action, rewards, reads, proposals)``. One entry is consumed per
    matched component in each pass, and every pass ends with a fresh proposal.
    """
    reads = 0
    proposals = 0
    while True:
        action = base.decide()
        proposals += 1
        hit = False
        for c in base.components(action):
            entry = history.pop_entry(base.history_key(c))
            if entry is not None:
                base.ingest(entry)
                reads += 1
                hit = True
        if not hit:
            break
    env.check_action(action)
    return action, _play_online(base, env, reader, action), reads, proposals


@dataclass
class RunTrace:
    """Per-step record of one (base, meta) execution."""

    meta: str
    ledger: RegretLedger
    actions: list = field(default_factory=list)
    regions: list[int] | None = None
    wall_ms: list[float] | None = None
    history_size: int = 0
    reads_before_first: int = 0

    @property
    def reads(self) -> int:
        return self.ledger.reads[-1] if self.ledger.reads else self.reads_before_first

    def unused_frac(self, t: int) -> float:
        """Fraction of history still unread after step ``t`` (1-based); ``nan`` if there is none."""
        if self.history_size == 0:
            return float("nan")
        return 1.0 - self.ledger.reads[t - 1] / self.history_size


def run_policy(base, env, horizon: int, meta: str, history=None, rng: np.random.Generator | None = None,
               timing: bool = False) -> RunTrace:
    """Run ``horizon`` online steps of ``base`` under ``meta`` and check the bookkeeping invariants.

    ``history`` is consumed in place; pass ``history.fresh()`` to keep the original.
    ``rng`` is only used by the ``random`` meta.
    """
    if meta not in METAS:
        raise ConfigError(f"unknown meta {meta!r}; choose from {METAS}")
    if horizon < 1:
        raise ConfigError("T must be >= 1")
    h_size = len(history) if history is not None else 0
    trace = RunTrace(meta, RegretLedger(env.opt), history_size=h_size)
    counts_regions = base is not None and hasattr(base, "region_count")
    if counts_regions:
        trace.regions = []
    if timing:
        trace.wall_ms = []
    reader = env.stack.reader() if hasattr(env, "stack") else None
    clock = time.perf_counter()
    reads = 0
    if meta == "full-start" and history is not None:
        reads = full_start_init(base, history)
        trace.reads_before_first = reads
    elif meta == "random" and rng is None:
        raise ConfigError("the random meta needs an rng")
    for t in range(horizon):
        if meta == "artificial-replay" and history is not None:
            action, _, r, proposals = artificial_replay_step(base, env, reader, history)
            if t == 0:
                trace.reads_before_first = r
            reads += r
        elif meta in ("ignorant", "full-start", "artificial-replay"):
            action, _ = ignorant_step(base, env, reader)
            proposals = 1
        elif meta == "random":
            action = env.random_action(rng)
            env.check_action(action)
            proposals = 1
        else:
            action = None
            proposals = 1
        mu = env.opt if meta == "optimal" else env.mu(action)
        trace.ledger.record_step(mu, reads, proposals)
        trace.actions.append(action)
        if counts_regions:
            trace.regions.append(base.region_count())
        if timing:
            trace.wall_ms.append((time.perf_counter() - clock) * 1000.0)
    _check_trace(trace, horizon)
    return trace


def _check_trace(trace: RunTrace, horizon: int) -> None:
    led = trace.ledger
    if led.t != horizon:
        raise InvariantViolation(f"{led.t} online steps for horizon {horizon}")
    led.check()
    if trace.reads > trace.history_size:
        raise InvariantViolation(f"{trace.reads} reads from a history of {trace.history_size}")
    if led.proposals > horizon + trace.reads:
        raise InvariantViolation(f"{led.proposals} proposals exceed T + reads = {horizon + trace.reads}")


@dataclass
class CouplingReport:
    identical: bool
    steps: int
    t: int | None = None
    action_ar: object = None
    action_fs: object = None
    reads_ar: int = 0
    reads_fs: int = 0

    def __bool__(self) -> bool:
        return self.identical

    def describe(self) -> str:
        if self.identical:
            return f"identical over {self.steps} steps (AR reads {self.reads_ar}, FS reads {self.reads_fs})"
        return f"diverged at t={self.t}: AR played {self.action_ar!r}, FS played {self.action_fs!r}"


def verify_coupling(make_base: Callable[[], object], env, history, horizon: int,
                    require_iidata: bool = True) -> CouplingReport:
    """Run Artificial Replay and Full Start on the same reward stack and compare their actions.

    ``make_base`` must return a fresh base algorithm on each call. Both runs
    start from ``history.fresh()`` so the caller's dataset is untouched.
    """
    ar_base = make_base()
    if require_iidata and not ar_base.iidata:
        raise ConfigError(f"{type(ar_base).__name__} is not IIData; pass require_iidata=False")
    ar = run_policy(ar_base, env, horizon, "artificial-replay", history.fresh())
    fs = run_policy(make_base(), env, horizon, "full-start", history.fresh())
    for t, (a, b) in enumerate(itertools.zip_longest(ar.actions, fs.actions), start=1):
        if a != b:
            return CouplingReport(False, horizon, t, a, b, ar.reads, fs.reads)
    return CouplingReport(True, horizon, reads_ar=ar.reads, reads_fs=fs.reads)
