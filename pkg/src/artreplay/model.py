"""Problem instances, the reward-stack sampling model and regret accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from artreplay.rng import stream


class ConfigError(ValueError):
    """Invalid parameters for an algorithm, instance or scenario."""


class ValidationError(ValueError):
    """An observation outside the supported reward range."""


class InstanceMismatchError(ValueError):
    """An action that does not exist in the instance it was played on."""


class IngestionError(ValueError):
    """A malformed historical entry; ``index`` is its position in the dataset."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"entry {index}: {message}")
        self.index = index


class InvariantViolation(RuntimeError):
    """A run broke one of the library's checked invariants."""


def check_reward(reward: float) -> float:
    reward = float(reward)
    if not 0.0 <= reward <= 1.0:
        raise ValidationError(f"reward {reward!r} outside [0, 1]")
    return reward


@dataclass(frozen=True)
class KArmedInstance:
    """Bernoulli K-armed bandit; ``means[a]`` is the success probability of arm ``a``."""

    means: tuple[float, ...]

    def __post_init__(self):
        if len(self.means) == 0:
            raise ConfigError("instance needs at least one arm")
        for m in self.means:
            if not 0.0 <= m <= 1.0:
                raise ConfigError(f"arm mean {m} outside [0, 1]")

    @classmethod
    def random(cls, k: int, seed: int) -> "KArmedInstance":
        """Means drawn uniformly on [0, 1] from the seed's ``instance`` stream."""
        if k < 1:
            raise ConfigError("K must be >= 1")
        return cls(tuple(float(m) for m in stream(seed, "instance").random(k)))

    @property
    def k(self) -> int:
        return len(self.means)

    @property
    def opt(self) -> float:
        return max(self.means)

    def mean(self, arm: int) -> float:
        self.check_arm(arm)
        return self.means[arm]

    def check_arm(self, arm: int) -> None:
        if not (isinstance(arm, (int, np.integer)) and 0 <= arm < self.k):
            raise InstanceMismatchError(f"arm {arm!r} not in [0, {self.k})")

    def gaps(self) -> np.ndarray:
        return self.opt - np.asarray(self.means)


def sample_reward(instance: KArmedInstance, arm: int, rng: np.random.Generator) -> float:
    """One Bernoulli draw from arm ``arm``."""
    return 1.0 if rng.random() < instance.mean(arm) else 0.0


class RewardStack:
    """Pre-sampled reward tapes, one per action class.

    The tape of class ``c`` is an infinite Bernoulli sequence drawn from its own
    stream, so its content does not depend on the order in which classes are
    first touched. Runs read it through a :class:`TapeReader`; the ``tau``-th
    online pull of ``c`` in any run sees ``tape(c)[tau]``.
    """

    _CHUNK = 256

    def __init__(self, seed: int, mean_of: Callable[[Hashable], float]):
        self.seed = seed
        self.mean_of = mean_of
        self._tapes: dict[Hashable, np.ndarray] = {}
        self._gens: dict[Hashable, np.random.Generator] = {}

    def _extend(self, cls: Hashable, length: int) -> np.ndarray:
        tape = self._tapes.get(cls)
        if tape is not None and len(tape) >= length:
            return tape
        gen = self._gens.get(cls)
        if gen is None:
            gen = self._gens[cls] = stream(self.seed, "reward-tape", cls)
            tape = np.empty(0)
        mu = self.mean_of(cls)
        need = max(length - len(tape), self._CHUNK)
        need = -(-need // self._CHUNK) * self._CHUNK
        fresh = (gen.random(need) < mu).astype(float)
        tape = np.concatenate([tape, fresh])
        self._tapes[cls] = tape
        return tape

    def tape(self, cls: Hashable, length: int) -> np.ndarray:
        return self._extend(cls, length)[:length]

    def prefetch(self, classes: Iterable[Hashable], length: int) -> None:
        for c in classes:
            self._extend(c, length)

    def reward(self, cls: Hashable, index: int) -> float:
        return float(self._extend(cls, index + 1)[index])

    def reader(self) -> "TapeReader":
        return TapeReader(self)


class TapeReader:
    """Per-run view of a :class:`RewardStack` holding per-class pull counts."""

    def __init__(self, stack: RewardStack):
        self.stack = stack
        self.pulls: dict[Hashable, int] = {}
        self.total = 0

    def draw(self, cls: Hashable) -> float:
        tau = self.pulls.get(cls, 0)
        self.pulls[cls] = tau + 1
        self.total += 1
        return self.stack.reward(cls, tau)


def build_reward_stack(instance: KArmedInstance, seed: int, horizon: int) -> RewardStack:
    """Reward stack for a K-armed instance with ``horizon`` rewards per arm up front."""
    if horizon < 1:
        raise ConfigError("T must be >= 1")
    stack = RewardStack(seed, instance.mean)
    stack.prefetch(range(instance.k), horizon)
    return stack


@dataclass
class RegretLedger:
    """Per-step record of expected reward, cumulative regret and data usage."""

    opt: float
    mu: list[float] = field(default_factory=list)
    regret: list[float] = field(default_factory=list)
    reads: list[int] = field(default_factory=list)
    proposals: int = 0

    def __post_init__(self):
        self.opt = float(self.opt)

    @property
    def t(self) -> int:
        return len(self.mu)

    @property
    def total_regret(self) -> float:
        return self.regret[-1] if self.regret else 0.0

    def record_step(self, mu_t: float, reads: int = 0, proposals: int = 1) -> None:
        prev = self.regret[-1] if self.regret else 0.0
        self.mu.append(float(mu_t))
        self.regret.append(prev + self.opt - float(mu_t))
        self.reads.append(int(reads))
        self.proposals += proposals

    def recomputed_regret(self) -> float:
        return self.t * self.opt - float(np.sum(self.mu))

    def check(self, tol: float = 1e-9) -> None:
        """Raise :class:`InvariantViolation` if the series are inconsistent."""
        if abs(self.total_regret - self.recomputed_regret()) > tol * max(1, self.t):
            raise InvariantViolation("cumulative regret disagrees with the action log")
        if any(b < a for a, b in zip(self.reads, self.reads[1:])):
            raise InvariantViolation("historical reads decreased")
        if all(m <= self.opt + tol for m in self.mu):
            if any(b < a - tol for a, b in zip(self.regret, self.regret[1:])):
                raise InvariantViolation("regret decreased although Opt >= mu(A_t)")


def record_step(ledger: RegretLedger, mu_t: float, opt: float | None = None) -> RegretLedger:
    """Functional form of :meth:`RegretLedger.record_step`."""
    if opt is not None and opt != ledger.opt:
        raise ConfigError("opt differs from the ledger's Opt")
    ledger.record_step(mu_t, ledger.reads[-1] if ledger.reads else 0)
    return ledger


def regret_of(opt: float, mus: Sequence[float]) -> float:
    return len(mus) * opt - float(np.sum(mus))
