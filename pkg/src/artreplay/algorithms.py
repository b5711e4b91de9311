"""Base bandit algorithms for discrete arms.

Every base algorithm exposes the same small surface used by the wrappers in
:mod:`artreplay.meta`:

``decide()``
    the proposed action given everything observed so far;
``components(action)``
    the sub-arms that receive separate (semi-bandit) feedback;
``history_key(component)``
    the key under which matching historical data is stored;
``observe(component, reward)`` / ``ingest(entry)``
    update from an online reward or a historical ``(action, reward)`` entry;
``iidata``
    whether appending data on non-chosen actions can never change ``decide()``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize, special

from artreplay.model import ConfigError, InstanceMismatchError, ValidationError, check_reward


def hoeffding_psi(lam: float) -> float:
    """Log-MGF bound of any [0, 1]-valued variable (Hoeffding's lemma)."""
    return lam * lam / 8.0


LOG_TERMS = ("T", "TK", "2TK")


@dataclass(frozen=True)
class PsiSpec:
    """Confidence-bonus recipe for monotone psi-UCB.

    With ``transform=False`` (default) the bonus is ``sqrt(2 log(.) / n)``;
    with ``transform=True`` it is ``inv_psi_star(2 log(.) / n)``. ``log_term``
    picks the argument of the log: ``T``, ``T*K`` or ``2*T*K``.
    """

    psi: Callable[[float], float] = hoeffding_psi
    log_term: str = "T"
    transform: bool = False

    def __post_init__(self):
        if self.log_term not in LOG_TERMS:
            raise ConfigError(f"log_term must be one of {LOG_TERMS}")

    def log_value(self, horizon: int, k: int) -> float:
        arg = {"T": horizon, "TK": horizon * k, "2TK": 2 * horizon * k}[self.log_term]
        return math.log(arg)

    def bonus(self, n: int, horizon: int, k: int) -> float:
        if n <= 0:
            return math.inf
        y = 2.0 * self.log_value(horizon, k) / n
        if not self.transform:
            return math.sqrt(y)
        return psi_star_inverse(self, y)


def psi_star(spec: PsiSpec, eps: float) -> float:
    """Legendre-Fenchel transform ``sup_{lam >= 0} lam*eps - psi(lam)``."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if spec.psi is hoeffding_psi:
        return 2.0 * eps * eps
    return numeric_psi_star(spec.psi, eps)


def numeric_psi_star(psi: Callable[[float], float], eps: float) -> float:
    """Transform by bounded scalar maximisation; the bracket grows until the optimum is interior."""
    hi = 1.0
    while True:
        res = optimize.minimize_scalar(lambda lam: psi(lam) - lam * eps, bounds=(0.0, hi),
                                       method="bounded", options={"xatol": 1e-12})
        if res.x < 0.9 * hi or hi > 1e12:
            return max(0.0, -float(res.fun))
        hi *= 10.0


def psi_star_inverse(spec: PsiSpec, y: float) -> float:
    """Smallest ``eps >= 0`` with ``psi_star(eps) = y``."""
    if y < 0:
        raise ValueError("y must be >= 0")
    if spec.psi is hoeffding_psi:
        return math.sqrt(y / 2.0)
    if y == 0:
        return 0.0
    hi = 1.0
    while psi_star(spec, hi) < y:
        hi *= 2.0
    return float(optimize.brentq(lambda e: psi_star(spec, e) - y, 0.0, hi, xtol=1e-14))


class MonUCB:
    """Monotone UCB: per-arm indices start at 1 and are only ever min-updated."""

    iidata = True

    def __init__(self, k: int, horizon: int, psi: PsiSpec | None = None):
        if k < 1:
            raise ConfigError("K must be >= 1")
        if horizon < 1:
            raise ConfigError("T must be >= 1")
        self.k = k
        self.horizon = horizon
        self.psi = psi or PsiSpec()
        self.n = np.zeros(k, dtype=np.int64)
        self.mean = np.ones(k)
        self.ucb = np.ones(k)

    def decide(self) -> int:
        # np.argmax returns the first maximiser: lowest index wins ties
        return int(np.argmax(self.ucb))

    def update(self, arm: int, reward: float) -> None:
        if not 0 <= arm < self.k:
            raise InstanceMismatchError(f"arm {arm} not in [0, {self.k})")
        reward = check_reward(reward)
        n = int(self.n[arm]) + 1
        mean = (float(self.mean[arm]) * (n - 1) + reward) / n
        self.n[arm] = n
        self.mean[arm] = mean
        cand = mean + self.psi.bonus(n, self.horizon, self.k)
        if cand < self.ucb[arm]:
            self.ucb[arm] = cand

    observe = update

    def ingest(self, entry) -> None:
        arm, reward = entry
        self.update(int(arm), reward)

    def components(self, action: int) -> tuple[int, ...]:
        return (action,)

    def history_key(self, component: int) -> int:
        return component

    def snapshot(self) -> tuple:
        return tuple(self.n.tolist()), tuple(self.mean.tolist()), tuple(self.ucb.tolist())


def monucb_decide(ucb) -> int:
    return int(np.argmax(np.asarray(ucb)))


def monucb_update(state: MonUCB, arm: int, reward: float) -> MonUCB:
    state.update(arm, reward)
    return state


class CombMonUCB(MonUCB):
    """Monotone UCB over subsets of exactly ``budget`` arms with semi-bandit feedback."""

    def __init__(self, k: int, budget: int, horizon: int, psi: PsiSpec | None = None):
        if not 1 <= budget <= k:
            raise ConfigError(f"B_int={budget} must be in [1, K={k}]")
        super().__init__(k, horizon, psi)
        self.budget = budget

    def decide(self) -> tuple[int, ...]:
        order = np.argsort(-self.ucb, kind="stable")
        return tuple(sorted(int(a) for a in order[: self.budget]))

    def components(self, action: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(action)


def comb_monucb_decide(ucb, budget: int) -> tuple[int, ...]:
    ucb = np.asarray(ucb, dtype=float)
    if budget > len(ucb):
        raise ConfigError(f"B_int={budget} exceeds K={len(ucb)}")
    order = np.argsort(-ucb, kind="stable")
    return tuple(sorted(int(a) for a in order[:budget]))


class ThompsonSampling:
    """Beta-Bernoulli Thompson sampling; not IIData."""

    iidata = False

    def __init__(self, k: int, rng: np.random.Generator, prior: tuple[float, float] = (1.0, 1.0)):
        if k < 1:
            raise ConfigError("K must be >= 1")
        self.k = k
        self.rng = rng
        self.alpha = np.full(k, float(prior[0]))
        self.beta = np.full(k, float(prior[1]))

    def decide(self) -> int:
        return int(np.argmax(self.rng.beta(self.alpha, self.beta)))

    def update(self, arm: int, reward: float) -> None:
        if not 0 <= arm < self.k:
            raise InstanceMismatchError(f"arm {arm} not in [0, {self.k})")
        if reward == 1:
            self.alpha[arm] += 1
        elif reward == 0:
            self.beta[arm] += 1
        else:
            raise ValidationError(f"Thompson sampling needs binary rewards, got {reward!r}")

    observe = update

    def ingest(self, entry) -> None:
        arm, reward = entry
        self.update(int(arm), reward)

    def components(self, action: int) -> tuple[int, ...]:
        return (action,)

    def history_key(self, component: int) -> int:
        return component


def thompson_update(posterior: tuple[float, float], reward: float) -> tuple[float, float]:
    a, b = posterior
    if reward == 1:
        return a + 1, b
    if reward == 0:
        return a, b + 1
    raise ValidationError(f"Thompson sampling needs binary rewards, got {reward!r}")


def prob_beta_greater(a1: int, b1: int, a2: int, b2: int) -> float:
    """Exact ``P(X > Y)`` for independent ``X ~ Beta(a1, b1)``, ``Y ~ Beta(a2, b2)``, integer ``a2``."""
    if int(a2) != a2 or a2 < 1:
        raise ValueError("a2 must be a positive integer")
    i = np.arange(int(a2))
    terms = np.exp(special.betaln(a1 + i, b1 + b2) - np.log(b2 + i)
                   - special.betaln(1 + i, b2) - special.betaln(a1, b1))
    return float(1.0 - terms.sum())
