"""Action-index selection rules shared by the ASR model and the baseline agents."""
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .exceptions import InvalidArgumentError, NoActionError

BOLTZMANN = 'boltzmann'
EPSILON_GREEDY = 'epsilon-greedy'
GREEDY = 'greedy'
EXPLORATION_KINDS = (BOLTZMANN, EPSILON_GREEDY, GREEDY)


def _admissible(values, mask):
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if mask is None:
        allowed = np.ones(values.size, dtype=bool)
    else:
        allowed = np.asarray(mask, dtype=bool).reshape(-1)
        if allowed.size != values.size:
            raise InvalidArgumentError(f"Mask of {allowed.size} entries for {values.size} values")
    if not allowed.any():
        raise NoActionError("The action mask admits no index")
    return values, allowed


def boltzmann_probabilities(values, tau, mask=None):
    """``p_i ~ exp(values_i / tau)`` over admissible indices, zero elsewhere."""
    if tau <= 0:
        raise InvalidArgumentError(f"Temperature must be positive, got {tau}")
    values, allowed = _admissible(values, mask)
    logits = np.where(allowed, values / tau, -np.inf)
    return softmax(logits)


def boltzmann_sample(values, tau, rng, mask=None):
    probabilities = boltzmann_probabilities(values, tau, mask)
    cdf = np.cumsum(probabilities)
    return int(np.searchsorted(cdf, rng.random() * cdf[-1], side='right'))


def greedy_index(values, mask=None):
    """Admissible argmax; ties go to the lowest index."""
    values, allowed = _admissible(values, mask)
    return int(np.argmax(np.where(allowed, values, -np.inf)))


def epsilon_greedy_index(values, epsilon, rng, mask=None):
    values, allowed = _admissible(values, mask)
    if rng.random() < epsilon:
        return int(rng.choice(np.flatnonzero(allowed)))
    return greedy_index(values, allowed)


@dataclass(frozen=True)
class Exploration:
    """How an agent turns Q values into an index: Boltzmann at ``tau``, epsilon-greedy, or greedy."""
    kind: str = BOLTZMANN
    tau: float = 0.01
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in EXPLORATION_KINDS:
            raise InvalidArgumentError(f"Unknown exploration {self.kind!r}. Choose from: {EXPLORATION_KINDS}")

    def choose(self, values, rng, mask=None):
        if self.kind == BOLTZMANN and self.tau > 0:
            return boltzmann_sample(values, self.tau, rng, mask)
        if self.kind == EPSILON_GREEDY:
            return epsilon_greedy_index(values, self.epsilon, rng, mask)
        return greedy_index(values, mask)
