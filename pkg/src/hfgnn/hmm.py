"""Discrete hidden Markov model for per-node state dynamics.

The model is used two ways: as a standalone probabilistic component
(sampling, joint and marginal likelihoods in log space), and as a drift
driver that perturbs client node features between federation rounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from hfgnn.errors import ConfigError, SequenceLengthError, ShapeError
from hfgnn.graph import ClientDataset
from hfgnn.seeding import make_rng

STOCHASTIC_TOL = 1e-12

NEG_INF = float("-inf")


def _check_distribution(arr: np.ndarray, name: str) -> None:
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} has negative or non-finite entries", key=f"hmm.{name}")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > STOCHASTIC_TOL):
        raise ConfigError(f"{name} rows must sum to 1", key=f"hmm.{name}")


@dataclass(frozen=True, eq=False)
class HmmModel:
    """Initial, transition (S x S) and emission (S x O) distributions."""

    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray

    def __post_init__(self) -> None:
        init = np.array(self.initial, dtype=np.float64)
        trans = np.array(self.transition, dtype=np.float64)
        emit = np.array(self.emission, dtype=np.float64)
        S = init.shape[0] if init.ndim == 1 else -1
        if S < 1 or trans.shape != (S, S) or emit.ndim != 2 or emit.shape[0] != S or emit.shape[1] < 1:
            raise ShapeError(
                f"inconsistent HMM shapes: initial {init.shape}, "
                f"transition {trans.shape}, emission {emit.shape}"
            )
        _check_distribution(init, "initial")
        _check_distribution(trans, "transition")
        _check_distribution(emit, "emission")
        for arr in (init, trans, emit):
            arr.setflags(write=False)
        object.__setattr__(self, "initial", init)
        object.__setattr__(self, "transition", trans)
        object.__setattr__(self, "emission", emit)

    @property
    def num_states(self) -> int:
        return self.initial.shape[0]

    @property
    def num_observations(self) -> int:
        return self.emission.shape[1]

    def stationary_distribution(self) -> np.ndarray:
        """Left eigenvector of the transition matrix for eigenvalue 1."""
        vals, vecs = np.linalg.eig(self.transition.T)
        vec = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        return vec / vec.sum()

    def to_dict(self) -> dict:
        return {
            "initial": self.initial.tolist(),
            "transition": self.transition.tolist(),
            "emission": self.emission.tolist(),
        }


@dataclass(frozen=True)
class StateSequence:
    hidden: tuple[int, ...]
    observed: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.hidden) != len(self.observed):
            raise SequenceLengthError("hidden and observed sequences differ in length")
        object.__setattr__(self, "hidden", tuple(int(x) for x in self.hidden))
        object.__setattr__(self, "observed", tuple(int(y) for y in self.observed))

    def __len__(self) -> int:
        return len(self.hidden)


def default_drift_model() -> HmmModel:
    """Three hidden regimes, four observation levels (0 = no drift)."""
    return HmmModel(
        initial=[0.6, 0.3, 0.1],
        transition=[[0.8, 0.15, 0.05], [0.2, 0.7, 0.1], [0.1, 0.3, 0.6]],
        emission=[
            [0.7, 0.2, 0.1, 0.0],
            [0.2, 0.5, 0.2, 0.1],
            [0.0, 0.2, 0.3, 0.5],
        ],
    )


def _draw(cdf: np.ndarray, u: float) -> int:
    # inverse-CDF; clamps against cdf[-1] landing just below 1
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


def sample_sequence(m: HmmModel, N: int, seed: int) -> StateSequence:
    if N < 1:
        raise SequenceLengthError(f"sequence length must be >= 1, got {N}")
    rng = make_rng(seed, "hmm-sequence")
    init_cdf = np.cumsum(m.initial)
    trans_cdf = np.cumsum(m.transition, axis=1)
    emit_cdf = np.cumsum(m.emission, axis=1)
    hidden, observed = [], []
    x = _draw(init_cdf, rng.random())
    for i in range(N):
        if i:
            x = _draw(trans_cdf[x], rng.random())
        hidden.append(x)
        observed.append(_draw(emit_cdf[x], rng.random()))
    return StateSequence(tuple(hidden), tuple(observed))


def _validate_sequence(m: HmmModel, hidden, observed) -> None:
    if len(observed) == 0:
        raise SequenceLengthError("empty sequence")
    if hidden is not None and any(not 0 <= x < m.num_states for x in hidden):
        raise ShapeError("hidden state index out of range")
    if any(not 0 <= y < m.num_observations for y in observed):
        raise ShapeError("observation index out of range")


def _log(p: float) -> float:
    return float(np.log(p)) if p > 0 else NEG_INF


def joint_log_probability(m: HmmModel, s: StateSequence) -> float:
    """log P(x, y) = log P(x1) P(y1|x1) prod_i P(xi|xi-1) P(yi|xi).

    Returns ``-inf`` when any factor is zero.
    """
    _validate_sequence(m, s.hidden, s.observed)
    x, y = s.hidden, s.observed
    total = _log(m.initial[x[0]]) + _log(m.emission[x[0], y[0]])
    for i in range(1, len(x)):
        total += _log(m.transition[x[i - 1], x[i]]) + _log(m.emission[x[i], y[i]])
    return total


def observation_likelihood(m: HmmModel, observed) -> float:
    """log P(y), marginalising hidden paths with the forward recursion."""
    observed = [int(y) for y in observed]
    _validate_sequence(m, None, observed)
    with np.errstate(divide="ignore"):
        log_init = np.log(m.initial)
        log_trans = np.log(m.transition)
        log_emit = np.log(m.emission)
    alpha = log_init + log_emit[:, observed[0]]
    for y in observed[1:]:
        alpha = logsumexp(alpha[:, None] + log_trans, axis=0) + log_emit[:, y]
    return float(logsumexp(alpha))


def initial_states(m: HmmModel, num_nodes: int, seed: int) -> np.ndarray:
    rng = make_rng(seed, "hmm-initial")
    cdf = np.cumsum(m.initial)
    return np.minimum(np.searchsorted(cdf, rng.random(num_nodes), side="right"), m.num_states - 1)


def evolve_client(
    c: ClientDataset,
    m: HmmModel,
    node_states: np.ndarray,
    round_index: int,
    drift_scale: float,
    seed: int,
) -> tuple[ClientDataset, np.ndarray]:
    """Advance every node one Markov step and perturb its features.

    Observation ``o`` adds isotropic Gaussian noise with standard deviation
    ``drift_scale * o / (O - 1)``.  Labels, masks and topology are untouched.
    """
    states = np.asarray(node_states, dtype=np.int64)
    if states.shape != (c.num_nodes,):
        raise ShapeError(f"need one state per node ({c.num_nodes}), got {states.shape}")
    rng = make_rng(seed, "hmm-drift", round_index, c.client_id)
    n, f = c.subgraph.features.shape
    S, O = m.num_states, m.num_observations

    trans_cdf = np.cumsum(m.transition, axis=1)
    emit_cdf = np.cumsum(m.emission, axis=1)
    u_state, u_obs = rng.random(n), rng.random(n)
    new_states = (u_state[:, None] >= trans_cdf[states]).sum(axis=1)
    new_states = np.minimum(new_states, S - 1)
    obs = np.minimum((u_obs[:, None] >= emit_cdf[new_states]).sum(axis=1), O - 1)

    noise = rng.standard_normal((n, f))
    if drift_scale == 0 or O == 1:
        return c, new_states
    sd = drift_scale * obs / (O - 1)
    features = c.subgraph.features + sd[:, None] * noise
    return c.with_subgraph(c.subgraph.with_features(features)), new_states
