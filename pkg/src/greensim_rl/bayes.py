"""Transition-model risk quantification.

The real-world dataset holds observed chromatography removal fractions per
(step, pooling window).  Under a Unif(0, 300] prior on every Beta shape
parameter, each (step, action, species) channel has an independent
posterior over its ``(alpha, beta)`` pair given the fractions observed for
that channel.  A random-walk Metropolis-Hastings sampler (on log shapes,
with per-channel step-size adaptation during burn-in) produces joint
posterior draws assembled into full model parameter tables.

Channels with no observations are sampled by an independence proposal
from the prior itself, which such a chain accepts with probability one --
so their draws are exactly i.i.d. Unif(0, 300].  This covers both sparse
(step, action) cells and the terminal-step rows that no transition ever
produces data for.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO

import numpy as np
from scipy.special import betaln

from .bioenv import ETA_L, ETA_U, PSI_L, PSI_U, ModelParams

__all__ = [
    "FractionDataset",
    "FractionObservation",
    "PosteriorState",
    "acceptance_rows",
    "log_posterior_pair",
    "make_posterior",
    "mh_sample",
    "read_fractions_csv",
    "update_dataset",
    "write_acceptance_csv",
    "write_fractions_csv",
]

PRIOR_HIGH = 300.0

# Step-size adaptation (burn-in only): nudge toward the target acceptance band.
ADAPT_EVERY = 25
ACCEPT_LOW, ACCEPT_HIGH = 0.3, 0.5


@dataclass(frozen=True)
class FractionObservation:
    """One real-world transition measurement."""

    step: int
    action: int
    h_fraction: float      # protein fraction retained
    psi_fraction: float    # impurity fraction retained

    def __post_init__(self):
        if self.step not in (1, 2):
            raise ValueError(f"observations come from steps 1 and 2, got {self.step}")
        if self.action < 0:
            raise ValueError("action must be nonnegative")
        for name in ("h_fraction", "psi_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} outside (0, 1)")


@dataclass(frozen=True)
class FractionDataset:
    """All real-world fraction observations collected so far."""

    observations: tuple[FractionObservation, ...] = ()

    def __len__(self) -> int:
        return len(self.observations)

    def union(self, other: "FractionDataset") -> "FractionDataset":
        return FractionDataset(self.observations + other.observations)

    def partition(self) -> dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]:
        """Group fractions by (step, action) -> (protein array, impurity array)."""
        groups: dict[tuple[int, int], tuple[list, list]] = {}
        for obs in self.observations:
            h, psi = groups.setdefault((obs.step, obs.action), ([], []))
            h.append(obs.h_fraction)
            psi.append(obs.psi_fraction)
        return {key: (np.array(h), np.array(p)) for key, (h, p) in groups.items()}


def write_fractions_csv(dataset: FractionDataset, fh: IO[str]) -> None:
    writer = csv.writer(fh)
    writer.writerow(["step", "action", "h_fraction", "psi_fraction"])
    for obs in dataset.observations:
        writer.writerow([obs.step, obs.action, repr(obs.h_fraction), repr(obs.psi_fraction)])


def read_fractions_csv(fh: IO[str]) -> FractionDataset:
    reader = csv.DictReader(fh)
    observations = tuple(
        FractionObservation(
            step=int(row["step"]),
            action=int(row["action"]),
            h_fraction=float(row["h_fraction"]),
            psi_fraction=float(row["psi_fraction"]),
        )
        for row in reader
    )
    return FractionDataset(observations)


# --- log posterior -----------------------------------------------------------


@dataclass(frozen=True)
class _SuffStats:
    """Beta-likelihood sufficient statistics of one channel's fractions."""

    n: int
    sum_log: float
    sum_log1m: float

    @classmethod
    def of(cls, fractions: np.ndarray) -> "_SuffStats":
        fractions = np.asarray(fractions, dtype=np.float64)
        if fractions.size == 0:
            return cls(0, 0.0, 0.0)
        return cls(int(fractions.size), float(np.sum(np.log(fractions))), float(np.sum(np.log1p(-fractions))))


_EMPTY_STATS = _SuffStats(0, 0.0, 0.0)


def _log_lik(alpha: float, beta: float, stats: _SuffStats) -> float:
    if stats.n == 0:
        return 0.0
    return (
        (alpha - 1.0) * stats.sum_log
        + (beta - 1.0) * stats.sum_log1m
        - stats.n * float(betaln(alpha, beta))
    )


def log_posterior_pair(shapes, fractions) -> float:
    """Unnormalized log posterior of one (alpha, beta) pair.

    The flat prior over (0, 300]^2 contributes only its support indicator;
    outside the support the value is -inf.
    """
    alpha, beta = float(shapes[0]), float(shapes[1])
    if not (0.0 < alpha <= PRIOR_HIGH and 0.0 < beta <= PRIOR_HIGH):
        return -np.inf
    return _log_lik(alpha, beta, _SuffStats.of(np.asarray(fractions, dtype=np.float64)))


# --- chains ------------------------------------------------------------------


@dataclass
class ChainState:
    """Random-walk state of one channel (positions stored as log shapes)."""

    log_shapes: np.ndarray
    step_size: float = 0.5
    accepted: int = 0
    proposed: int = 0
    steps_taken: int = 0
    window_accepted: int = 0
    window_proposed: int = 0
    cur_loglik: float | None = None  # cached log likelihood at the position


def _advance_chain(
    chain: ChainState,
    stats: _SuffStats,
    n_moves: int,
    burn_in: int,
    rng: np.random.Generator,
    force_walk: bool = False,
) -> None:
    """Advance one chain by ``n_moves`` Metropolis-Hastings moves in place.

    Data-backed channels walk on log shapes; the acceptance ratio carries
    the log-transform Jacobian so the chain targets the posterior over the
    shapes themselves.  Empty channels draw fresh prior points instead
    (independence proposal, which the flat target always accepts, making
    their draws exactly i.i.d. prior samples) unless ``force_walk`` keeps
    them on the random-walk path.
    """
    if stats.n == 0 and not force_walk:
        # Only the end position is observable; one draw stands in for the move block.
        proposal = PRIOR_HIGH * (1.0 - rng.random(2))  # in (0, PRIOR_HIGH]
        chain.log_shapes = np.log(proposal)
        chain.accepted += n_moves
        chain.proposed += n_moves
        chain.steps_taken += n_moves
        chain.cur_loglik = 0.0
        return
    normals = rng.standard_normal((n_moves, 2))
    log_us = np.log(rng.random(n_moves))
    if chain.cur_loglik is None:
        shapes = np.exp(chain.log_shapes)
        chain.cur_loglik = _log_lik(shapes[0], shapes[1], stats)
    for m in range(n_moves):
        prop = chain.log_shapes + chain.step_size * normals[m]
        shapes = np.exp(prop)
        if shapes[0] <= PRIOR_HIGH and shapes[1] <= PRIOR_HIGH:
            prop_loglik = _log_lik(shapes[0], shapes[1], stats)
            # the sum difference is the Jacobian of the log transform
            log_ratio = prop_loglik - chain.cur_loglik + float(np.sum(prop) - np.sum(chain.log_shapes))
        else:
            prop_loglik = -np.inf
            log_ratio = -np.inf
        chain.proposed += 1
        chain.window_proposed += 1
        if log_us[m] < log_ratio:
            chain.log_shapes = prop
            chain.cur_loglik = prop_loglik
            chain.accepted += 1
            chain.window_accepted += 1
        chain.steps_taken += 1
        if chain.steps_taken <= burn_in and chain.window_proposed >= ADAPT_EVERY:
            rate = chain.window_accepted / chain.window_proposed
            if rate < ACCEPT_LOW:
                chain.step_size = max(chain.step_size * 0.7, 1e-3)
            elif rate > ACCEPT_HIGH:
                chain.step_size = min(chain.step_size * 1.4, 10.0)
            chain.window_accepted = 0
            chain.window_proposed = 0


class PosteriorState:
    """Dataset plus one MCMC chain per (step, action, species) channel.

    Single-writer: :func:`mh_sample` advances the chains in place.  The
    emitted :class:`~greensim_rl.bioenv.ModelParams` draws are immutable.
    """

    def __init__(
        self,
        dataset: FractionDataset,
        n_steps: int = 3,
        n_actions: int = 10,
        burn_in: int = 500,
        thin: int = 5,
    ):
        if thin < 1 or burn_in < 0:
            raise ValueError("thin must be >= 1 and burn_in >= 0")
        self.dataset = dataset
        self.n_steps = n_steps
        self.n_actions = n_actions
        self.burn_in = burn_in
        self.thin = thin
        self.chains: dict[tuple[int, int, str], ChainState] = {}
        for t in range(1, n_steps + 1):
            for a in range(n_actions):
                for channel in ("eta", "psi"):
                    self.chains[(t, a, channel)] = ChainState(log_shapes=np.log(np.array([10.0, 10.0])))
        self._stats: dict[tuple[int, int, str], _SuffStats] = {}
        self._rebuild_stats()

    def _rebuild_stats(self) -> None:
        groups = self.dataset.partition()
        for (t, a, channel) in self.chains:
            if (t, a) in groups:
                h, psi = groups[(t, a)]
                if a >= self.n_actions:
                    raise ValueError(f"observation action {a} >= n_actions {self.n_actions}")
                self._stats[(t, a, channel)] = _SuffStats.of(h if channel == "eta" else psi)
            else:
                self._stats[(t, a, channel)] = _EMPTY_STATS

    def channel_keys(self) -> list[tuple[int, int, str]]:
        return sorted(self.chains)


def make_posterior(
    dataset: FractionDataset,
    n_steps: int = 3,
    n_actions: int = 10,
    burn_in: int = 500,
    thin: int = 5,
) -> PosteriorState:
    return PosteriorState(dataset, n_steps, n_actions, burn_in, thin)


def mh_sample(ps: PosteriorState, n: int, rng: np.random.Generator) -> list[ModelParams]:
    """Draw ``n`` thinned post-burn-in joint posterior samples.

    Each channel advances on its own child stream (spawned from ``rng`` in
    fixed key order), so the draw sequence of one channel is unaffected by
    the data held by any other.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    keys = ps.channel_keys()
    streams = rng.spawn(len(keys))
    per_channel: dict[tuple[int, int, str], list[np.ndarray]] = {}
    for key, stream in zip(keys, streams):
        chain = ps.chains[key]
        stats = ps._stats[key]
        if chain.steps_taken < ps.burn_in:
            _advance_chain(chain, stats, ps.burn_in - chain.steps_taken, ps.burn_in, stream)
        draws = []
        for _ in range(n):
            _advance_chain(chain, stats, ps.thin, ps.burn_in, stream)
            draws.append(np.exp(chain.log_shapes))
        per_channel[key] = draws
    out = []
    for d in range(n):
        table = np.zeros((ps.n_steps, ps.n_actions, 4))
        for (t, a, channel) in keys:
            pair = per_channel[(t, a, channel)][d]
            if channel == "psi":
                table[t - 1, a, PSI_L], table[t - 1, a, PSI_U] = pair
            else:
                table[t - 1, a, ETA_L], table[t - 1, a, ETA_U] = pair
        out.append(ModelParams(table))
    return out


def update_dataset(ps: PosteriorState, new_data: FractionDataset) -> PosteriorState:
    """Fold new observations in: union the datasets, warm-start the chains.

    Chain positions and tuned step sizes carry over, but acceptance
    statistics reset and burn-in (with adaptation) reruns against the new
    posterior before the next draws are emitted.
    """
    merged = PosteriorState(
        ps.dataset.union(new_data), ps.n_steps, ps.n_actions, ps.burn_in, ps.thin
    )
    for key, chain in ps.chains.items():
        merged.chains[key] = ChainState(
            log_shapes=chain.log_shapes.copy(), step_size=chain.step_size
        )
    return merged


def acceptance_rows(ps: PosteriorState) -> list[dict]:
    rows = []
    for key in ps.channel_keys():
        chain = ps.chains[key]
        t, a, channel = key
        rows.append(
            {
                "step": t,
                "action": a,
                "channel": channel,
                "n_obs": ps._stats[key].n,
                "proposed": chain.proposed,
                "accept_rate": chain.accepted / chain.proposed if chain.proposed else 0.0,
                "step_size": chain.step_size,
            }
        )
    return rows


def write_acceptance_csv(ps: PosteriorState, fh: IO[str]) -> None:
    writer = csv.writer(fh)
    writer.writerow(["step", "action", "channel", "n_obs", "proposed", "accept_rate", "step_size"])
    for row in acceptance_rows(ps):
        writer.writerow(
            [
                row["step"],
                row["action"],
                row["channel"],
                row["n_obs"],
                row["proposed"],
                repr(row["accept_rate"]),
                repr(row["step_size"]),
            ]
        )
