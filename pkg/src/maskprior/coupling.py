"""Coupling of per-position potentials with the structural prior.

The coupled law over completions of a masked window is the normalized
product of the prior and the factorized potential rows at the positions
being decided.  Observed positions enter as indicator evidence, masked
positions outside the current target set are marginalized (vacuous
evidence).  All three samplers draw from this law exactly at temperature 1
and implement different tractable sharpening schemes below it:

* ``sample_joint_latent``: draw the hidden path from its posterior, then
  sharpen only the per-position leaf-plus-potential categorical.
* ``sample_joint_ao``: resolve target positions one at a time from exact
  coupled token marginals, sharpened individually, in a heuristic order.
* ``sample_alg1_simple``: sharpen the potential rows up front, leave the
  prior untouched, and sample the resulting coupled law at temperature 1.

Exact renormalization of the full mixture under exponentiation is
intractable, which is why no exact global temperature path exists.
"""

from __future__ import annotations

from dataclasses import InitVar, dataclass

import numpy as np

from .errors import ContradictionError
from .hmm import (
    OBSERVED,
    POTENTIAL,
    VACUOUS,
    HmmParams,
    VirtualEvidence,
    hmm_log_likelihood,
    hmm_log_partition,
    hmm_sample_conditional,
    hmm_token_posteriors,
)
from .numerics import NEG_INF, log_normalize, logsumexp, sample_rows

_GRID_TOL = 1e-6

HEURISTICS = ("confidence", "margin", "entropy", "random",
              "fixed-left-to-right", "fixed-right-to-left")


@dataclass
class PotentialGrid:
    """Per-position categorical log-potentials, stored row-normalized."""

    log_theta: np.ndarray  # (L, V)
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool = True):
        if not validate:
            return
        self.log_theta = np.asarray(self.log_theta, dtype=np.float64)
        if self.log_theta.ndim != 2:
            raise ValueError("log_theta must be (L, V)")
        if not np.all(np.isfinite(self.log_theta)):
            raise ValueError("potential entries must be finite")
        sums = np.exp(logsumexp(self.log_theta, axis=1))
        if np.any(np.abs(sums - 1.0) > _GRID_TOL):
            worst = float(np.max(np.abs(sums - 1.0)))
            raise ValueError(f"grid rows must sum to 1 within {_GRID_TOL} "
                             f"(off by {worst:.3e}); normalize first")
        self.log_theta.setflags(write=False)

    @property
    def length(self) -> int:
        return self.log_theta.shape[0]

    @property
    def vocab(self) -> int:
        return self.log_theta.shape[1]

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "PotentialGrid":
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs < 0):
            raise ValueError("probabilities must be nonnegative")
        with np.errstate(divide="ignore"):
            return cls(log_normalize(np.log(np.maximum(probs, 1e-300)), axis=1))

    @classmethod
    def from_unnormalized(cls, log_values: np.ndarray) -> "PotentialGrid":
        """Accept arbitrary finite log-potentials; rows are renormalized."""
        return cls(log_normalize(np.asarray(log_values, dtype=np.float64), axis=1))

    @classmethod
    def uniform(cls, length: int, vocab: int) -> "PotentialGrid":
        return cls(np.full((length, vocab), -np.log(vocab)))

    def sharpen(self, temperature: float) -> "PotentialGrid":
        """Row-wise theta^(1/temperature), renormalized."""
        if not 0.0 < temperature <= 1.0:
            raise ValueError("temperature must lie in (0, 1]")
        if temperature == 1.0:
            return self
        return PotentialGrid(log_normalize(self.log_theta / temperature, axis=1))


@dataclass
class MaskedSequence:
    """Token vector with mask flags; token values under the mask are ignored."""

    tokens: np.ndarray  # (L,) int64
    mask: np.ndarray    # (L,) bool, True = masked

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.tokens.ndim != 1 or self.tokens.shape != self.mask.shape:
            raise ValueError("tokens and mask must be equal-length vectors")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def mask_ratio(self) -> float:
        return float(self.mask.mean()) if self.length else 0.0

    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def observed_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    @classmethod
    def fully_masked(cls, length: int) -> "MaskedSequence":
        return cls(np.zeros(length, dtype=np.int64), np.ones(length, dtype=bool))

    @classmethod
    def observed(cls, tokens: np.ndarray) -> "MaskedSequence":
        tokens = np.asarray(tokens, dtype=np.int64)
        return cls(tokens, np.zeros(tokens.shape[0], dtype=bool))

    def with_observation(self, positions: np.ndarray, tokens: np.ndarray) -> "MaskedSequence":
        new_tokens = self.tokens.copy()
        new_mask = self.mask.copy()
        new_tokens[positions] = tokens
        new_mask[positions] = False
        return MaskedSequence(new_tokens, new_mask)

    def slice(self, lo: int, hi: int) -> "MaskedSequence":
        return MaskedSequence(self.tokens[lo:hi].copy(), self.mask[lo:hi].copy())


def make_evidence(state: MaskedSequence, grid: PotentialGrid,
                  target: np.ndarray) -> VirtualEvidence:
    """Bind a masked state and a potential grid into a virtual-evidence query.

    Observed positions become indicators, target positions carry the grid's
    log row, and masked positions outside the target set are vacuous
    (marginalized).  ``target`` must be a subset of the masked positions.
    """
    if grid.length != state.length:
        raise ValueError(f"grid length {grid.length} != state length {state.length}")
    target = np.asarray(target, dtype=np.int64)
    if target.size and (target.min() < 0 or target.max() >= state.length):
        raise ValueError("target position out of range")
    if np.any(~state.mask[target]):
        raise ValueError("target contains an unmasked position")

    length, vocab = grid.log_theta.shape
    log_w = np.zeros((length, vocab))
    kinds = np.full(length, VACUOUS, dtype=np.uint8)
    tokens = np.zeros(length, dtype=np.int64)

    obs = state.observed_positions()
    if obs.size:
        obs_tokens = state.tokens[obs]
        if np.any(obs_tokens < 0) or np.any(obs_tokens >= vocab):
            raise ValueError("observed token id out of vocabulary range")
        log_w[obs] = NEG_INF
        log_w[obs, obs_tokens] = 0.0
        kinds[obs] = OBSERVED
        tokens[obs] = obs_tokens

    log_w[target] = grid.log_theta[target]
    kinds[target] = POTENTIAL
    # invariants hold by construction
    return VirtualEvidence(log_w, kinds, tokens, validate=False)


def joint_log_prob(prior: HmmParams, state: MaskedSequence, grid: PotentialGrid,
                   completion: np.ndarray) -> float:
    """log of the coupled law of a completion of all masked positions.

    Computes log p(x_full) + sum_i log theta[i, x_i] - log Z with the target
    set equal to every masked position; exponentials over all completions of
    the masked set sum to one.
    """
    masked = state.masked_positions()
    completion = np.asarray(completion, dtype=np.int64)
    if completion.shape != masked.shape:
        raise ValueError(
            f"completion must cover exactly the {masked.size} masked positions")
    log_z = hmm_log_partition(prior, make_evidence(state, grid, masked))
    if log_z == NEG_INF:
        raise ContradictionError("coupled distribution has zero mass")
    full = state.tokens.copy()
    full[masked] = completion
    value = hmm_log_likelihood(prior, full)
    value += float(grid.log_theta[masked, completion].sum())
    return value - log_z


def sample_joint_latent(prior: HmmParams, state: MaskedSequence,
                        grid: PotentialGrid, target: np.ndarray, tau: float,
                        rng: np.random.Generator,
                        size: int | None = None) -> np.ndarray:
    """Latent-path sampling of the coupled law, sharpening only the leaves.

    Returns tokens for the target positions (in ascending position order).
    At tau == 1 the law equals the exact coupled conditional restricted to
    the target set.
    """
    target = _checked_target(state, target)
    evidence = make_evidence(state, grid, target)
    draws = hmm_sample_conditional(prior, evidence, tau, rng, size=size)
    return draws[..., target]


def sample_alg1_simple(prior: HmmParams, state: MaskedSequence,
                       grid: PotentialGrid, target: np.ndarray, tau: float,
                       rng: np.random.Generator,
                       size: int | None = None) -> np.ndarray:
    """Sharpen the potential rows only, then sample the coupled law exactly.

    The prior is left untouched; the grid is raised to 1/tau row-wise and
    renormalized, and the resulting coupled conditional is sampled at
    temperature 1.
    """
    target = _checked_target(state, target)
    evidence = make_evidence(state, grid.sharpen(tau), target)
    draws = hmm_sample_conditional(prior, evidence, 1.0, rng, size=size)
    return draws[..., target]


def _checked_target(state: MaskedSequence, target: np.ndarray) -> np.ndarray:
    target = np.unique(np.asarray(target, dtype=np.int64))
    if target.size == 0:
        raise ValueError("target set must be nonempty")
    if np.any(~state.mask[target]):
        raise ValueError("target contains an unmasked position")
    return target


def heuristic_order_scores(rows: np.ndarray, heuristic: str) -> np.ndarray:
    """Per-row selection score; larger always means 'pick first'."""
    if heuristic == "confidence":
        return rows.max(axis=1)
    if heuristic == "margin":
        top2 = np.sort(rows, axis=1)[:, -2:]
        return top2[:, 1] - top2[:, 0]
    if heuristic == "entropy":
        safe = np.maximum(rows, 1e-300)
        return (safe * np.log(safe)).sum(axis=1)  # negated entropy
    raise ValueError(f"unknown scored heuristic {heuristic!r}")


def _pick_position(undecided: np.ndarray, marginals: np.ndarray, heuristic: str,
                   rng: np.random.Generator) -> int:
    """Choose the next position among ``undecided``; ties go to the lowest index."""
    if heuristic == "fixed-left-to-right":
        return int(undecided.min())
    if heuristic == "fixed-right-to-left":
        return int(undecided.max())
    if heuristic == "random":
        return int(rng.choice(undecided))
    scores = heuristic_order_scores(marginals, heuristic)
    best = np.argmax(scores)  # argmax takes the first maximum: lowest index
    return int(undecided[best])


def sample_joint_ao(prior: HmmParams, state: MaskedSequence, grid: PotentialGrid,
                    target: np.ndarray, tau: float, heuristic: str,
                    rng: np.random.Generator,
                    size: int | None = None) -> np.ndarray:
    """Any-order sequential sampling from exact coupled token marginals.

    Repeatedly computes the exact coupled marginal of every undecided target
    position (one posterior pass), picks the next position by the heuristic,
    samples its token from the tau-sharpened marginal, clamps it as observed
    and continues.  At tau == 1 the induced joint law equals the exact
    coupled conditional for any order.

    Batched calls group samples by their partially decided context, so the
    number of posterior passes grows with the number of distinct contexts
    rather than the number of samples.  Order decisions under the ``random``
    heuristic are shared within a context group.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError("temperature must lie in (0, 1]")
    if heuristic not in HEURISTICS:
        raise ValueError(f"unknown heuristic {heuristic!r}")
    target = _checked_target(state, target)
    squeeze = size is None
    count = 1 if squeeze else int(size)
    if count < 1:
        raise ValueError("size must be positive")

    out = np.empty((count, target.size), dtype=np.int64)
    col_of = {int(pos): col for col, pos in enumerate(target)}

    # work items: (masked state with decided targets observed, sample indices)
    work = [(state, np.arange(count))]
    while work:
        cur_state, idx = work.pop()
        undecided = np.array([p for p in target if cur_state.mask[p]], dtype=np.int64)
        if undecided.size == 0:
            continue
        evidence = make_evidence(cur_state, grid, undecided)
        rows, _ = hmm_token_posteriors(prior, evidence)
        pos = _pick_position(undecided, rows[undecided], heuristic, rng)
        with np.errstate(divide="ignore"):
            sharp = np.exp(log_normalize(np.log(np.maximum(rows[pos], 1e-300)) / tau))
        draws = sample_rows(rng, np.broadcast_to(sharp, (idx.size, sharp.shape[0])))
        out[idx, col_of[pos]] = draws
        for token in np.unique(draws):
            sub = idx[draws == token]
            next_state = cur_state.with_observation(
                np.array([pos]), np.array([token]))
            work.append((next_state, sub))
    return out[0] if squeeze else out
