"""Forward corruption and prior optimization against frozen potentials.

The prior is trained to maximize the evidence-weighted conditional
log-likelihood of clean sequences given their corrupted versions, with the
backbone frozen: each training example carries a precomputed potential grid.
The gradient of the objective is a difference of two posterior-flow
expectations, one with the clean sequence clamped and one under the
partition-function evidence.  Two optimizers are provided:

* ``em``: difference-corrected flow statistics (numerator minus denominator
  counts, damped back toward the current row to stay positive), floored and
  renormalized.  Monotonicity is checked empirically; if an epoch decreases
  the objective the run falls back to ascent for the remaining epochs.
* ``ascent``: plain gradient steps on row logits (softmax reparameterization).

Flow accumulation is single-threaded here; seeded runs are bit-reproducible.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .coupling import MaskedSequence, PotentialGrid, make_evidence
from .denoiser import PotentialRecord, PotentialSource, write_potentials
from .errors import ContradictionError
from .hmm import HmmParams, VirtualEvidence, hmm_posteriors
from .numerics import floor_normalize

log = logging.getLogger(__name__)

T_MIN = 0.05            # clamp for the inverse-noise weight
_EM_DAMPING = 1.0       # damping scale on the denominator mass

WEIGHT_MODES = ("uniform", "inverse_t")
OPTIMIZER_MODES = ("em", "ascent")


@dataclass(frozen=True)
class NoiseDraw:
    """One corruption draw: the noise level exactly as drawn, and its mask."""

    t: float
    mask: np.ndarray


@dataclass
class TrainConfig:
    weight_mode: str = "inverse_t"
    optimizer_mode: str = "em"
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.5
    seed: int = 0
    window_length: int | None = None
    param_floor: float = 1e-6

    def __post_init__(self):
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.optimizer_mode not in OPTIMIZER_MODES:
            raise ValueError(f"optimizer_mode must be one of {OPTIMIZER_MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0.0 < self.param_floor < 0.1:
            raise ValueError("param_floor must lie in (0, 0.1)")


def noise_weight(t: float, weight_mode: str) -> float:
    if weight_mode == "uniform":
        return 1.0
    return 1.0 / max(t, T_MIN)


def corrupt(x0: np.ndarray, t: float, rng: np.random.Generator) -> MaskedSequence:
    """Mask every position independently with probability t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("noise level t must lie in [0, 1]")
    x0 = np.asarray(x0, dtype=np.int64)
    mask = rng.random(x0.shape[0]) < t
    return MaskedSequence(x0.copy(), mask)


class TrainExample(NamedTuple):
    x0: np.ndarray
    state: MaskedSequence
    grid: PotentialGrid
    t: float


def _example_terms(prior: HmmParams, example: TrainExample, weight_mode: str):
    """(weight, log joint prob) of one example, or None on contradiction."""
    from .coupling import joint_log_prob

    masked = example.state.masked_positions()
    w = noise_weight(example.t, weight_mode)
    if masked.size == 0:
        return w, 0.0
    try:
        value = joint_log_prob(prior, example.state, example.grid,
                               example.x0[masked])
    except ContradictionError:
        return None
    return w, value


def objective(prior: HmmParams, batch: Iterable[TrainExample],
              weight_mode: str = "inverse_t") -> float:
    """Mean evidence-weighted conditional log-likelihood of a batch.

    Fully unmasked examples contribute exactly zero; examples whose evidence
    contradicts the prior are skipped (and only counted), never fatal.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    for example in batch:
        terms = _example_terms(prior, example, weight_mode)
        if terms is None:
            continue
        w, value = terms
        total += w * value
    return total / len(batch)


@dataclass
class FlowStats:
    """Accumulated posterior flows in count space."""

    pi: np.ndarray
    trans: np.ndarray
    emis: np.ndarray

    @classmethod
    def zeros(cls, n: int, v: int) -> "FlowStats":
        return cls(np.zeros(n), np.zeros((n, n)), np.zeros((n, v)))

    def add(self, post, weight: float) -> None:
        self.pi += weight * post.state_marginals[0]
        if post.transition_flows.shape[0]:
            self.trans += weight * post.transition_flows.sum(axis=0)
        self.emis += weight * post.emission_flows.sum(axis=0)


def _batch_flows(prior: HmmParams, batch: list[TrainExample], weight_mode: str):
    """Numerator (clamped) and denominator (Z-evidence) flows plus objective."""
    n, v = prior.num_states, prior.vocab
    num = FlowStats.zeros(n, v)
    den = FlowStats.zeros(n, v)
    total = 0.0
    skipped = 0
    for example in batch:
        w = noise_weight(example.t, weight_mode) / len(batch)
        masked = example.state.masked_positions()
        if masked.size == 0:
            continue
        full = example.state.tokens.copy()
        full[masked] = example.x0[masked]
        try:
            clamped = hmm_posteriors(
                prior, VirtualEvidence.from_tokens(full, prior.vocab))
            free = hmm_posteriors(
                prior, make_evidence(example.state, example.grid, masked))
        except ContradictionError:
            skipped += 1
            continue
        num.add(clamped, w)
        den.add(free, w)
        theta_term = float(example.grid.log_theta[masked, example.x0[masked]].sum())
        total += w * (clamped.log_z + theta_term - free.log_z)
    return num, den, total, skipped


def objective_gradient(prior: HmmParams, batch: list[TrainExample],
                       weight_mode: str = "inverse_t"):
    """Gradient of the objective w.r.t. row logits at the current parameters.

    Rows are reparameterized through a softmax; the gradient of each row is
    the centered flow difference (numerator minus denominator counts).
    Returns arrays shaped like (log_pi, log_A, log_B).
    """
    num, den, _, _ = _batch_flows(prior, batch, weight_mode)

    def centered(diff: np.ndarray, probs: np.ndarray) -> np.ndarray:
        return diff - probs * diff.sum(axis=-1, keepdims=True)

    g_pi = centered(num.pi - den.pi, np.exp(prior.log_pi))
    g_a = centered(num.trans - den.trans, np.exp(prior.log_A))
    g_b = centered(num.emis - den.emis, np.exp(prior.log_B))
    return g_pi, g_a, g_b


def _ebw_row(num: np.ndarray, den: np.ndarray, current: np.ndarray,
             floor: float) -> np.ndarray:
    """Difference-corrected row update: (num - den + D * p) floored/normalized.

    The damping constant D is the denominator mass scaled by _EM_DAMPING,
    raised further when needed to keep every corrected count positive.
    """
    d = _EM_DAMPING * den.sum()
    diff = num - den
    with np.errstate(divide="ignore", invalid="ignore"):
        need = np.where(current > 0, (-diff) / np.maximum(current, 1e-300), 0.0)
    d = max(d, float(need.max()) * 1.05 + 1e-12)
    raw = diff + d * current
    raw = np.maximum(raw, 0.0)
    return floor_normalize(raw, floor)


def _em_step(prior: HmmParams, num: FlowStats, den: FlowStats,
             floor: float) -> HmmParams:
    n = prior.num_states
    pi = _ebw_row(num.pi, den.pi, np.exp(prior.log_pi), floor)
    a = np.stack([
        _ebw_row(num.trans[h], den.trans[h], np.exp(prior.log_A[h]), floor)
        for h in range(n)
    ])
    b = np.stack([
        _ebw_row(num.emis[h], den.emis[h], np.exp(prior.log_B[h]), floor)
        for h in range(n)
    ])
    return HmmParams(np.log(pi), np.log(a), np.log(b))


def _ascent_step(prior: HmmParams, batch: list[TrainExample], weight_mode: str,
                 learning_rate: float, floor: float) -> tuple[HmmParams, int]:
    num, den, _, skipped = _batch_flows(prior, batch, weight_mode)

    def centered(diff: np.ndarray, probs: np.ndarray) -> np.ndarray:
        return diff - probs * diff.sum(axis=-1, keepdims=True)

    g_pi = centered(num.pi - den.pi, np.exp(prior.log_pi))
    g_a = centered(num.trans - den.trans, np.exp(prior.log_A))
    g_b = centered(num.emis - den.emis, np.exp(prior.log_B))
    new_pi = _softmax_floor(prior.log_pi + learning_rate * g_pi, floor)
    new_a = np.stack([
        _softmax_floor(prior.log_A[h] + learning_rate * g_a[h], floor)
        for h in range(prior.num_states)
    ])
    new_b = np.stack([
        _softmax_floor(prior.log_B[h] + learning_rate * g_b[h], floor)
        for h in range(prior.num_states)
    ])
    return HmmParams(np.log(new_pi), np.log(new_a), np.log(new_b)), skipped


def _softmax_floor(logits: np.ndarray, floor: float) -> np.ndarray:
    shifted = logits - logits.max()
    return floor_normalize(np.exp(shifted), floor)


class EpochStats(NamedTuple):
    epoch: int
    objective: float
    skipped_items: int
    wall_ms: float
    mode: str


@dataclass
class TrainingHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    fallback_epoch: int | None = None
    initial_objective: float = float("nan")

    def objectives(self) -> list[float]:
        return [e.objective for e in self.epochs]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,objective,skipped_items,wall_ms\n")
            for e in self.epochs:
                fh.write(f"{e.epoch},{e.objective:.10f},{e.skipped_items},"
                         f"{e.wall_ms:.3f}\n")


def materialize_examples(dataset, source: PotentialSource,
                         rng: np.random.Generator,
                         prompt_lengths: list[int] | None = None) -> list[TrainExample]:
    """Draw one corruption per sequence and query the frozen source once.

    ``prompt_lengths`` marks per-sequence prefixes that are never masked
    (prompt positions stay observed context).
    """
    examples = []
    for i, x0 in enumerate(dataset):
        x0 = np.asarray(x0, dtype=np.int64)
        t = float(rng.random())
        state = corrupt(x0, t, rng)
        if prompt_lengths is not None and prompt_lengths[i] > 0:
            keep = state.mask.copy()
            keep[: prompt_lengths[i]] = False
            state = MaskedSequence(x0.copy(), keep)
        examples.append(TrainExample(x0, state, source.potentials(state), t))
    return examples


def train_prior(dataset, source: PotentialSource, config: TrainConfig,
                rng: np.random.Generator | None = None,
                num_states: int | None = None,
                prompt_lengths: list[int] | None = None,
                initial: HmmParams | None = None):
    """Optimize the prior on frozen potentials; returns (params, history).

    The corruption draws and potential grids are materialized once, so every
    epoch sees the same fixed data.  In ``em`` mode an epoch that lowers the
    objective by more than 1e-7 triggers a documented fallback to ascent
    mode for the remaining epochs.
    """
    dataset = [np.asarray(x, dtype=np.int64) for x in dataset]
    if not dataset:
        raise ValueError("empty dataset")
    length = dataset[0].shape[0]
    if any(x.shape[0] != length for x in dataset):
        raise ValueError("all sequences must share one window length")
    if config.window_length is not None and config.window_length != length:
        raise ValueError(
            f"dataset length {length} != configured window {config.window_length}")

    rng = rng if rng is not None else np.random.default_rng(config.seed)
    vocab = int(max(int(x.max()) for x in dataset)) + 1
    examples = materialize_examples(dataset, source, rng, prompt_lengths)
    vocab = max(vocab, examples[0].grid.vocab)

    n = num_states if num_states is not None else max(2, vocab)
    prior = initial if initial is not None else HmmParams.random(n, vocab, rng)

    history = TrainingHistory()
    history.initial_objective = objective(prior, examples, config.weight_mode)
    mode = config.optimizer_mode
    last = None
    for epoch in range(config.epochs):
        start = time.perf_counter()
        if mode == "em":
            num, den, _, skipped = _batch_flows(prior, examples, config.weight_mode)
            candidate = _em_step(prior, num, den, config.param_floor)
        else:
            candidate = prior
            order = rng.permutation(len(examples))
            skipped = 0
            for lo in range(0, len(order), config.batch_size):
                chunk = [examples[i] for i in order[lo:lo + config.batch_size]]
                candidate, chunk_skipped = _ascent_step(
                    candidate, chunk, config.weight_mode,
                    config.learning_rate, config.param_floor)
                skipped += chunk_skipped
        value = objective(candidate, examples, config.weight_mode)
        if mode == "em" and last is not None and value < last - 1e-7:
            log.warning("em epoch %d decreased the objective (%.9f -> %.9f); "
                        "falling back to ascent", epoch, last, value)
            history.fallback_epoch = epoch
            mode = "ascent"
            candidate, skipped = _ascent_step(
                prior, examples, config.weight_mode,
                config.learning_rate, config.param_floor)
            value = objective(candidate, examples, config.weight_mode)
        prior = candidate
        last = value
        if not np.isfinite(value):
            raise RuntimeError(
                f"non-finite objective at epoch {epoch}: {value!r}; "
                "check the offending batch for contradictory evidence")
        wall = (time.perf_counter() - start) * 1e3
        history.epochs.append(EpochStats(epoch, value, skipped, wall, mode))
    return prior, history


def precompute_potentials(dataset, source: PotentialSource,
                          draws_per_sequence: int, rng: np.random.Generator,
                          path: str | Path,
                          manifest_path: str | Path | None = None,
                          prompt_lengths: list[int] | None = None,
                          fixed_t: float | None = None) -> int:
    """Corrupt each sequence m times, query the source once per draw, and
    write the CODDPOT1 cache with ground truth attached.  Deterministic for a
    given generator seed.  ``fixed_t`` pins the noise level instead of
    drawing it.  Returns the record count."""
    if draws_per_sequence < 1:
        raise ValueError("need at least one draw per sequence")
    records = []
    entries = []
    for i, x0 in enumerate(dataset):
        x0 = np.asarray(x0, dtype=np.int64)
        for d in range(draws_per_sequence):
            t = float(rng.random()) if fixed_t is None else float(fixed_t)
            state = corrupt(x0, t, rng)
            if prompt_lengths is not None and prompt_lengths[i] > 0:
                keep = state.mask.copy()
                keep[: prompt_lengths[i]] = False
                state = MaskedSequence(x0.copy(), keep)
            records.append(PotentialRecord(state, source.potentials(state), x0))
            entries.append({"id": f"{i}:{d}", "source": type(source).__name__,
                            "split": "train"})
    write_potentials(path, records, manifest_path, entries)
    return len(records)
