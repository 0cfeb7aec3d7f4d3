"""Brute-force oracles, experiment drivers, and corpus generation.

The enumeration oracles here are deliberately independent of the fast
log-space paths they certify: the dense-prior oracle enumerates hidden paths
and multiplies probabilities in linear space, so agreement with the forward
recursions is evidence, not tautology.  ``exact_joint_table`` is the single
source of truth for every derived expectation in the test suite.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coupling import MaskedSequence, PotentialGrid, joint_log_prob, sample_joint_latent
from .decoding import DecodeConfig, decode_block, decode_full
from .denoiser import PotentialSource, TemplateDistribution
from .errors import EnumerationBudgetError
from .hmm import HmmParams, VirtualEvidence
from .training import corrupt

ENUMERATION_BUDGET = 10**6
PATH_BUDGET = 1 << 16


def _hidden_paths(num_states: int, length: int) -> np.ndarray:
    if num_states ** length > PATH_BUDGET:
        raise EnumerationBudgetError(
            f"{num_states}^{length} hidden paths exceed the oracle budget")
    return np.array(list(itertools.product(range(num_states), repeat=length)),
                    dtype=np.int64).reshape(num_states ** length, length)


def _path_priors(params: HmmParams, paths: np.ndarray) -> np.ndarray:
    """Linear-space probability of each hidden path."""
    pi = np.exp(params.log_pi)
    a = np.exp(params.log_A)
    probs = pi[paths[:, 0]]
    for i in range(1, paths.shape[1]):
        probs = probs * a[paths[:, i - 1], paths[:, i]]
    return probs


def brute_force_sequence_probs(params: HmmParams, length: int) -> np.ndarray:
    """p(x) for every sequence, flattened row-major over positions.

    Pure linear-space enumeration over hidden paths; independent of the
    forward recursion.
    """
    vocab = params.vocab
    if vocab ** length > ENUMERATION_BUDGET:
        raise EnumerationBudgetError(
            f"{vocab}^{length} sequences exceed the enumeration budget")
    paths = _hidden_paths(params.num_states, length)
    priors = _path_priors(params, paths)
    b = np.exp(params.log_B)
    acc = np.zeros(vocab ** length)
    for path, weight in zip(paths, priors):
        vec = np.array([1.0])
        for i in range(length):
            vec = np.multiply.outer(vec, b[path[i]]).ravel()
        acc += weight * vec
    return acc


def brute_force_log_partition(params: HmmParams, evidence: VirtualEvidence) -> float:
    """Exhaustive log sum_x p(x) prod_i w_i(x_i)."""
    probs = brute_force_sequence_probs(params, evidence.length)
    weights = np.array([1.0])
    lin_w = np.exp(evidence.log_w)
    for i in range(evidence.length):
        weights = np.multiply.outer(weights, lin_w[i]).ravel()
    total = float(probs @ weights)
    with np.errstate(divide="ignore"):
        return float(np.log(total))


def exact_joint_table(model, state: MaskedSequence,
                      grid: PotentialGrid | None = None,
                      budget: int = ENUMERATION_BUDGET) -> dict[tuple[int, ...], float]:
    """Normalized probability table over completions of the masked positions.

    ``model`` is a dense prior (HmmParams) or a TemplateDistribution.  When a
    grid is given its rows at the masked positions multiply in.  Completions
    are keyed by token tuples in ascending position order.
    """
    masked = state.masked_positions()
    vocab = model.vocab
    if grid is not None and grid.length != state.length:
        raise ValueError("grid length does not match the state")
    if masked.size == 0:
        return {(): 1.0}
    if vocab ** masked.size > budget:
        raise EnumerationBudgetError(
            f"{vocab}^{masked.size} completions exceed the enumeration budget")

    completions = list(itertools.product(range(vocab), repeat=masked.size))
    weights = np.zeros(len(completions))

    if isinstance(model, TemplateDistribution):
        for idx, completion in enumerate(completions):
            full = state.tokens.copy()
            full[masked] = completion
            weights[idx] = model.prob_of(full)
    else:
        paths = _hidden_paths(model.num_states, state.length)
        priors = _path_priors(model, paths)
        b = np.exp(model.log_B)
        obs = state.observed_positions()
        for path, prior_p in zip(paths, priors):
            w = prior_p
            for i in obs:
                w = w * b[path[i], state.tokens[i]]
            vec = np.array([1.0])
            for i in masked:
                vec = np.multiply.outer(vec, b[path[i]]).ravel()
            weights += w * vec

    if grid is not None:
        factor = np.array([1.0])
        theta = np.exp(grid.log_theta)
        for i in masked:
            factor = np.multiply.outer(factor, theta[i]).ravel()
        weights = weights * factor

    total = weights.sum()
    if total <= 0.0:
        raise ValueError("the enumerated table has zero total mass")
    weights /= total
    return {completion: float(w) for completion, w in zip(completions, weights)}


def table_marginals(table: dict[tuple[int, ...], float], vocab: int) -> list[np.ndarray]:
    """Per-position marginals of an enumerated completion table."""
    if not table:
        raise ValueError("empty table")
    arity = len(next(iter(table)))
    out = [np.zeros(vocab) for _ in range(arity)]
    for completion, prob in table.items():
        for i, token in enumerate(completion):
            out[i][token] += prob
    return out


def misspec_gap(joint: dict[tuple[int, ...], float],
                marginals: list[np.ndarray]) -> float:
    """KL(joint || product of the given per-position marginals), in nats.

    Returns +inf explicitly when the joint has mass where the factorized
    product has none.
    """
    kl = 0.0
    for completion, prob in joint.items():
        if prob <= 0.0:
            continue
        q = 1.0
        for i, token in enumerate(completion):
            q *= marginals[i][token]
        if q <= 0.0:
            return float("inf")
        kl += prob * float(np.log(prob / q))
    return max(kl, 0.0)


def empirical_table(samples: np.ndarray) -> dict[tuple[int, ...], float]:
    rows, counts = np.unique(samples, axis=0, return_counts=True)
    n = samples.shape[0]
    return {tuple(int(t) for t in row): c / n for row, c in zip(rows, counts)}


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


@dataclass
class GapReport:
    kl_joint_vs_factorized: float
    kl_joint_vs_coupled: float
    incoherence_rate_factorized: float
    incoherence_rate_coupled: float
    exact_incoherence_factorized: float
    exact_incoherence_coupled: float
    instance: str

    def __post_init__(self):
        for name in ("kl_joint_vs_factorized", "kl_joint_vs_coupled"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("incoherence_rate_factorized", "incoherence_rate_coupled"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def _template_keys(dist: TemplateDistribution,
                   state: MaskedSequence) -> set[tuple[int, ...]]:
    masked = state.masked_positions()
    obs = state.observed_positions()
    keys = set()
    for row in dist.tokens:
        if np.any(row[obs] != state.tokens[obs]):
            continue
        keys.add(tuple(int(t) for t in row[masked]))
    return keys


def _incoherence_exact(table: dict[tuple[int, ...], float],
                       dist: TemplateDistribution,
                       state: MaskedSequence) -> float:
    keys = _template_keys(dist, state)
    return 1.0 - sum(table.get(k, 0.0) for k in keys)


def _incoherence_rate(samples: np.ndarray, dist: TemplateDistribution,
                      state: MaskedSequence) -> float:
    keys = _template_keys(dist, state)
    miss = sum(1 for row in samples if tuple(int(t) for t in row) not in keys)
    return miss / samples.shape[0]


def gap_experiment(prior: HmmParams, source: PotentialSource,
                   dist: TemplateDistribution, samples: int,
                   rng: np.random.Generator) -> GapReport:
    """Exact one-shot KL gaps against the data law, plus incoherence rates.

    One-shot means: all positions masked and decided in a single parallel
    step.  The factorized law is the grid itself; the coupled law multiplies
    the prior in and renormalizes.  Monte-Carlo incoherence counts samples
    matching no template.
    """
    state = MaskedSequence.fully_masked(dist.length)
    grid = source.potentials(state)

    data_table = exact_joint_table(dist, state)
    marginal_rows = [np.exp(grid.log_theta[i]) for i in range(dist.length)]
    kl_factorized = misspec_gap(data_table, marginal_rows)

    coupled_table = exact_joint_table(prior, state, grid)
    kl_coupled = 0.0
    for key, prob in data_table.items():
        if prob <= 0:
            continue
        q = coupled_table.get(key, 0.0)
        if q <= 0:
            kl_coupled = float("inf")
            break
        kl_coupled += prob * float(np.log(prob / q))
    kl_coupled = max(kl_coupled, 0.0)

    factorized_table = {
        completion: float(np.prod([marginal_rows[i][t]
                                   for i, t in enumerate(completion)]))
        for completion in coupled_table
    }

    all_positions = state.masked_positions()
    coupled_samples = sample_joint_latent(prior, state, grid, all_positions,
                                          1.0, rng, size=samples)
    factor_samples = np.stack([
        rng.choice(dist.vocab, size=samples, p=row / row.sum())
        for row in marginal_rows
    ], axis=1)

    return GapReport(
        kl_joint_vs_factorized=kl_factorized,
        kl_joint_vs_coupled=kl_coupled,
        incoherence_rate_factorized=_incoherence_rate(factor_samples, dist, state),
        incoherence_rate_coupled=_incoherence_rate(coupled_samples, dist, state),
        exact_incoherence_factorized=_incoherence_exact(factorized_table, dist, state),
        exact_incoherence_coupled=_incoherence_exact(coupled_table, dist, state),
        instance=(f"templates={dist.tokens.shape[0]} L={dist.length} "
                  f"V={dist.vocab} N={prior.num_states} samples={samples}"),
    )


@dataclass
class CllCurve:
    """Mean conditional log-likelihood per mask-ratio bin, both decoders."""

    bin_edges: np.ndarray           # (num_bins + 1,) covering (0, 1]
    counts: np.ndarray              # (num_bins,)
    baseline_mean: np.ndarray       # (num_bins,) nan where count == 0
    coupled_mean: np.ndarray        # (num_bins,)

    def reported_bins(self) -> np.ndarray:
        return np.flatnonzero(self.counts > 0)

    def crossover_bin(self) -> int | None:
        """First populated bin where the coupled mean drops below baseline."""
        for i in self.reported_bins():
            if self.coupled_mean[i] < self.baseline_mean[i]:
                return int(i)
        return None

    def rows(self) -> list[dict]:
        out = []
        for i in range(self.counts.shape[0]):
            if self.counts[i] == 0:
                continue
            out.append({
                "bin_lo": float(self.bin_edges[i]),
                "bin_hi": float(self.bin_edges[i + 1]),
                "count": int(self.counts[i]),
                "baseline_cll": float(self.baseline_mean[i]),
                "coupled_cll": float(self.coupled_mean[i]),
            })
        return out


def cll_curve(prior: HmmParams, source: PotentialSource, heldout,
              draws_per_sequence: int, rng: np.random.Generator,
              bin_width: float = 0.05) -> CllCurve:
    """Corrupt held-out sequences at random noise levels and compare the
    conditional log-likelihood of the ground truth under the factorized rows
    against the coupled law, binned by realized mask ratio."""
    num_bins = int(round(1.0 / bin_width))
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    counts = np.zeros(num_bins, dtype=np.int64)
    base_sum = np.zeros(num_bins)
    coup_sum = np.zeros(num_bins)

    for x0 in heldout:
        x0 = np.asarray(x0, dtype=np.int64)
        for _ in range(draws_per_sequence):
            t = float(rng.random())
            state = corrupt(x0, t, rng)
            masked = state.masked_positions()
            ratio = masked.size / x0.shape[0]
            if ratio == 0.0:
                continue
            grid = source.potentials(state)
            baseline = float(grid.log_theta[masked, x0[masked]].sum())
            coupled = joint_log_prob(prior, state, grid, x0[masked])
            b = min(num_bins - 1, int(np.ceil(ratio / bin_width)) - 1)
            counts[b] += 1
            base_sum[b] += baseline
            coup_sum[b] += coupled

    with np.errstate(invalid="ignore"):
        base_mean = np.where(counts > 0, base_sum / np.maximum(counts, 1), np.nan)
        coup_mean = np.where(counts > 0, coup_sum / np.maximum(counts, 1), np.nan)
    return CllCurve(edges, counts, base_mean, coup_mean)


@dataclass
class BenchRow:
    label: str
    baseline_mean_s: float
    baseline_std_s: float
    coupled_mean_s: float
    coupled_std_s: float

    @property
    def overhead(self) -> float:
        return self.coupled_mean_s / self.baseline_mean_s - 1.0

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["overhead"] = self.overhead
        return d


def _time_decode(prior, source, cfg: DecodeConfig, prompt, mode: str,
                 repetitions: int, warmup: int = 2) -> tuple[float, float]:
    run = decode_block if mode == "block" else decode_full
    for _ in range(warmup):
        run(prior, source, cfg, prompt)
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        run(prior, source, cfg, prompt)
        times.append(time.perf_counter() - start)
    arr = np.array(times)
    return float(arr.mean()), float(arr.std())


def bench_overhead(prior: HmmParams, source: PotentialSource,
                   configs: list[tuple[str, DecodeConfig, str]],
                   prompt: np.ndarray | None = None,
                   repetitions: int = 20) -> list[BenchRow]:
    """Wall time of coupled decoding versus the gamma=0 baseline.

    ``configs`` holds (label, coupled config, mode) cells; the baseline is
    the identical config with the activation gate forced shut.  Cells run
    sequentially, single-threaded, with warmup before timing.
    """
    rows = []
    for label, cfg, mode in configs:
        base_cfg = DecodeConfig(**{**cfg.__dict__, "gamma": 0.0})
        base_mean, base_std = _time_decode(prior, source, base_cfg, prompt,
                                           mode, repetitions)
        coup_mean, coup_std = _time_decode(prior, source, cfg, prompt,
                                           mode, repetitions)
        rows.append(BenchRow(label, base_mean, base_std, coup_mean, coup_std))
    return rows


@dataclass
class CorpusSpec:
    """Synthetic corpus description: templates or a token-level chain."""

    vocab: int
    length: int
    size: int
    templates: list[tuple[list[int], float]] | None = None
    markov_init: list[float] | None = None
    markov_transition: list[list[float]] | None = None
    heldout_fraction: float = 0.0
    prompt_len: int = 0

    def __post_init__(self):
        if self.templates is None and self.markov_init is None:
            raise ValueError("need templates or a markov generator")
        if self.templates is not None and self.markov_init is not None:
            raise ValueError("templates and markov generator are exclusive")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ValueError("heldout fraction must lie in [0, 1)")


@dataclass
class CorpusRecord:
    id: str
    tokens: np.ndarray
    split: str
    prompt_len: int = 0


def gen_corpus(spec: CorpusSpec, rng: np.random.Generator,
               path: str | Path | None = None) -> tuple[list[CorpusRecord], dict]:
    """Sample a corpus; optionally write it as JSONL.  Returns (records, summary)."""
    records: list[CorpusRecord] = []
    if spec.templates is not None:
        rows = np.array([t for t, _ in spec.templates], dtype=np.int64)
        probs = np.array([p for _, p in spec.templates], dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != spec.length:
            raise ValueError("template length does not match the spec")
        probs = probs / probs.sum()
        choices = rng.choice(rows.shape[0], size=spec.size, p=probs)
        data = rows[choices]
    else:
        init = np.asarray(spec.markov_init, dtype=np.float64)
        trans = np.asarray(spec.markov_transition, dtype=np.float64)
        if init.shape != (spec.vocab,) or trans.shape != (spec.vocab, spec.vocab):
            raise ValueError("markov generator dimensions do not match the vocab")
        data = np.empty((spec.size, spec.length), dtype=np.int64)
        if spec.size:
            data[:, 0] = rng.choice(spec.vocab, size=spec.size, p=init / init.sum())
            cum = np.cumsum(trans / trans.sum(axis=1, keepdims=True), axis=1)
            for i in range(1, spec.length):
                u = rng.random(spec.size)
                data[:, i] = (cum[data[:, i - 1]] < u[:, None]).sum(axis=1)

    for i in range(spec.size):
        split = "heldout" if rng.random() < spec.heldout_fraction else "train"
        records.append(CorpusRecord(str(i), data[i], split, spec.prompt_len))

    summary: dict = {"size": spec.size, "vocab": spec.vocab, "length": spec.length}
    if spec.size:
        unigram = np.stack([
            np.bincount(data[:, i], minlength=spec.vocab) / spec.size
            for i in range(spec.length)
        ])
        summary["unigram_marginals"] = unigram.tolist()
        if spec.templates is not None:
            rows_arr = np.array([t for t, _ in spec.templates], dtype=np.int64)
            freqs = [
                float(np.all(data == row[None, :], axis=1).mean())
                for row in rows_arr
            ]
            summary["template_frequencies"] = freqs
    if path is not None:
        save_corpus(records, path)
    return records, summary


def save_corpus(records: list[CorpusRecord], path: str | Path) -> None:
    try:
        with open(path, "w") as fh:
            for rec in records:
                obj = {"id": rec.id, "tokens": [int(t) for t in rec.tokens],
                       "split": rec.split}
                if rec.prompt_len:
                    obj["prompt_len"] = rec.prompt_len
                fh.write(json.dumps(obj) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write corpus {path}: {exc}") from exc


def load_corpus(path: str | Path) -> list[CorpusRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(CorpusRecord(
                str(obj["id"]),
                np.array(obj["tokens"], dtype=np.int64),
                obj.get("split", "train"),
                int(obj.get("prompt_len", 0)),
            ))
    return records
