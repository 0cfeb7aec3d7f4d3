"""Stand-ins for the frozen backbone that produces factorized potentials.

Every source maps a masked state to a rectangular grid with one independent
row per position; that structural restriction is the whole point of the
coupling layer.  Two concrete sources are provided, an exact-marginal oracle
over a synthetic template distribution (the strongest possible factorized
baseline) and a count-based learner, plus a bit-exact loader for precomputed
potential files so external logits can be consumed without any model code.

Sources are immutable after construction; potential queries are pure.
"""

from __future__ import annotations

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import binio
from .coupling import MaskedSequence, PotentialGrid
from .errors import ContradictionError, FormatError

log = logging.getLogger(__name__)

POTENTIAL_MAGIC = b"CODDPOT1"
DEFAULT_SMOOTHING = 1e-6

_ROW_TOL = 1e-6


@dataclass
class TemplateDistribution:
    """Finite mixture of full sequences; the synthetic ground truth."""

    tokens: np.ndarray  # (T, L) int64
    probs: np.ndarray   # (T,)
    vocab: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.probs.shape[0]:
            raise ValueError("need one probability per template row")
        if np.any(self.probs <= 0):
            raise ValueError("template probabilities must be positive")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("template probabilities must sum to 1")
        if np.any(self.tokens < 0) or np.any(self.tokens >= self.vocab):
            raise ValueError("template token out of vocabulary range")
        self.tokens.setflags(write=False)
        self.probs.setflags(write=False)

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def from_corpus(cls, corpus: np.ndarray, vocab: int) -> "TemplateDistribution":
        """Empirical distribution over the distinct rows of a corpus."""
        corpus = np.asarray(corpus, dtype=np.int64)
        rows, counts = np.unique(corpus, axis=0, return_counts=True)
        return cls(rows, counts / counts.sum(), vocab)

    def consistent(self, state: MaskedSequence) -> np.ndarray:
        obs = state.observed_positions()
        if obs.size == 0:
            return np.ones(self.tokens.shape[0], dtype=bool)
        return np.all(self.tokens[:, obs] == state.tokens[obs][None, :], axis=1)

    def prob_of(self, assignment: np.ndarray) -> float:
        hits = np.all(self.tokens == np.asarray(assignment)[None, :], axis=1)
        return float(self.probs[hits].sum())

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.choice(self.tokens.shape[0], size=size, p=self.probs)
        return self.tokens[idx]


class PotentialSource(ABC):
    """Interface of the frozen backbone: masked state in, factorized grid out."""

    @abstractmethod
    def potentials(self, state: MaskedSequence) -> PotentialGrid:
        ...


def _smooth_rows(rows: np.ndarray, eps: float) -> np.ndarray:
    vocab = rows.shape[1]
    return (rows + eps) / (rows.sum(axis=1, keepdims=True) + eps * vocab)


def oracle_potentials(dist: TemplateDistribution, state: MaskedSequence,
                      eps: float = DEFAULT_SMOOTHING) -> PotentialGrid:
    """Exact per-position conditionals of the template distribution.

    Row i is p(x_i | observed tokens), computed by enumerating consistent
    templates; this is the KL-optimal factorized approximation of the true
    conditional.  Observed positions get a near-indicator row.  All rows are
    eps-smoothed so the logs stay finite.
    """
    if state.length != dist.length:
        raise ValueError("state length does not match the template length")
    keep = dist.consistent(state)
    if not keep.any():
        raise ContradictionError("no template is consistent with the observations")
    weights = dist.probs[keep]
    temps = dist.tokens[keep]
    flat = (np.arange(dist.length)[None, :] * dist.vocab + temps).ravel()
    rows = np.bincount(
        flat,
        weights=np.repeat(weights, dist.length),
        minlength=dist.length * dist.vocab,
    ).reshape(dist.length, dist.vocab)
    obs = state.observed_positions()
    if obs.size:
        rows[obs] = 0.0
        rows[obs, state.tokens[obs]] = 1.0
    return PotentialGrid.from_probs(_smooth_rows(rows, eps))


class OracleSource(PotentialSource):
    """Exact-marginal source over a template distribution.

    A context no template matches would make the strict oracle refuse; a
    real backbone never does, so by default this wrapper answers such
    queries with the unconditional position marginals (observed positions
    still get indicator rows).  Pass strict=True to propagate the error.
    """

    def __init__(self, dist: TemplateDistribution, eps: float = DEFAULT_SMOOTHING,
                 strict: bool = False):
        self.dist = dist
        self.eps = eps
        self.strict = strict
        flat = (np.arange(dist.length)[None, :] * dist.vocab + dist.tokens).ravel()
        marginals = np.bincount(
            flat,
            weights=np.repeat(dist.probs, dist.length),
            minlength=dist.length * dist.vocab,
        ).reshape(dist.length, dist.vocab)
        self._fallback_rows = _smooth_rows(marginals, eps)

    def potentials(self, state: MaskedSequence) -> PotentialGrid:
        try:
            return oracle_potentials(self.dist, state, self.eps)
        except ContradictionError:
            if self.strict:
                raise
            rows = self._fallback_rows.copy()
            obs = state.observed_positions()
            if obs.size:
                rows[obs] = self.eps / (1.0 + self.eps * self.dist.vocab)
                rows[obs, state.tokens[obs]] = (1.0 + self.eps) / (
                    1.0 + self.eps * self.dist.vocab)
            return PotentialGrid.from_probs(rows)


class UniformSource(PotentialSource):
    """Uninformative backbone: every row uniform."""

    def __init__(self, vocab: int):
        self.vocab = vocab

    def potentials(self, state: MaskedSequence) -> PotentialGrid:
        return PotentialGrid.uniform(state.length, self.vocab)


class FixedGridSource(PotentialSource):
    """Returns the same grid regardless of the mask state."""

    def __init__(self, grid: PotentialGrid):
        self.grid = grid

    def potentials(self, state: MaskedSequence) -> PotentialGrid:
        if state.length != self.grid.length:
            raise ValueError("state length does not match the fixed grid")
        return self.grid


class CountSource(PotentialSource):
    """Nearest-observed-neighbor conditional frequency tables.

    For a masked position the row is the corpus conditional of its token
    given the closest observed token within the context radius (distance
    ties go left); with no observed neighbor in range it falls back to the
    position's unigram counts, and unseen contexts fall back the same way.
    """

    def __init__(self, pair_rows: dict, unigram: np.ndarray, radius: int, eps: float):
        self._pair = pair_rows          # (i, j) -> (V, V) rows over x_i given x_j
        self._unigram = unigram         # (L, V) smoothed rows
        self.radius = radius
        self.eps = eps

    @property
    def length(self) -> int:
        return self._unigram.shape[0]

    def potentials(self, state: MaskedSequence) -> PotentialGrid:
        if state.length != self.length:
            raise ValueError("state length does not match the trained tables")
        rows = np.empty_like(self._unigram)
        obs_mask = ~state.mask
        for i in range(self.length):
            if obs_mask[i]:
                row = np.zeros(self._unigram.shape[1])
                row[state.tokens[i]] = 1.0
                rows[i] = _smooth_rows(row[None, :], self.eps)[0]
                continue
            rows[i] = self._lookup(i, state)
        return PotentialGrid.from_probs(rows)

    def _lookup(self, i: int, state: MaskedSequence) -> np.ndarray:
        best = None
        for dist in range(1, self.radius + 1):
            for j in (i - dist, i + dist):
                if 0 <= j < self.length and not state.mask[j]:
                    best = j
                    break
            if best is not None:
                break
        if best is not None:
            table = self._pair.get((i, best))
            if table is not None:
                row = table[state.tokens[best]]
                if row.sum() > 0:
                    return _smooth_rows(row[None, :], self.eps)[0]
        return self._unigram[i]


def train_count_denoiser(corpus: np.ndarray, context_radius: int,
                         smoothing: float = DEFAULT_SMOOTHING) -> CountSource:
    """Fit per-position conditional frequency tables from a clean corpus."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.ndim != 2 or corpus.shape[0] == 0:
        raise ValueError("corpus must be a nonempty (num_sequences, L) array")
    if context_radius < 0:
        raise ValueError("context radius must be nonnegative")
    length = corpus.shape[1]
    vocab = int(corpus.max()) + 1

    unigram = np.zeros((length, vocab))
    for i in range(length):
        unigram[i] = np.bincount(corpus[:, i], minlength=vocab)
    unigram = _smooth_rows(unigram, smoothing)

    pair: dict[tuple[int, int], np.ndarray] = {}
    for i in range(length):
        for j in range(max(0, i - context_radius), min(length, i + context_radius + 1)):
            if j == i:
                continue
            counts = np.zeros((vocab, vocab))
            np.add.at(counts, (corpus[:, j], corpus[:, i]), 1.0)
            pair[(i, j)] = counts
    return CountSource(pair, unigram, context_radius, smoothing)


class PotentialRecord(NamedTuple):
    state: MaskedSequence
    grid: PotentialGrid
    truth: np.ndarray | None


def write_potentials(path: str | Path, records: list[PotentialRecord],
                     manifest_path: str | Path | None = None,
                     manifest_entries: list[dict] | None = None) -> None:
    """Write the CODDPOT1 cache (and optionally its JSONL manifest)."""
    if not records:
        raise ValueError("refusing to write an empty potential cache")
    length = records[0].state.length
    vocab = records[0].grid.vocab
    out = bytearray(POTENTIAL_MAGIC)
    out += binio.u32_bytes(len(records), length, vocab)
    for rec in records:
        if rec.state.length != length or rec.grid.vocab != vocab:
            raise ValueError("all records must share the same (L, V)")
        out += bytes(np.where(rec.state.mask, 1, 0).astype(np.uint8).tobytes())
        out += np.ascontiguousarray(rec.state.tokens, dtype="<u4").tobytes()
        if rec.truth is not None:
            out.append(1)
            out += np.ascontiguousarray(rec.truth, dtype="<u4").tobytes()
        else:
            out.append(0)
        out += binio.f32_bytes(rec.grid.log_theta)
    path = Path(path)
    try:
        path.write_bytes(bytes(out))
    except OSError as exc:
        raise OSError(f"failed to write potential cache {path}: {exc}") from exc

    if manifest_path is not None:
        entries = manifest_entries or [
            {"id": i, "source": "unknown", "split": "train"}
            for i in range(len(records))
        ]
        with open(manifest_path, "w") as fh:
            for entry in entries:
                fh.write(json.dumps(entry) + "\n")


def load_potentials(path: str | Path) -> list[PotentialRecord]:
    """Bit-exact decode of a CODDPOT1 cache.

    Rows whose (float32) log-potentials drift from sum 1 by more than 1e-6
    are renormalized in log space; the number of adjusted rows is logged.
    """
    cur = binio.Cursor(Path(path).read_bytes())
    cur.magic(POTENTIAL_MAGIC)
    count = cur.u32("record count")
    length = cur.u32("sequence length")
    vocab = cur.u32("vocab size")
    if length < 1 or vocab < 1 or length * vocab > 2**28:
        raise FormatError(f"implausible dimensions L={length}, V={vocab}", offset=12)
    records: list[PotentialRecord] = []
    adjusted = 0
    for idx in range(count):
        mask = np.frombuffer(cur.take(length, f"record {idx} mask"), dtype=np.uint8)
        if np.any(mask > 1):
            raise FormatError(f"record {idx}: mask byte not 0/1",
                              offset=cur.offset - length)
        tokens = np.frombuffer(cur.take(4 * length, f"record {idx} tokens"),
                               dtype="<u4").astype(np.int64)
        truth = None
        if cur.u8(f"record {idx} truth flag") == 1:
            truth = np.frombuffer(cur.take(4 * length, f"record {idx} truth"),
                                  dtype="<u4").astype(np.int64)
        raw = cur.f32_array(length * vocab, f"record {idx} potentials")
        log_theta = raw.astype(np.float64).reshape(length, vocab)
        logsums = _row_logsums(log_theta)
        bad = np.abs(np.exp(logsums) - 1.0) > _ROW_TOL
        if bad.any():
            adjusted += int(bad.sum())
            log_theta = log_theta.copy()
            log_theta[bad] -= logsums[bad, None]
        records.append(PotentialRecord(
            MaskedSequence(tokens, mask.astype(bool)),
            PotentialGrid(log_theta),
            truth,
        ))
    cur.expect_end()
    if adjusted:
        log.warning("renormalized %d unnormalized potential rows in %s",
                    adjusted, path)
    return records


def _row_logsums(log_theta: np.ndarray) -> np.ndarray:
    m = log_theta.max(axis=1, keepdims=True)
    return (np.log(np.exp(log_theta - m).sum(axis=1, keepdims=True)) + m)[:, 0]
