"""Dense homogeneous hidden-Markov prior with virtual-evidence queries.

This is the fast path for the structural prior: a single (pi, A, B)
parameter set shared across positions, evaluated over windows of any length.
All state is kept in natural-log space; the forward and backward recursions
use max-shifted log-sum-exp realized as matrix products on shifted
exponentials, so hard zeros (-inf) propagate exactly.

``HmmParams`` instances are immutable after construction (their arrays are
marked read-only); the partition and posterior operations are pure and may be
called concurrently on a shared instance.  Sampling mutates only the caller's
generator, so parallel callers must hold independent generator streams.
"""

from __future__ import annotations

from dataclasses import InitVar, dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .errors import ContradictionError
from .numerics import NEG_INF, log_matvec, logsumexp, sample_rows

HMM_MAGIC = b"CODDHMM1"

# Evidence column tags.
OBSERVED = 0
POTENTIAL = 1
VACUOUS = 2

_ROW_TOL = 1e-9


def _check_log_rows(name: str, arr: np.ndarray) -> None:
    if np.any(np.isnan(arr)) or np.any(arr == np.inf):
        raise ValueError(f"{name} entries must be finite or -inf")
    sums = np.exp(logsumexp(arr, axis=-1))
    if np.any(np.abs(sums - 1.0) > _ROW_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValueError(f"{name} rows must exponentiate to 1 (off by {worst:.3e})")


@dataclass
class HmmParams:
    """Log-space (pi, A, B) of a homogeneous categorical-emission chain."""

    log_pi: np.ndarray
    log_A: np.ndarray
    log_B: np.ndarray
    _lin_A: np.ndarray | None = field(default=None, repr=False, compare=False)
    _lin_B: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.log_pi = np.asarray(self.log_pi, dtype=np.float64)
        self.log_A = np.asarray(self.log_A, dtype=np.float64)
        self.log_B = np.asarray(self.log_B, dtype=np.float64)
        n = self.log_pi.shape[0]
        if self.log_pi.ndim != 1 or self.log_A.shape != (n, n):
            raise ValueError("transition matrix shape must be (N, N)")
        if self.log_B.ndim != 2 or self.log_B.shape[0] != n:
            raise ValueError("emission matrix must have one row per state")
        _check_log_rows("pi", self.log_pi)
        _check_log_rows("A", self.log_A)
        _check_log_rows("B", self.log_B)
        for arr in (self.log_pi, self.log_A, self.log_B):
            arr.setflags(write=False)

    @property
    def num_states(self) -> int:
        return self.log_pi.shape[0]

    @property
    def vocab(self) -> int:
        return self.log_B.shape[1]

    def lin_A(self) -> np.ndarray:
        if self._lin_A is None:
            a = np.exp(self.log_A)
            a.setflags(write=False)
            self._lin_A = a
        return self._lin_A

    def lin_B(self) -> np.ndarray:
        if self._lin_B is None:
            b = np.exp(self.log_B)
            b.setflags(write=False)
            self._lin_B = b
        return self._lin_B

    @classmethod
    def random(cls, num_states: int, vocab: int, rng: np.random.Generator,
               concentration: float = 1.1) -> "HmmParams":
        """Dirichlet-initialized parameters; breaks symmetry, no zero entries."""
        pi = rng.dirichlet(np.full(num_states, concentration))
        a = rng.dirichlet(np.full(num_states, concentration), size=num_states)
        b = rng.dirichlet(np.full(vocab, concentration), size=num_states)
        with np.errstate(divide="ignore"):
            return cls(np.log(pi), np.log(a), np.log(b))

    @classmethod
    def uniform(cls, num_states: int, vocab: int) -> "HmmParams":
        return cls(
            np.full(num_states, -np.log(num_states)),
            np.full((num_states, num_states), -np.log(num_states)),
            np.full((num_states, vocab), -np.log(vocab)),
        )


@dataclass
class VirtualEvidence:
    """Per-position log weight rows over the vocabulary.

    Each position is tagged OBSERVED (indicator row), POTENTIAL (finite log
    weights) or VACUOUS (all-zero row, i.e. weight one everywhere).  The
    weights need not normalize; the partition query absorbs any constant.
    """

    log_w: np.ndarray          # (L, V)
    kinds: np.ndarray          # (L,) uint8
    tokens: np.ndarray         # (L,) int64; meaningful where kind == OBSERVED
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool = True):
        if not validate:
            # trusted internal construction: invariants hold by construction
            return
        self.log_w = np.asarray(self.log_w, dtype=np.float64)
        self.kinds = np.asarray(self.kinds, dtype=np.uint8)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.log_w.ndim != 2:
            raise ValueError("log_w must be (L, V)")
        length = self.log_w.shape[0]
        if self.kinds.shape != (length,) or self.tokens.shape != (length,):
            raise ValueError("kinds/tokens must have one entry per position")
        if np.any(np.isnan(self.log_w)) or np.any(self.log_w == np.inf):
            raise ValueError("evidence weights must be finite or -inf")
        if np.any(~np.isfinite(self.log_w[self.kinds == POTENTIAL])):
            raise ValueError("potential rows must be finite")
        vac = self.kinds == VACUOUS
        if np.any(self.log_w[vac] != 0.0):
            raise ValueError("vacuous rows must be identically zero")
        obs = np.flatnonzero(self.kinds == OBSERVED)
        if obs.size:
            toks = self.tokens[obs]
            if np.any(toks < 0) or np.any(toks >= self.log_w.shape[1]):
                raise ValueError("observed token id out of vocabulary range")
            rows = self.log_w[obs]
            if np.any(rows[np.arange(obs.size), toks] != 0.0):
                raise ValueError("observed rows must carry log-weight 0 at the token")
            masked_rows = rows.copy()
            masked_rows[np.arange(obs.size), toks] = NEG_INF
            if np.any(masked_rows != NEG_INF):
                raise ValueError("observed rows must be -inf off the token")

    @property
    def length(self) -> int:
        return self.log_w.shape[0]

    @property
    def vocab(self) -> int:
        return self.log_w.shape[1]

    @classmethod
    def vacuous(cls, length: int, vocab: int) -> "VirtualEvidence":
        return cls(
            np.zeros((length, vocab)),
            np.full(length, VACUOUS, dtype=np.uint8),
            np.zeros(length, dtype=np.int64),
        )

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, vocab: int) -> "VirtualEvidence":
        """Indicator evidence fixing every position to the given token."""
        tokens = np.asarray(tokens, dtype=np.int64)
        length = tokens.shape[0]
        log_w = np.full((length, vocab), NEG_INF)
        log_w[np.arange(length), tokens] = 0.0
        return cls(log_w, np.full(length, OBSERVED, dtype=np.uint8), tokens)

    def observe(self, position: int, token: int) -> "VirtualEvidence":
        """Copy with one position replaced by indicator evidence."""
        if not 0 <= token < self.vocab:
            raise ValueError("observed token id out of vocabulary range")
        log_w = self.log_w.copy()
        log_w[position] = NEG_INF
        log_w[position, token] = 0.0
        kinds = self.kinds.copy()
        kinds[position] = OBSERVED
        tokens = self.tokens.copy()
        tokens[position] = token
        return VirtualEvidence(log_w, kinds, tokens, validate=False)


def _check_dims(params: HmmParams, evidence: VirtualEvidence) -> None:
    if evidence.vocab != params.vocab:
        raise ValueError(
            f"evidence vocab {evidence.vocab} does not match prior vocab {params.vocab}"
        )
    if evidence.length < 1:
        raise ValueError("evidence must cover at least one position")


def _local_log_expectations(params: HmmParams, log_w: np.ndarray) -> np.ndarray:
    """log E_{B[h]}[w_i] for every (position, state): log sum_v exp(B + w)."""
    shift = np.max(log_w, axis=1)
    safe = np.where(np.isfinite(shift), shift, 0.0)
    lin_w = np.exp(log_w - safe[:, None])
    with np.errstate(divide="ignore"):
        log_e = np.log(lin_w @ params.lin_B().T) + shift[:, None]
    log_e[shift == NEG_INF] = NEG_INF
    return log_e  # (L, N)


def _forward(params: HmmParams, log_e: np.ndarray):
    """Arrival (pre-emission) and alpha (post-emission) log messages."""
    length = log_e.shape[0]
    arrival = np.empty_like(log_e)
    alpha = np.empty_like(log_e)
    arrival[0] = params.log_pi
    alpha[0] = arrival[0] + log_e[0]
    lin_a = params.lin_A()
    for i in range(1, length):
        arrival[i] = log_matvec(lin_a, alpha[i - 1])
        alpha[i] = arrival[i] + log_e[i]
    return arrival, alpha


def _backward(params: HmmParams, log_e: np.ndarray) -> np.ndarray:
    length = log_e.shape[0]
    beta = np.empty_like(log_e)
    beta[-1] = 0.0
    lin_at = np.ascontiguousarray(params.lin_A().T)
    for i in range(length - 2, -1, -1):
        beta[i] = log_matvec(lin_at, log_e[i + 1] + beta[i + 1])
    return beta


def hmm_log_partition(params: HmmParams, evidence: VirtualEvidence) -> float:
    """log sum_x p(x) * prod_i w_i(x_i), a single forward pass.

    Returns -inf when the evidence annihilates every sequence; that is a
    legitimate value, not an error.
    """
    _check_dims(params, evidence)
    log_e = _local_log_expectations(params, evidence.log_w)
    alpha = params.log_pi + log_e[0]
    lin_a = params.lin_A()
    for i in range(1, evidence.length):
        alpha = log_matvec(lin_a, alpha) + log_e[i]
    return logsumexp(alpha)


def hmm_log_likelihood(params: HmmParams, tokens: np.ndarray) -> float:
    """log p(x) of a fully observed window."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.shape[0] < 1:
        raise ValueError("tokens must be a nonempty vector")
    if np.any(tokens < 0) or np.any(tokens >= params.vocab):
        raise ValueError("token id out of vocabulary range")
    log_e = params.log_B[:, tokens].T  # (L, N)
    alpha = params.log_pi + log_e[0]
    lin_a = params.lin_A()
    for i in range(1, tokens.shape[0]):
        alpha = log_matvec(lin_a, alpha) + log_e[i]
    return logsumexp(alpha)


@dataclass
class HmmPosteriors:
    """Evidence-conditioned marginals and flows (EM sufficient statistics)."""

    state_marginals: np.ndarray     # (L, N)
    transition_flows: np.ndarray    # (L-1, N, N)
    emission_flows: np.ndarray      # (L, N, V)
    log_z: float


def hmm_posteriors(params: HmmParams, evidence: VirtualEvidence) -> HmmPosteriors:
    """Forward-backward under virtual evidence.

    Raises ContradictionError when the evidence has zero total mass.
    """
    _check_dims(params, evidence)
    log_e = _local_log_expectations(params, evidence.log_w)
    arrival, alpha = _forward(params, log_e)
    log_z = logsumexp(alpha[-1])
    if log_z == NEG_INF:
        raise ContradictionError("evidence contradicts the prior (Z = 0)")
    beta = _backward(params, log_e)

    length, n = log_e.shape
    state = np.exp(alpha + beta - log_z)

    trans = np.empty((length - 1, n, n))
    for i in range(length - 1):
        expo = (
            alpha[i][:, None]
            + params.log_A
            + (log_e[i + 1] + beta[i + 1])[None, :]
            - log_z
        )
        trans[i] = np.exp(expo)

    # exponent of each term is <= 0 because the terms sum to 1 per position
    emis = np.exp(
        (arrival + beta - log_z)[:, :, None]
        + params.log_B[None, :, :]
        + evidence.log_w[:, None, :]
    )
    return HmmPosteriors(state, trans, emis, log_z)


def hmm_token_posteriors(params: HmmParams, evidence: VirtualEvidence) -> tuple[np.ndarray, float]:
    """Exact per-position token marginals of the evidence-weighted law.

    Returns (rows, log_z) where rows is (L, V) in linear space, each row
    summing to one.  Observed positions come back as indicator rows.
    """
    _check_dims(params, evidence)
    log_e = _local_log_expectations(params, evidence.log_w)
    arrival, alpha = _forward(params, log_e)
    log_z = logsumexp(alpha[-1])
    if log_z == NEG_INF:
        raise ContradictionError("evidence contradicts the prior (Z = 0)")
    beta = _backward(params, log_e)
    outer = arrival + beta  # (L, N)
    shift = np.max(outer, axis=1, keepdims=True)
    lin = np.exp(outer - shift) @ params.lin_B()  # (L, V)
    with np.errstate(divide="ignore"):
        log_rows = np.log(lin) + shift + evidence.log_w - log_z
    rows = np.exp(log_rows)
    rows /= rows.sum(axis=1, keepdims=True)
    return rows, log_z


def hmm_sample_conditional(
    params: HmmParams,
    evidence: VirtualEvidence,
    leaf_temperature: float,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """Exact conditional sampling: backward pass, then top-down draws.

    The hidden chain is drawn from its exact evidence posterior; tokens are
    then drawn per position from the temperature-sharpened leaf-plus-weight
    categorical.  Temperature touches only that conditional component, never
    pi or A, so at leaf_temperature == 1 the output law is exactly the
    evidence-conditioned joint.  Observed positions return their token as-is.

    With ``size=None`` returns one (L,) vector, otherwise a (size, L) array
    drawn from the same backward pass.
    """
    if not 0.0 < leaf_temperature <= 1.0:
        raise ValueError("leaf temperature must lie in (0, 1]")
    _check_dims(params, evidence)
    squeeze = size is None
    count = 1 if squeeze else int(size)
    if count < 1:
        raise ValueError("size must be positive")

    log_e = _local_log_expectations(params, evidence.log_w)
    beta = _backward(params, log_e)
    root = params.log_pi + log_e[0] + beta[0]
    log_z = logsumexp(root)
    if log_z == NEG_INF:
        raise ContradictionError("evidence contradicts the prior (Z = 0)")

    length, vocab = evidence.log_w.shape
    states = np.empty((count, length), dtype=np.int64)
    shift = root.max()
    first = np.exp(root - shift)
    states[:, 0] = sample_rows(rng, np.broadcast_to(first, (count, first.shape[0])))
    for i in range(1, length):
        expo = params.log_A[states[:, i - 1]] + (log_e[i] + beta[i])[None, :]
        expo = expo - expo.max(axis=1, keepdims=True)
        states[:, i] = sample_rows(rng, np.exp(expo))

    tokens = np.empty((count, length), dtype=np.int64)
    observed = evidence.kinds == OBSERVED
    for i in range(length):
        if observed[i]:
            tokens[:, i] = evidence.tokens[i]
            continue
        expo = (params.log_B[states[:, i]] + evidence.log_w[i][None, :]) / leaf_temperature
        expo = expo - expo.max(axis=1, keepdims=True)
        tokens[:, i] = sample_rows(rng, np.exp(expo))
    return tokens[0] if squeeze else tokens


def _local_log_expectations_many(params: HmmParams, log_w: np.ndarray) -> np.ndarray:
    """Batched local expectations: log_w is (B, L, V), result (B, L, N)."""
    shift = np.max(log_w, axis=2)
    safe = np.where(np.isfinite(shift), shift, 0.0)
    lin_w = np.exp(log_w - safe[:, :, None])
    with np.errstate(divide="ignore"):
        log_e = np.log(lin_w @ params.lin_B().T) + shift[:, :, None]
    log_e[shift == NEG_INF] = NEG_INF
    return log_e


def _log_matvec_many(lin_mat: np.ndarray, log_vecs: np.ndarray) -> np.ndarray:
    """Batched log_matvec: log_vecs is (B, N), lin_mat (N, M) -> (B, M)."""
    m = np.max(log_vecs, axis=1, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(log_vecs - safe) @ lin_mat) + safe
    out[m[:, 0] == NEG_INF] = NEG_INF
    return out


def hmm_sample_conditional_many(
    params: HmmParams,
    evidences: list[VirtualEvidence],
    leaf_temperature: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One conditional draw per evidence, batched across equal-length windows.

    Semantically one hmm_sample_conditional call per evidence; the backward
    messages and the top-down draws are computed with a leading batch axis so
    many windows cost roughly one.  All draws come from the caller's single
    generator (order: position-major, windows vectorized).
    """
    if not 0.0 < leaf_temperature <= 1.0:
        raise ValueError("leaf temperature must lie in (0, 1]")
    if not evidences:
        return np.empty((0, 0), dtype=np.int64)
    length = evidences[0].length
    for ev in evidences:
        _check_dims(params, ev)
        if ev.length != length:
            raise ValueError("batched windows must share one length")
    batch = len(evidences)
    log_w = np.stack([ev.log_w for ev in evidences])          # (B, L, V)
    log_e = _local_log_expectations_many(params, log_w)       # (B, L, N)

    lin_at = np.ascontiguousarray(params.lin_A().T)
    beta = np.empty_like(log_e)
    beta[:, -1] = 0.0
    for i in range(length - 2, -1, -1):
        beta[:, i] = _log_matvec_many(lin_at, log_e[:, i + 1] + beta[:, i + 1])

    root = params.log_pi[None, :] + log_e[:, 0] + beta[:, 0]  # (B, N)
    root_max = root.max(axis=1)
    if np.any(root_max == NEG_INF):
        raise ContradictionError("evidence contradicts the prior (Z = 0)")

    states = np.empty((batch, length), dtype=np.int64)
    states[:, 0] = sample_rows(rng, np.exp(root - root_max[:, None]))
    for i in range(1, length):
        expo = params.log_A[states[:, i - 1]] + log_e[:, i] + beta[:, i]
        expo -= expo.max(axis=1, keepdims=True)
        states[:, i] = sample_rows(rng, np.exp(expo))

    tokens = np.empty((batch, length), dtype=np.int64)
    rows_idx = np.arange(batch)
    observed = np.stack([ev.kinds for ev in evidences]) == OBSERVED
    obs_tokens = np.stack([ev.tokens for ev in evidences])
    for i in range(length):
        expo = (params.log_B[states[:, i]] + log_w[:, i]) / leaf_temperature
        expo -= expo.max(axis=1, keepdims=True)
        drawn = sample_rows(rng, np.exp(expo))
        tokens[:, i] = np.where(observed[:, i], obs_tokens[:, i], drawn)
    return tokens


def save_hmm(params: HmmParams, path: str | Path) -> None:
    """Write the CODDHMM1 container (bit-exact round trip)."""
    n, v = params.num_states, params.vocab
    payload = HMM_MAGIC + binio.u32_bytes(n, v)
    payload += binio.f64_bytes(params.log_pi)
    payload += binio.f64_bytes(params.log_A)
    payload += binio.f64_bytes(params.log_B)
    Path(path).write_bytes(payload)


def load_hmm(path: str | Path) -> HmmParams:
    cur = binio.Cursor(Path(path).read_bytes())
    cur.magic(HMM_MAGIC)
    n = cur.u32("state count")
    v = cur.u32("vocab size")
    if n < 1 or v < 1:
        raise ValueError(f"degenerate dimensions N={n}, V={v}")
    log_pi = cur.f64_array(n, "pi")
    log_a = cur.f64_array(n * n, "A").reshape(n, n)
    log_b = cur.f64_array(n * v, "B").reshape(n, v)
    cur.expect_end()
    return HmmParams(log_pi, log_a, log_b)
