"""Generation loops: block decoding and full-sequence decoding with windows.

Both loops share one step engine: query the source for a grid, plan how many
positions to commit (a deterministic ceiling-division schedule standing in
for stochastic remasking, so step budgets are exact), pick positions with a
reliability heuristic scored on the factorized grid, then sample the chosen
positions either jointly through the prior (when the mask ratio is below the
activation threshold) or independently from the sharpened grid rows.
Committed tokens are never revisited.

Randomness is scoped by counter-based splitting of the run seed: every
(purpose, step, position) triple owns a disjoint counter block of one Philox
stream, so enabling or disabling the prior cannot shift the draws of the
factorized path.  A run with ``gamma == 0`` is therefore bit-identical to
the no-prior baseline at the same seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coupling import (
    HEURISTICS,
    MaskedSequence,
    PotentialGrid,
    heuristic_order_scores,
    make_evidence,
    sample_alg1_simple,
    sample_joint_ao,
    sample_joint_latent,
)
from .denoiser import PotentialSource
from .errors import ContradictionError
from .hmm import HmmParams, hmm_sample_conditional_many
from .numerics import log_normalize, sample_rows

SAMPLERS = ("latent", "ao", "alg1")

# purpose words for the counter-based stream split
_PURPOSE_SELECT = 1
_PURPOSE_TOKEN = 2
_PURPOSE_JOINT = 3


def derive_stream(seed: int, purpose: int, step: int, position: int) -> np.random.Generator:
    """Generator over a disjoint counter block of the run's Philox stream.

    Each (purpose, step, position) triple owns 2**16 counter values of the
    keyed Philox sequence, so the streams a run consumes are fixed by the
    seed alone: whether or not some other stream (say, the joint-sampling
    one) is consumed cannot shift anyone else's draws.
    """
    bits = np.random.Philox(key=seed)
    bits.advance((purpose << 96) + (step << 48) + (position << 16))
    return np.random.Generator(bits)


@dataclass
class DecodeConfig:
    """All decoding knobs; CLI flags mirror these field names one-to-one."""

    length: int
    steps: int
    block_size: int = 32
    window: int = 32
    gamma: float = 0.5
    temperature: float = 0.2
    heuristic: str = "confidence"
    sampler: str = "latent"
    seed: int = 0

    def __post_init__(self):
        if self.length < 1 or self.steps < 1:
            raise ValueError("length and steps must be positive")
        if self.window > self.length:
            raise ValueError("window cannot exceed the sequence length")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.temperature <= 1.0:
            raise ValueError("temperature must lie in (0, 1]")
        if self.heuristic not in HEURISTICS:
            raise ValueError(f"heuristic must be one of {HEURISTICS}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")


@dataclass
class StepRecord:
    step: int
    mask_ratio: float
    pc_active: bool
    positions: list[int]
    tokens: list[int]
    scores: list[float]
    windows: list[tuple[int, int]]
    fallback_windows: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "mask_ratio": self.mask_ratio,
            "pc_active": self.pc_active,
            "positions": self.positions,
            "tokens": self.tokens,
            "windows": [list(w) for w in self.windows],
        })


@dataclass
class DecodeTrace:
    steps: list[StepRecord] = field(default_factory=list)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for record in self.steps:
                fh.write(record.to_json() + "\n")


def plan_unmask_counts(remaining_masked: int, remaining_steps: int) -> int:
    """Positions to commit this step under the ceiling-division schedule."""
    if remaining_steps < 1:
        raise ValueError("need at least one remaining step")
    if remaining_masked < 0:
        raise ValueError("negative masked count")
    return math.ceil(remaining_masked / remaining_steps)


def select_positions(grid: PotentialGrid, masked: np.ndarray, k: int,
                     heuristic: str, rng: np.random.Generator) -> np.ndarray:
    """Top-k masked positions by heuristic score; ties go to the lowest index."""
    masked = np.asarray(masked, dtype=np.int64)
    if k > masked.size:
        raise ValueError(f"cannot select {k} of {masked.size} masked positions")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if heuristic == "random":
        return np.sort(rng.choice(masked, size=k, replace=False))
    if heuristic == "fixed-left-to-right":
        return masked[:k]
    if heuristic == "fixed-right-to-left":
        return np.sort(masked[-k:])
    rows = np.exp(grid.log_theta[masked])
    scores = heuristic_order_scores(rows, heuristic)
    # stable sort on (-score, position): lowest position wins ties
    order = np.lexsort((masked, -scores))
    return np.sort(masked[order[:k]])


def cover_windows(targets: np.ndarray, window: int, length: int) -> list[tuple[int, int]]:
    """Greedy minimum cover of the targets by fixed-width windows.

    Windows start at the first uncovered target, clipped so they fit inside
    [0, length); greedy placement is minimal for fixed-width interval covers.
    """
    if window > length:
        raise ValueError("window cannot exceed the sequence length")
    targets = np.sort(np.asarray(targets, dtype=np.int64))
    out: list[tuple[int, int]] = []
    i = 0
    while i < targets.size:
        lo = min(int(targets[i]), length - window)
        hi = lo + window
        out.append((lo, hi))
        while i < targets.size and targets[i] < hi:
            i += 1
    return out


def _sample_factorized(grid: PotentialGrid, positions: np.ndarray, tau: float,
                       seed: int, step: int) -> np.ndarray:
    """Independent draws from the tau-sharpened grid rows, one stream per position."""
    out = np.empty(positions.size, dtype=np.int64)
    for j, pos in enumerate(positions):
        probs = np.exp(log_normalize(grid.log_theta[pos] / tau, axis=0))
        rng = derive_stream(seed, _PURPOSE_TOKEN, step, int(pos))
        out[j] = sample_rows(rng, probs)
    return out


def _sample_window_joint(prior: HmmParams, state: MaskedSequence,
                         grid: PotentialGrid, window: tuple[int, int],
                         targets: np.ndarray, cfg: DecodeConfig,
                         step: int) -> np.ndarray:
    lo, hi = window
    sub_state = state.slice(lo, hi)
    sub_grid = PotentialGrid(grid.log_theta[lo:hi], validate=False)
    local = targets - lo
    rng = derive_stream(cfg.seed, _PURPOSE_JOINT, step, lo)
    if cfg.sampler == "latent":
        return sample_joint_latent(prior, sub_state, sub_grid, local,
                                   cfg.temperature, rng)
    if cfg.sampler == "ao":
        return sample_joint_ao(prior, sub_state, sub_grid, local,
                               cfg.temperature, cfg.heuristic, rng)
    return sample_alg1_simple(prior, sub_state, sub_grid, local,
                              cfg.temperature, rng)


def _sample_windows_batched(prior: HmmParams, state: MaskedSequence,
                            grid: PotentialGrid, windows: list[tuple[int, int]],
                            targets: np.ndarray, cfg: DecodeConfig,
                            step: int) -> np.ndarray | None:
    """All windows of one step in a single batched pass (latent/alg1 only).

    Returns target tokens aligned with ``targets``, or None to fall back to
    the per-window path (on contradiction, or mixed window widths).
    """
    width = windows[0][1] - windows[0][0]
    if any(hi - lo != width for lo, hi in windows):
        return None
    theta = grid.log_theta
    if cfg.sampler == "alg1":
        theta = grid.sharpen(cfg.temperature).log_theta
        leaf_tau = 1.0
    else:
        leaf_tau = cfg.temperature
    evidences = []
    for lo, hi in windows:
        sub_state = state.slice(lo, hi)
        sub_grid = PotentialGrid(theta[lo:hi], validate=False)
        in_win = targets[(targets >= lo) & (targets < hi)]
        evidences.append(make_evidence(sub_state, sub_grid, in_win - lo))
    rng = derive_stream(cfg.seed, _PURPOSE_JOINT, step, 0)
    try:
        draws = hmm_sample_conditional_many(prior, evidences, leaf_tau, rng)
    except ContradictionError:
        return None
    out = np.empty(targets.size, dtype=np.int64)
    for w, (lo, hi) in enumerate(windows):
        in_win = targets[(targets >= lo) & (targets < hi)]
        out[np.searchsorted(targets, in_win)] = draws[w, in_win - lo]
    return out


def _decode_step(prior: HmmParams | None, state: MaskedSequence,
                 grid: PotentialGrid, candidates: np.ndarray, ratio: float,
                 windows_for, cfg: DecodeConfig, step: int,
                 remaining_steps: int) -> StepRecord:
    """One shared step: plan, select, gate, sample, commit (in place)."""
    k = plan_unmask_counts(candidates.size, remaining_steps)
    sel_rng = derive_stream(cfg.seed, _PURPOSE_SELECT, step, 0)
    targets = select_positions(grid, candidates, k, cfg.heuristic, sel_rng)
    pc_active = prior is not None and ratio < cfg.gamma
    windows = windows_for(targets) if targets.size else []

    if cfg.heuristic in ("random", "fixed-left-to-right", "fixed-right-to-left"):
        scores = [0.0] * targets.size
    else:
        rows = np.exp(grid.log_theta[targets]) if targets.size else np.empty((0, grid.vocab))
        scores = [float(s) for s in heuristic_order_scores(rows, cfg.heuristic)]

    tokens = np.empty(targets.size, dtype=np.int64)
    fallbacks: list[int] = []
    if pc_active:
        batched = None
        if cfg.sampler in ("latent", "alg1") and len(windows) > 1:
            batched = _sample_windows_batched(prior, state, grid, windows,
                                              targets, cfg, step)
        if batched is not None:
            tokens = batched
        else:
            for lo, hi in windows:
                in_win = targets[(targets >= lo) & (targets < hi)]
                try:
                    drawn = _sample_window_joint(prior, state, grid, (lo, hi),
                                                 in_win, cfg, step)
                except ContradictionError:
                    drawn = _sample_factorized(grid, in_win, cfg.temperature,
                                               cfg.seed, step)
                    fallbacks.append(lo)
                tokens[np.searchsorted(targets, in_win)] = drawn
    elif targets.size:
        tokens = _sample_factorized(grid, targets, cfg.temperature,
                                    cfg.seed, step)

    if targets.size:
        state.tokens[targets] = tokens
        state.mask[targets] = False

    return StepRecord(
        step=step,
        mask_ratio=ratio,
        pc_active=bool(pc_active),
        positions=[int(p) for p in targets],
        tokens=[int(t) for t in tokens],
        scores=scores,
        windows=[(int(a), int(b)) for a, b in windows],
        fallback_windows=fallbacks,
    )


def _init_state(cfg: DecodeConfig, prompt: np.ndarray | None) -> MaskedSequence:
    state = MaskedSequence.fully_masked(cfg.length)
    if prompt is not None:
        prompt = np.asarray(prompt, dtype=np.int64)
        if prompt.shape[0] >= cfg.length:
            raise ValueError("prompt must be shorter than the sequence length")
        state.tokens[: prompt.shape[0]] = prompt
        state.mask[: prompt.shape[0]] = False
    return state


def decode_block(prior: HmmParams | None, source: PotentialSource,
                 cfg: DecodeConfig,
                 prompt: np.ndarray | None = None) -> tuple[np.ndarray, DecodeTrace]:
    """Semi-autoregressive decoding in fixed blocks, left to right.

    Runs ``cfg.steps`` inner steps per block; the prior window spans exactly
    the active block (cfg.window == cfg.block_size), with in-block observed
    tokens clamped as evidence.  The activation gate compares the block-local
    mask ratio against gamma.  Pass ``prior=None`` for the factorized
    baseline code path.
    """
    if cfg.length % cfg.block_size != 0:
        raise ValueError("block size must divide the sequence length")
    if cfg.window != cfg.block_size:
        raise ValueError("block decoding requires window == block_size")
    state = _init_state(cfg, prompt)
    trace = DecodeTrace()
    step = 0
    for b in range(cfg.length // cfg.block_size):
        lo, hi = b * cfg.block_size, (b + 1) * cfg.block_size
        for inner in range(cfg.steps):
            grid = source.potentials(state)
            in_block = np.flatnonzero(state.mask[lo:hi]) + lo
            ratio = in_block.size / cfg.block_size
            record = _decode_step(
                prior, state, grid, in_block, ratio,
                lambda targets: [(lo, hi)],
                cfg, step, cfg.steps - inner)
            trace.steps.append(record)
            step += 1
    return state.tokens.copy(), trace


def decode_full(prior: HmmParams | None, source: PotentialSource,
                cfg: DecodeConfig,
                prompt: np.ndarray | None = None) -> tuple[np.ndarray, DecodeTrace]:
    """Full-sequence decoding with dynamic prior windows.

    Each step selects targets globally by the heuristic, covers them with a
    minimal set of fixed-width windows, and samples every window jointly when
    the global mask ratio is below gamma (in-window observed tokens are
    clamped as evidence), factorized otherwise.
    """
    state = _init_state(cfg, prompt)
    trace = DecodeTrace()
    for step in range(cfg.steps):
        grid = source.potentials(state)
        masked = state.masked_positions()
        ratio = masked.size / cfg.length
        record = _decode_step(
            prior, state, grid, masked, ratio,
            lambda targets: cover_windows(targets, cfg.window, cfg.length),
            cfg, step, cfg.steps - step)
        trace.steps.append(record)
    return state.tokens.copy(), trace
