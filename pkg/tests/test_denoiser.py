import itertools
import struct

import numpy as np
import pytest

from maskprior.coupling import MaskedSequence, PotentialGrid
from maskprior.denoiser import (
    OracleSource,
    PotentialRecord,
    TemplateDistribution,
    UniformSource,
    load_potentials,
    oracle_potentials,
    train_count_denoiser,
    write_potentials,
)
from maskprior.errors import ContradictionError, FormatError


@pytest.fixture
def san_diego(two_template_dist):
    return two_template_dist


class TestTemplateDistribution:
    def test_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            TemplateDistribution(np.array([[0, 1]]), np.array([0.9]), 2)
        with pytest.raises(ValueError, match="positive"):
            TemplateDistribution(np.array([[0], [1]]), np.array([1.0, 0.0]), 2)

    def test_from_corpus_counts(self):
        corpus = np.array([[0, 1], [0, 1], [2, 3], [0, 1]])
        dist = TemplateDistribution.from_corpus(corpus, 4)
        assert dist.tokens.shape == (2, 2)
        assert np.isclose(dist.prob_of(np.array([0, 1])), 0.75)


class TestOracle:
    def test_fully_observed_concentrates(self, san_diego):
        state = MaskedSequence.observed(np.array([0, 1]))
        grid = oracle_potentials(san_diego, state)
        probs = np.exp(grid.log_theta)
        assert probs[0, 0] > 1 - 1e-5 and probs[1, 1] > 1 - 1e-5

    def test_both_masked_gives_mode_marginals(self, san_diego):
        grid = oracle_potentials(san_diego, MaskedSequence.fully_masked(2))
        probs = np.exp(grid.log_theta)
        assert np.allclose(probs[0, [0, 2]], 0.5, atol=1e-5)
        assert np.allclose(probs[1, [1, 3]], 0.5, atol=1e-5)
        assert np.all(probs[0, [1, 3]] < 1e-5)

    def test_conditioning_selects_the_mode(self, san_diego):
        state = MaskedSequence(np.array([0, 0]), np.array([False, True]))
        grid = oracle_potentials(san_diego, state)
        assert np.exp(grid.log_theta[1, 1]) > 1 - 1e-5

    def test_contradiction(self, san_diego):
        state = MaskedSequence(np.array([1, 0]), np.array([False, True]))
        with pytest.raises(ContradictionError):
            oracle_potentials(san_diego, state)

    def test_source_fallback_when_not_strict(self, san_diego):
        state = MaskedSequence(np.array([1, 0]), np.array([False, True]))
        grid = OracleSource(san_diego).potentials(state)
        probs = np.exp(grid.log_theta)
        assert np.isclose(probs[1, 1], 0.5, atol=1e-4)  # marginal fallback
        with pytest.raises(ContradictionError):
            OracleSource(san_diego, strict=True).potentials(state)

    def test_rows_always_normalized(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            length = int(rng.integers(1, 5))
            vocab = int(rng.integers(2, 6))
            count = int(rng.integers(1, 6))
            dist = TemplateDistribution(
                rng.integers(0, vocab, size=(count, length)),
                rng.dirichlet(np.ones(count)), vocab)
            mask = rng.random(length) < 0.5
            tokens = dist.tokens[0].copy()
            state = MaskedSequence(tokens, mask)
            grid = oracle_potentials(dist, state)
            assert np.allclose(np.exp(grid.log_theta).sum(axis=1), 1.0, atol=1e-9)

    def test_marginal_rows_minimize_kl(self):
        # coordinate-wise marginals beat every factorized candidate on a grid
        dist = TemplateDistribution(
            np.array([[0, 0], [0, 1], [1, 1]]), np.array([0.5, 0.25, 0.25]), 2)
        state = MaskedSequence.fully_masked(2)
        grid = oracle_potentials(dist, state, eps=1e-12)
        joint = {(0, 0): 0.5, (0, 1): 0.25, (1, 1): 0.25}

        def kl_against(rows):
            value = 0.0
            for key, p in joint.items():
                q = rows[0][key[0]] * rows[1][key[1]]
                value += p * np.log(p / q)
            return value

        ours = kl_against(np.exp(grid.log_theta))
        candidates = np.linspace(0.01, 0.99, 99)
        best = min(
            kl_against([np.array([a, 1 - a]), np.array([b, 1 - b])])
            for a in candidates for b in candidates
        )
        assert ours <= best + 1e-9


class TestCountDenoiser:
    def test_point_corpus_concentrates(self):
        corpus = np.tile(np.array([1, 0, 2]), (50, 1))
        source = train_count_denoiser(corpus, context_radius=1, smoothing=1e-12)
        grid = source.potentials(MaskedSequence.fully_masked(3))
        assert np.allclose(np.exp(grid.log_theta)[np.arange(3), [1, 0, 2]], 1.0,
                           atol=1e-9)

    def test_all_masked_falls_back_to_unigram(self, san_diego):
        corpus = san_diego.sample(np.random.default_rng(1), 2000)
        source = train_count_denoiser(corpus, context_radius=2)
        grid = source.potentials(MaskedSequence.fully_masked(2))
        probs = np.exp(grid.log_theta)
        assert np.allclose(probs[0, [0, 2]], 0.5, atol=0.05)

    def test_large_smoothing_approaches_uniform(self):
        corpus = np.tile(np.array([1, 0]), (10, 1))
        source = train_count_denoiser(corpus, context_radius=1, smoothing=1e6)
        grid = source.potentials(MaskedSequence.fully_masked(2))
        assert np.allclose(np.exp(grid.log_theta), 0.5, atol=1e-3)

    def test_converges_to_oracle(self, san_diego):
        corpus = san_diego.sample(np.random.default_rng(2), 50_000)
        source = train_count_denoiser(corpus, context_radius=2)
        oracle = OracleSource(san_diego)
        worst = 0.0
        states = [
            MaskedSequence.fully_masked(2),
            MaskedSequence(np.array([0, 0]), np.array([False, True])),
            MaskedSequence(np.array([2, 0]), np.array([False, True])),
            MaskedSequence(np.array([0, 1]), np.array([True, False])),
            MaskedSequence(np.array([0, 3]), np.array([True, False])),
        ]
        for state in states:
            a = np.exp(source.potentials(state).log_theta)
            b = np.exp(oracle.potentials(state).log_theta)
            masked = state.masked_positions()
            tv = 0.5 * np.abs(a[masked] - b[masked]).sum(axis=1).max()
            worst = max(worst, tv)
        assert worst <= 0.02, worst


class TestPotentialFiles:
    def make_records(self, rng, count=3, length=4, vocab=5, truth=True):
        records = []
        for _ in range(count):
            mask = rng.random(length) < 0.5
            tokens = rng.integers(0, vocab, size=length)
            grid = PotentialGrid.from_probs(rng.dirichlet(np.ones(vocab), size=length))
            # store float32-exact rows so the round trip is bitwise
            grid = PotentialGrid(
                grid.log_theta.astype(np.float32).astype(np.float64), validate=False)
            records.append(PotentialRecord(
                MaskedSequence(tokens, mask), grid,
                rng.integers(0, vocab, size=length) if truth else None))
        return records

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        records = self.make_records(rng)
        path = tmp_path / "pot.bin"
        write_potentials(path, records)
        first = path.read_bytes()
        loaded = load_potentials(path)
        assert len(loaded) == len(records)
        write_potentials(path, loaded)
        assert path.read_bytes() == first

    def test_truth_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        records = self.make_records(rng, truth=True)
        path = tmp_path / "pot.bin"
        write_potentials(path, records)
        loaded = load_potentials(path)
        for orig, back in zip(records, loaded):
            assert np.array_equal(orig.truth, back.truth)
            assert np.array_equal(orig.state.tokens, back.state.tokens)
            assert np.array_equal(orig.state.mask, back.state.mask)

    def test_truncated_reports_expected_length(self, tmp_path):
        rng = np.random.default_rng(5)
        path = tmp_path / "pot.bin"
        write_potentials(path, self.make_records(rng))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 10])
        with pytest.raises(FormatError, match="expected"):
            load_potentials(path)

    def test_hand_built_file(self, tmp_path):
        # one record, L=2, V=3, no truth, known float32 log-potentials
        length, vocab = 2, 3
        rows = np.log(np.array([[0.5, 0.25, 0.25], [0.2, 0.3, 0.5]],
                               dtype=np.float32))
        payload = b"CODDPOT1"
        payload += struct.pack("<III", 1, length, vocab)
        payload += bytes([1, 0])                     # mask
        payload += struct.pack("<II", 0, 2)          # tokens
        payload += bytes([0])                        # no ground truth
        payload += rows.astype("<f4").tobytes()
        path = tmp_path / "hand.bin"
        path.write_bytes(payload)
        records = load_potentials(path)
        assert len(records) == 1
        rec = records[0]
        assert rec.truth is None
        assert list(rec.state.mask) == [True, False]
        assert np.array_equal(rec.grid.log_theta,
                              rows.astype(np.float64))

    def test_unnormalized_rows_renormalized_and_counted(self, tmp_path, caplog):
        length, vocab = 1, 3
        rows = np.array([[0.1, 0.2, 0.3]], dtype=np.float32)  # not a distribution
        payload = b"CODDPOT1" + struct.pack("<III", 1, length, vocab)
        payload += bytes([1]) + struct.pack("<I", 0) + bytes([0])
        payload += rows.astype("<f4").tobytes()
        path = tmp_path / "bad.bin"
        path.write_bytes(payload)
        with caplog.at_level("WARNING"):
            records = load_potentials(path)
        assert "renormalized 1" in caplog.text
        assert np.isclose(np.exp(records[0].grid.log_theta).sum(), 1.0, atol=1e-9)

    def test_magic_mismatch(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 12)
        with pytest.raises(FormatError, match="magic"):
            load_potentials(path)

    def test_manifest_written(self, tmp_path):
        rng = np.random.default_rng(6)
        records = self.make_records(rng, count=2)
        path = tmp_path / "pot.bin"
        manifest = tmp_path / "pot.manifest.jsonl"
        write_potentials(path, records, manifest_path=manifest,
                         manifest_entries=[
                             {"id": "a", "source": "test", "split": "train"},
                             {"id": "b", "source": "test", "split": "heldout"},
                         ])
        lines = manifest.read_text().strip().split("\n")
        assert len(lines) == 2
        import json
        assert json.loads(lines[0]) == {"id": "a", "source": "test",
                                        "split": "train"}


def test_uniform_source():
    grid = UniformSource(5).potentials(MaskedSequence.fully_masked(3))
    assert np.allclose(np.exp(grid.log_theta), 0.2)
