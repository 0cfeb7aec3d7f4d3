import numpy as np
import pytest

from maskprior.coupling import MaskedSequence, PotentialGrid
from maskprior.denoiser import OracleSource, UniformSource, load_potentials
from maskprior.harness import exact_joint_table
from maskprior.hmm import HmmParams, hmm_log_likelihood
from maskprior.numerics import log_normalize
from maskprior.training import (
    TrainConfig,
    TrainExample,
    corrupt,
    materialize_examples,
    objective,
    objective_gradient,
    precompute_potentials,
    train_prior,
)


def make_example(rng, prior_vocab=3, length=3, t=0.5):
    x0 = rng.integers(0, prior_vocab, size=length)
    state = corrupt(x0, t, rng)
    grid = PotentialGrid.from_probs(
        rng.dirichlet(np.ones(prior_vocab), size=length))
    return TrainExample(x0, state, grid, t)


class TestCorrupt:
    def test_t_zero_masks_nothing(self):
        state = corrupt(np.arange(10), 0.0, np.random.default_rng(0))
        assert not state.mask.any()

    def test_t_one_masks_everything(self):
        state = corrupt(np.arange(10), 1.0, np.random.default_rng(0))
        assert state.mask.all()

    def test_binomial_concentration(self):
        state = corrupt(np.zeros(10_000, dtype=int), 0.5,
                        np.random.default_rng(1))
        assert abs(int(state.mask.sum()) - 5000) <= 150

    def test_rejects_bad_t(self):
        with pytest.raises(ValueError):
            corrupt(np.arange(3), 1.5, np.random.default_rng(0))


class TestObjective:
    def test_fully_observed_contributes_zero(self):
        rng = np.random.default_rng(2)
        prior = HmmParams.random(2, 3, rng)
        batch = [make_example(rng, t=0.0) for _ in range(4)]
        assert objective(prior, batch, "uniform") == 0.0

    def test_uniform_grids_give_prior_conditional(self):
        rng = np.random.default_rng(3)
        prior = HmmParams.random(2, 3, rng)
        x0 = np.array([0, 2, 1])
        state = MaskedSequence(x0.copy(), np.array([True, False, True]))
        grid = PotentialGrid.uniform(3, 3)
        batch = [TrainExample(x0, state, grid, 0.5)]
        # log p(x0) - log p(observed)
        obs_lik = 0.0
        for a in range(3):
            for b in range(3):
                obs_lik += np.exp(hmm_log_likelihood(prior, np.array([a, 2, b])))
        expected = hmm_log_likelihood(prior, x0) - np.log(obs_lik)
        assert np.isclose(objective(prior, batch, "uniform"), expected, atol=1e-9)

    def test_single_item_matches_enumeration(self):
        rng = np.random.default_rng(4)
        prior = HmmParams.random(2, 3, rng)
        example = make_example(rng, t=0.7)
        masked = example.state.masked_positions()
        table = exact_joint_table(prior, example.state, example.grid)
        expected = np.log(table[tuple(example.x0[masked])])
        weight = 1.0 / max(0.7, 0.05)
        assert np.isclose(objective(prior, [example], "inverse_t"),
                          weight * expected, atol=1e-9)

    def test_inverse_t_clamp(self):
        rng = np.random.default_rng(5)
        prior = HmmParams.random(2, 3, rng)
        x0 = np.array([0, 2, 1])
        state = MaskedSequence(x0.copy(), np.array([True, False, False]))
        grid = PotentialGrid.uniform(3, 3)
        example = TrainExample(x0, state, grid, 0.01)  # below the 0.05 clamp
        raw = objective(prior, [example], "uniform")
        weighted = objective(prior, [example], "inverse_t")
        assert raw != 0.0
        assert np.isclose(weighted, raw / 0.05, atol=1e-9)


class TestGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        for _ in range(3):
            prior = HmmParams.random(2, 3, rng)
            batch = [make_example(rng, t=t) for t in (0.3, 0.8)]
            g_pi, g_a, g_b = objective_gradient(prior, batch, "uniform")
            analytic = np.concatenate([g_pi.ravel(), g_a.ravel(), g_b.ravel()])

            logits = [prior.log_pi.copy(), prior.log_A.copy(), prior.log_B.copy()]
            flat = np.concatenate([p.ravel() for p in logits])
            shapes = [p.shape for p in logits]

            def rebuilt(vec):
                parts = []
                offset = 0
                for shape in shapes:
                    size = int(np.prod(shape))
                    parts.append(vec[offset:offset + size].reshape(shape))
                    offset += size
                return HmmParams(log_normalize(parts[0], axis=0),
                                 log_normalize(parts[1], axis=1),
                                 log_normalize(parts[2], axis=1))

            step = 1e-5
            fd = np.empty_like(flat)
            for k in range(flat.size):
                up = flat.copy(); up[k] += step
                dn = flat.copy(); dn[k] -= step
                fd[k] = (objective(rebuilt(up), batch, "uniform")
                         - objective(rebuilt(dn), batch, "uniform")) / (2 * step)
            denom = max(np.linalg.norm(fd), 1e-12)
            assert np.linalg.norm(fd - analytic) / denom < 1e-4


class TestTrainPrior:
    def test_single_template_drives_nll_to_zero(self):
        data = [np.array([1, 1, 1])] * 40
        config = TrainConfig(weight_mode="uniform", optimizer_mode="em",
                             epochs=50, seed=0)
        prior, history = train_prior(data, UniformSource(3), config, num_states=1)
        nll = -hmm_log_likelihood(prior, np.array([1, 1, 1]))
        assert nll <= 1e-3
        assert len(history.epochs) == 50

    def test_seeded_runs_bit_identical(self):
        data = [np.array([0, 1]), np.array([2, 3])] * 10
        config = TrainConfig(weight_mode="inverse_t", optimizer_mode="em",
                             epochs=8, seed=7)
        p1, h1 = train_prior(data, UniformSource(4), config, num_states=3)
        p2, h2 = train_prior(data, UniformSource(4), config, num_states=3)
        assert np.array_equal(p1.log_pi, p2.log_pi)
        assert np.array_equal(p1.log_A, p2.log_A)
        assert np.array_equal(p1.log_B, p2.log_B)
        assert h1.objectives() == h2.objectives()

    def test_parameter_floors_and_normalization(self):
        data = [np.array([0, 0])] * 30
        floor = 1e-4
        config = TrainConfig(weight_mode="uniform", optimizer_mode="em",
                             epochs=10, seed=1, param_floor=floor)
        prior, _ = train_prior(data, UniformSource(2), config, num_states=2)
        for rows in (prior.log_pi[None, :], prior.log_A, prior.log_B):
            probs = np.exp(rows)
            assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(probs >= floor - 1e-12)

    def test_ascent_mode_improves(self):
        data = [np.array([0, 1]), np.array([2, 3])] * 20
        config = TrainConfig(weight_mode="uniform", optimizer_mode="ascent",
                             epochs=40, learning_rate=2.0, seed=3)
        _, history = train_prior(data, UniformSource(4), config, num_states=4)
        assert history.epochs[-1].objective >= history.initial_objective + 0.5

    def test_window_length_mismatch(self):
        config = TrainConfig(window_length=5)
        with pytest.raises(ValueError, match="window"):
            train_prior([np.array([0, 1])], UniformSource(2), config)

    def test_history_csv(self, tmp_path):
        data = [np.array([0, 1])] * 5
        config = TrainConfig(epochs=3, seed=0)
        _, history = train_prior(data, UniformSource(2), config, num_states=2)
        path = tmp_path / "history.csv"
        history.write_csv(path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "epoch,objective,skipped_items,wall_ms"
        assert len(lines) == 4


class TestPrecompute:
    def test_fixed_t_zero_yields_indicator_grids(self, tmp_path, two_template_dist):
        data = [np.array([0, 1]), np.array([2, 3])]
        path = tmp_path / "pot.bin"
        precompute_potentials(data, OracleSource(two_template_dist), 1,
                              np.random.default_rng(0), path, fixed_t=0.0)
        for rec, x0 in zip(load_potentials(path), data):
            assert not rec.state.mask.any()
            probs = np.exp(rec.grid.log_theta)
            assert np.all(probs[np.arange(2), x0] > 1 - 1e-4)

    def test_deterministic_files(self, tmp_path, two_template_dist):
        data = [np.array([0, 1]), np.array([2, 3])] * 3
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        for path in (a, b):
            precompute_potentials(data, OracleSource(two_template_dist), 2,
                                  np.random.default_rng(11), path)
        assert a.read_bytes() == b.read_bytes()

    def test_pooled_marginals_match_oracle(self, tmp_path, two_template_dist):
        rng = np.random.default_rng(12)
        data = [row for row in two_template_dist.sample(rng, 300)]
        path = tmp_path / "pot.bin"
        precompute_potentials(data, OracleSource(two_template_dist), 4,
                              np.random.default_rng(13), path)
        records = load_potentials(path)
        rows = []
        for rec in records:
            masked = rec.state.masked_positions()
            for i in masked:
                if i == 0:
                    rows.append(np.exp(rec.grid.log_theta[0]))
        pooled = np.mean(rows, axis=0)
        # position-0 marginal of the template mix is 0.5/0.5 on tokens {0, 2}
        assert np.abs(pooled[[0, 2]] - 0.5).max() < 0.05


def test_materialize_respects_prompts():
    rng = np.random.default_rng(14)
    data = [np.array([0, 1, 2, 3])] * 20
    examples = materialize_examples(data, UniformSource(4), rng,
                                    prompt_lengths=[2] * 20)
    for ex in examples:
        assert not ex.state.mask[:2].any()
