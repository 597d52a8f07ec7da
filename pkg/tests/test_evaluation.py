import numpy as np
import pytest
import torch

from anymotion.errors import ValidationError
from anymotion.evaluation import (
    EvaluatorEmbed,
    GaussianTask,
    correlated_pair_task,
    diversity,
    evaluator_pairs,
    fid,
    gaussian_records,
    load_evaluator,
    metric_ci,
    mm_dist,
    mmodality,
    r_precision,
    save_evaluator,
    train_evaluator,
    verify_factorization,
)
from anymotion.generation import TextEmbedder
from anymotion.sampling import Pipeline
from anymotion.synthdata import GeneratorConfig, generate_records


class TestFid:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(200, 6))
        assert fid(a, a.copy()) < 1e-8

    def test_unit_mean_shift_oracle(self):
        # closed form: Frechet distance between N(0, I) and N(e1, I) is 1
        rng = np.random.default_rng(1)
        a = rng.normal(size=(100_000, 4))
        b = rng.normal(size=(100_000, 4))
        b[:, 0] += 1.0
        assert abs(fid(a, b) - 1.0) < 0.05

    def test_orthogonal_invariance(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(500, 4))
        b = rng.normal(size=(400, 4)) * 1.3 + 0.2
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        assert abs(fid(a, b) - fid(a @ q, b @ q)) < 1e-6

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(300, 5))
        b = rng.normal(size=(280, 5)) + 0.5
        assert abs(fid(a, b) - fid(b, a)) < 1e-8

    def test_needs_more_samples_than_dims(self):
        with pytest.raises(ValidationError):
            fid(np.zeros((3, 5)), np.zeros((10, 5)))

    def test_rejects_nonfinite(self):
        a = np.zeros((10, 2))
        b = np.zeros((10, 2))
        b[0, 0] = np.nan
        with pytest.raises(ValidationError):
            fid(a, b)


class TestRPrecision:
    def test_perfectly_separable(self):
        feats = np.eye(16)
        assert r_precision(feats, feats.copy(), pool_size=8, k=1) == 1.0

    def test_random_features_match_chance(self):
        # oracle: with random rankings the true text lands in the top 1 of a
        # 32-pool with probability 1/32
        rng = np.random.default_rng(4)
        m = rng.normal(size=(10_000, 8))
        t = rng.normal(size=(10_000, 8))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        rate = r_precision(m, t, pool_size=32, k=1, seed=0)
        assert abs(rate - 1 / 32) < 0.02

    def test_k_equals_pool_is_one(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=(64, 4))
        t = rng.normal(size=(64, 4))
        assert r_precision(m, t, pool_size=8, k=8) == 1.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(6)
        m = rng.normal(size=(128, 4))
        t = m + 0.5 * rng.normal(size=(128, 4))
        rates = [r_precision(m, t, pool_size=8, k=k, seed=1) for k in (1, 2, 3)]
        assert rates[0] <= rates[1] <= rates[2]

    def test_pool_validation(self):
        with pytest.raises(ValidationError):
            r_precision(np.zeros((4, 2)), np.zeros((4, 2)), pool_size=1)
        with pytest.raises(ValidationError):
            r_precision(np.zeros((4, 2)), np.zeros((4, 2)), pool_size=8)


class TestSmallMetrics:
    def test_diversity_zero_for_identical(self):
        feats = np.ones((50, 4))
        assert diversity(feats, n_pairs=40) == 0.0

    def test_diversity_positive(self):
        rng = np.random.default_rng(7)
        assert diversity(rng.normal(size=(100, 4))) > 0

    def test_mm_dist_zero_for_matched(self):
        f = np.random.default_rng(8).normal(size=(20, 4))
        assert mm_dist(f, f.copy()) == 0.0

    def test_mmodality_positive_for_distinct_repeats(self):
        rng = np.random.default_rng(9)
        feats = rng.normal(size=(5, 8, 4))
        assert mmodality(feats) > 0

    def test_mmodality_zero_for_identical_repeats(self):
        feats = np.ones((5, 8, 4))
        assert mmodality(feats) == 0.0

    def test_mmodality_needs_repeats(self):
        with pytest.raises(ValidationError):
            mmodality(np.zeros((5, 1, 4)))

    def test_metric_ci(self):
        out = metric_ci([1.0, 1.0, 1.0])
        assert out["mean"] == 1.0 and out["ci95"] == 0.0


class TestEvaluator:
    def _records(self):
        return generate_records(GeneratorConfig(seed=0, n_samples=16, frames=16))

    def test_pairs_include_interactive(self):
        recs = self._records()
        pairs = evaluator_pairs(recs)
        texts = {t for _, t in pairs}
        assert any(r.text_interactive in texts for r in recs if r.text_interactive)

    def test_outputs_unit_norm_and_deterministic(self):
        recs = self._records()
        emb = TextEmbedder(vocab=128, dim=16, seed=2)
        a = train_evaluator(recs, emb, seed=1, epochs=3, batch_size=32)
        b = train_evaluator(recs, emb, seed=1, epochs=3, batch_size=32)
        x = torch.randn(4, 16, 88, generator=torch.Generator().manual_seed(0))
        fa = a.embed_motion(x)
        fb = b.embed_motion(x)
        assert torch.equal(fa, fb)
        assert torch.allclose(fa.norm(dim=-1), torch.ones(4), atol=1e-5)

    def test_save_load_round_trip(self, tmp_path):
        recs = self._records()
        emb = TextEmbedder(vocab=128, dim=16, seed=2)
        model = train_evaluator(recs, emb, seed=0, epochs=2, batch_size=32)
        save_evaluator(tmp_path / "ev", model, {"seed": 0})
        loaded = load_evaluator(tmp_path / "ev", 88, 16)
        x = torch.randn(2, 16, 88, generator=torch.Generator().manual_seed(1))
        assert torch.equal(model.embed_motion(x), loaded.embed_motion(x))


class TestGaussianTask:
    def test_correlated_pair_slope(self):
        task = correlated_pair_task(0.8)
        assert np.allclose(task.conditional_slope(), [[0.8]])

    def test_default_is_valid(self):
        task = GaussianTask()
        assert task.dim_per_person == 2
        s = task.sample(100, seed=0)
        assert s.shape == (100, 4)

    def test_non_psd_rejected(self):
        with pytest.raises(ValidationError):
            GaussianTask(dim_per_person=1, mean=np.zeros(2),
                         cov=np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_records_split_coordinates(self):
        task = correlated_pair_task(0.5)
        items = gaussian_records(task, 10, seed=1)
        assert len(items) == 10
        assert items[0].motions[0].shape == (1, 1)
        assert items[0].texts_single == ["point", "point"]

    def test_verify_requires_interaction_net(self):
        from anymotion.diffusion import make_schedule
        from anymotion.generation import ModelDims, init_gen_params

        dims = ModelDims(feature_dim=1, hidden=8, heads=2, blocks=1, max_frames=4)
        pipe = Pipeline(init_gen_params(0, dims), None,
                        TextEmbedder(vocab=64, dim=8, seed=0),
                        make_schedule(100, "cosine"), None)
        with pytest.raises(ValidationError):
            verify_factorization(correlated_pair_task(), pipe, n_samples=10)
