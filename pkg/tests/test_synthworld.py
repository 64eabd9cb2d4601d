import json

import numpy as np
import pytest

from mafbench.synthworld import (
    ConfigError, WorldConfig, apply_perceptor, bayes_auc_oracle, fit_isolated_perceptor, generate_world,
    split_dataset, world_from_json, world_to_json, write_datasets_csv,
)

NULL = dict(fake_mean_shift=0.0, fake_variance_inflation=1.0, style_leak_train=0.0, style_leak_test=0.0)


class TestConfig:
    def test_defaults(self):
        c = WorldConfig()
        assert (c.num_modalities, c.essence_dim, c.style_dim, c.raw_dim, c.perceptor_dim) == (3, 8, 24, 96, 64)
        assert (c.style_leak_train, c.style_leak_test) == (0.8, -0.8)

    @pytest.mark.parametrize("bad", [dict(essence_dim=80, style_dim=24), dict(essence_dim=70, raw_dim=200),
                                     dict(fake_variance_inflation=0.5), dict(observation_noise=-1.0),
                                     dict(num_modalities=0)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            WorldConfig(**bad)

    def test_from_dict_rejects_unknown_key(self):
        with pytest.raises(ConfigError, match="essence_dmi"):
            WorldConfig.from_dict({"essence_dmi": 8})

    def test_from_dict_type_mismatch(self):
        with pytest.raises(ConfigError, match="essence_dim"):
            WorldConfig.from_dict({"essence_dim": "8"})


class TestStructure:
    def test_orthonormal_mixing(self, world):
        for k in range(3):
            a, b = world.essence_basis(k), world.style_basis(k)
            assert np.abs(a.T @ b).max() <= 1e-10
            q = world.mixing[k]
            np.testing.assert_allclose(q.T @ q, np.eye(q.shape[1]), atol=1e-12)

    def test_regeneration_bit_identical(self, small_world):
        again = world_from_json(world_to_json(small_world))
        for k in range(3):
            assert again.mixing[k].tobytes() == small_world.mixing[k].tobytes()
            a = again.dataset("semantic", k, 0).features
            assert a.tobytes() == small_world.dataset("semantic", k, 0).features.tobytes()

    def test_json_holds_config_only(self, small_world):
        assert set(json.loads(world_to_json(small_world))) == set(WorldConfig.__dataclass_fields__)

    def test_aligned_rows_share_latents(self, world):
        r0, r1 = world.raw(0), world.raw(1)
        np.testing.assert_array_equal(r0["y"], r1["y"])
        np.testing.assert_array_equal(r0["essence"], r1["essence"])

    def test_unaligned_rows_differ(self):
        w = generate_world(WorldConfig(samples_per_modality=200, aligned=False))
        assert not np.array_equal(w.raw(0)["essence"], w.raw(1)["essence"])

    def test_designated_leak_sign(self, world):
        assert world.leak(0, designated=0) == -0.8
        assert world.leak(1, designated=0) == 0.8

    def test_labels_balanced(self, world):
        assert world.raw(0)["y"].mean() == 0.5


class TestSplits:
    def test_small_balanced(self):
        tags = split_dataset(np.r_[np.zeros(5, int), np.ones(5, int)], 0)
        assert [int((tags == s).sum()) for s in ("train", "val", "test")] == [6, 2, 2]
        for s in ("train", "val", "test"):
            assert np.sort(np.r_[np.zeros(5, int), np.ones(5, int)][tags == s]).tolist() in ([0, 0, 0, 1, 1, 1], [0, 1])

    def test_deterministic(self, rng):
        y = rng.integers(0, 2, 100)
        np.testing.assert_array_equal(split_dataset(y, 5), split_dataset(y, 5))

    def test_too_small(self):
        with pytest.raises(ConfigError):
            split_dataset(np.zeros(5), 0)

    def test_proportions_and_balance(self, world):
        ds = world.dataset("semantic", 0)
        n = len(ds)
        for s, frac in (("train", 0.6), ("val", 0.2), ("test", 0.2)):
            mask = ds.split == s
            assert abs(mask.sum() - frac * n) <= 1
            assert abs(ds.labels[mask].mean() - 0.5) <= 0.02
        # chi-square of the 2x3 label-by-split table against independence
        table = np.array([[((ds.split == s) & (ds.labels == y)).sum() for s in ("train", "val", "test")]
                          for y in (0, 1)], dtype=float)
        expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
        assert ((table - expected) ** 2 / expected).sum() < 5.99


class TestPerceptors:
    def test_semantic_contract(self, world):
        ds = apply_perceptor("semantic", world, 1)
        assert ds.features.shape == (3000, 64)
        assert apply_perceptor("semantic", world, 1, "val").features.shape[0] == 600

    def test_semantic_deterministic(self, world):
        x = world.raw(2)["x"][:10]
        np.testing.assert_array_equal(world.perceive_semantic(2, x, np.arange(10)),
                                      world.perceive_semantic(2, x, np.arange(10)))

    def test_semantic_essence_recovery(self):
        w = generate_world(WorldConfig(samples_per_modality=200, semantic_style_gain=0.0, observation_noise=0.0))
        z = w.dataset("semantic", 0).features[:, :8]
        eps = w.raw(0)["essence"] @ w.essence_basis(0).T @ w.essence_basis(0)
        np.testing.assert_allclose(z, 0.5 * eps, atol=0.3)

    def test_cross_modal_essence_correlation(self, world):
        z0 = world.dataset("semantic", 0).features[:1000, :8].ravel()
        z1 = world.dataset("semantic", 1).features[:1000, :8].ravel()
        assert np.corrcoef(z0, z1)[0, 1] > 0.9

    def test_whitening_contract(self, world):
        p = world.isolated_perceptor(0)
        raw = world.raw(0)["x"][world.split_tags[0] == "train"]
        z = p(raw)[:, : p.rank]
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(z.var(axis=0, ddof=1), 1.0, atol=1e-6)

    def test_whitening_deterministic(self, world):
        raw = world.raw(0)["x"][:500]
        a, b = fit_isolated_perceptor(raw, 64), fit_isolated_perceptor(raw, 64)
        assert a.projection.tobytes() == b.projection.tobytes()

    def test_rank_deficient_pads(self, rng, caplog):
        raw = rng.normal(size=(100, 4)) @ rng.normal(size=(4, 12))
        p = fit_isolated_perceptor(raw, 8)
        assert p.rank == 4
        assert not p.projection[:, 4:].any()
        assert "padding" in caplog.text

    def test_too_few_samples(self, rng):
        with pytest.raises(ConfigError):
            fit_isolated_perceptor(rng.normal(size=(5, 12)), 8)

    def test_fake_rows_have_larger_norm_when_whitened(self, world):
        ds = world.dataset("isolated", 0)
        sq = (ds.features[:2000] ** 2).sum(axis=1)
        y = ds.labels[:2000]
        assert sq[y == 1].mean() > sq[y == 0].mean()

    def test_unknown_mode(self, world):
        with pytest.raises(ConfigError):
            apply_perceptor("banana", world, 0)

    def test_csv_export(self, small_world, tmp_path):
        path = tmp_path / "d.csv"
        write_datasets_csv([small_world.dataset("semantic", 0)], path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("modality,row,split,label,f0,")
        assert len(lines) == 301


class TestBayesOracle:
    def test_zero_signal(self):
        w = generate_world(WorldConfig(samples_per_modality=100, **NULL))
        assert bayes_auc_oracle(w, 0, n_mc=4000) == pytest.approx(0.5, abs=0.02)

    def test_separated(self):
        w = generate_world(WorldConfig(samples_per_modality=100, fake_mean_shift=10.0))
        assert bayes_auc_oracle(w, 0, n_mc=2000) > 0.99

    def test_pinned_default_value(self, world):
        # regression constant for the shipped default world
        assert bayes_auc_oracle(world, 0, "semantic", 20000) == pytest.approx(0.90838, abs=1e-4)

    def test_min_samples(self, world):
        with pytest.raises(ConfigError):
            bayes_auc_oracle(world, 0, n_mc=50)
