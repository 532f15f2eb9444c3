import itertools

import numpy as np
import pytest

from langdet.harness.config import BenchConfig, ConfigError
from langdet.harness.data import (
    ALIAS_COSINE,
    Scene,
    build_taxonomies,
    cell_mask,
    feature_noise,
    generate_datasets,
    positional_grid,
    read_scenes,
    synthesize_features,
    write_scenes,
)


@pytest.fixture(scope="module")
def bench():
    return generate_datasets(BenchConfig(images_per_dataset=40, eval_images_per_dataset=10))


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"alias_fraction": 1.5}, {"top_k": 0}, {"matching_mode": "x"}, {"n_datasets": 1},
        {"max_objects": 9}, {"optimizer": "lbfgs"}, {"mu_asl": -1.0}, {"focal_alpha": 1.0},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            BenchConfig(**kw).validate()

    def test_dict_roundtrip(self):
        cfg = BenchConfig(seed=4, lr=0.1)
        assert BenchConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            BenchConfig.from_dict({"bogus": 1})


class TestTaxonomies:
    def test_alias_zero_distinct(self):
        ls, table, aliases = build_taxonomies(BenchConfig(alias_fraction=0.0))
        assert aliases == []
        assert len(set(ls.names)) == ls.K == 16

    def test_cosines(self):
        for seed in range(5):
            ls, table, aliases = build_taxonomies(BenchConfig(seed=seed))
            assert len(aliases) == 2
            group = {c: g for g, grp in enumerate(aliases) for c in grp}
            for i, j in itertools.combinations(range(ls.K), 2):
                cos = float(table.rows[i] @ table.rows[j])
                if i in group and group.get(j) == group[i]:
                    assert cos >= 0.95 and cos == pytest.approx(ALIAS_COSINE, abs=1e-12)
                else:
                    assert abs(cos) < 0.5

    def test_crowded_space_is_config_error(self):
        with pytest.raises(ConfigError):
            build_taxonomies(BenchConfig(classes_per_dataset=40, d=4, alias_fraction=0.0))


class TestScenes:
    def test_deterministic_bytes(self, tmp_path, bench):
        again = generate_datasets(BenchConfig(images_per_dataset=40, eval_images_per_dataset=10))
        write_scenes(bench.train, tmp_path / "a.jsonl")
        write_scenes(again.train, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_invariants(self, bench):
        cfg = BenchConfig()
        for s in bench.train + bench.test:
            assert 1 <= len(s.objects) <= cfg.top_k
            allowed = set(bench.labelspace.datasets[s.dataset_id].global_ids)
            assert set(s.classes) <= allowed
            for _, b in s.objects + s.distractors:
                assert 0 < b[2] <= 1 and 0 < b[3] <= 1
                assert cell_mask(b, s.grid).any()
            for c, _ in s.distractors:
                assert c not in allowed and c not in bench.aliased_ids

    def test_distractors_only_with_aliases(self, bench):
        with_d = [s for s in bench.train if s.distractors]
        assert with_d
        for s in with_d:
            assert set(s.classes) & bench.aliased_ids

    def test_json_roundtrip(self, tmp_path, bench):
        write_scenes(bench.test, tmp_path / "t.jsonl")
        back = read_scenes(tmp_path / "t.jsonl")
        assert [s.to_json() for s in back] == [s.to_json() for s in bench.test]

    def test_infeasible_object_count(self):
        with pytest.raises(ConfigError):
            generate_datasets(BenchConfig(classes_per_dataset=1, n_per_class=1, top_k=3, alias_fraction=0.0))


class TestFeatures:
    def test_decomposition(self, bench):
        table = bench.table.rows
        a = (0, [0.3, 0.3, 0.3, 0.3])
        b = (3, [0.6, 0.6, 0.4, 0.2])
        both = Scene(0, 0, [a, b], (8, 8), 11)
        only_a = Scene(0, 0, [a], (8, 8), 11)
        only_b = Scene(0, 0, [b], (8, 8), 11)
        pe = positional_grid((8, 8), table.shape[1])
        noise = feature_noise(both, table.shape[1], 0.05)
        resid = (synthesize_features(both, table) - synthesize_features(only_a, table)
                 - synthesize_features(only_b, table) + pe + noise)
        assert np.abs(resid).max() < 1e-12

    def test_empty_scene_is_pe_plus_noise(self, bench):
        s = Scene(0, 0, [], (8, 8), 5)
        d = bench.table.d
        f = synthesize_features(s, bench.table)
        np.testing.assert_allclose(f, positional_grid((8, 8), d) + feature_noise(s, d, 0.05), atol=0)

    def test_full_image_object(self, bench):
        s = Scene(0, 0, [(2, [0.5, 0.5, 1.0, 1.0])], (8, 8), 5)
        f = synthesize_features(s, bench.table, sigma=0.0)
        np.testing.assert_allclose(f - positional_grid((8, 8), bench.table.d), np.tile(bench.table.rows[2], (64, 1)),
                                   atol=1e-15)

    def test_distractor_appears_in_features(self, bench):
        s = next(s for s in bench.train if s.distractors)
        with_d = synthesize_features(s, bench.table)
        no_d = synthesize_features(Scene(s.image_id, s.dataset_id, s.objects, s.grid, s.noise_seed), bench.table)
        assert not np.allclose(with_d, no_d)
