"""
劣化テスト・スイープ テストケース
"""
import numpy as np
import pytest

from src.attribution import AttributionMap, attribute_dataset, instance_rng
from src.baselines import random_attribution
from src.error_handler import (
    ContaminationError, ContractError, InputError, NormalizationError, RangeError,
)
from src.evaluation import (
    CURVE_HEADER, SWEEP_HEADER, AttributionCache, DegradationCurve, ProbabilityCache, SweepPoint, SweepReport,
    absolute_drop_at, beta_sweep, check_fractions, curve_from_attributions, curves_to_csv, default_fractions,
    degradation_curve, degrade_instance, layer_sweep, normalize_curves, removal_count, removal_order,
)
from src.iba import BottleneckConfig, estimate_noise_stats
from src.model import PAD, UNK, predict_proba, tokenize

from tests.conftest import make_checkpoint


TEXTS = ["good movie bad plot", "great story", "awful scene music actor", "bad bad movie", "good"]


def attribution_for(instance, scores, method="test"):
    return AttributionMap(method=method, tokens=["t"] * instance.n_real, scores=np.asarray(scores, dtype=float),
                          target=0, seed=0)


def curve(method, p_mean, fractions=(0.0, 0.5, 1.0)):
    return DegradationCurve(method, np.asarray(fractions, dtype=float), np.asarray(p_mean, dtype=float), n=4)


class TestFractions:
    """割合グリッド"""

    def test_default_grid(self):
        grid = default_fractions()
        assert grid[0] == 0.0 and grid[-1] == 1.0
        assert 0.11 in grid
        assert 0.05 in grid
        assert grid == sorted(set(grid))

    @pytest.mark.parametrize("grid", [[0.0], [0.1, 1.0], [0.0, 0.9], [0.0, 0.5, 0.5, 1.0]])
    def test_invalid_grid(self, grid):
        with pytest.raises(InputError):
            check_fractions(grid)

    # TC-001: k = floor(f · n + 0.5)
    @pytest.mark.parametrize("fraction,n,expected", [
        (0.0, 7, 0), (0.11, 10, 1), (0.1, 5, 1), (0.5, 3, 2), (0.04, 10, 0), (1.0, 6, 6), (0.15, 3, 0),
    ])
    def test_removal_count(self, fraction, n, expected):
        assert removal_count(fraction, n) == expected


class TestDegradeInstance:
    """トークン削除"""

    def setup_method(self):
        self.checkpoint = make_checkpoint()
        self.instance = tokenize("good movie bad plot", self.checkpoint.vocab, 8)
        self.ids = self.instance.token_ids.copy()

    # TC-010: 降順・同点は前の位置が先・CLS は対象外
    def test_removal_order(self):
        attribution = attribution_for(self.instance, [9.0, 0.5, 2.0, 0.5, 1.0])
        assert removal_order(attribution, self.instance).tolist() == [2, 4, 1, 3]

    def test_delete_compacts_sequence(self):
        attribution = attribution_for(self.instance, [9.0, 0.5, 2.0, 0.5, 1.0])
        degraded = degrade_instance(self.instance, attribution, 2)
        assert degraded.token_ids.tolist() == [self.ids[0], self.ids[1], self.ids[3], PAD, PAD, PAD, PAD, PAD]
        assert degraded.mask.tolist() == [True] * 3 + [False] * 5
        np.testing.assert_array_equal(self.instance.token_ids, self.ids)

    def test_unk_replacement_keeps_length(self):
        attribution = attribution_for(self.instance, [9.0, 0.5, 2.0, 0.5, 1.0])
        degraded = degrade_instance(self.instance, attribution, 2, mode="unk")
        assert degraded.token_ids[:5].tolist() == [self.ids[0], self.ids[1], UNK, self.ids[3], UNK]
        np.testing.assert_array_equal(degraded.mask, self.instance.mask)

    def test_remove_everything_keeps_cls(self):
        attribution = attribution_for(self.instance, [0.0, 1.0, 2.0, 3.0, 4.0])
        degraded = degrade_instance(self.instance, attribution, 4)
        assert degraded.n_real == 1
        assert degraded.token_ids[0] == self.ids[0]

    def test_k_out_of_range(self):
        attribution = attribution_for(self.instance, [0.0, 1.0, 2.0, 3.0, 4.0])
        with pytest.raises(RangeError):
            degrade_instance(self.instance, attribution, 5)

    def test_unknown_mode(self):
        attribution = attribution_for(self.instance, [0.0, 1.0, 2.0, 3.0, 4.0])
        with pytest.raises(InputError):
            degrade_instance(self.instance, attribution, 1, mode="mask")

    def test_score_count_mismatch(self):
        with pytest.raises(InputError):
            removal_order(attribution_for(tokenize("good", self.checkpoint.vocab, 8), [0.0, 1.0]), self.instance)


class TestCaches:
    """確率・寄与度キャッシュ"""

    def test_probability_cache(self):
        checkpoint = make_checkpoint()
        cache = ProbabilityCache(checkpoint)
        instance = tokenize("good movie", checkpoint.vocab, 8)
        first = cache.probabilities(instance)
        second = cache.probabilities(tokenize("good movie", checkpoint.vocab, 8))
        assert first is second
        assert (cache.hits, cache.misses, len(cache)) == (1, 1, 1)
        np.testing.assert_array_equal(first, predict_proba(checkpoint, instance.token_ids, instance.mask)[0])

    # TC-011: 上限を超えると最も古く参照された入力から捨てる
    def test_probability_cache_is_bounded(self):
        checkpoint = make_checkpoint()
        cache = ProbabilityCache(checkpoint, max_entries=2)
        good, bad, plot = (tokenize(text, checkpoint.vocab, 8) for text in ("good", "bad", "plot"))
        cache.probabilities(good)
        cache.probabilities(bad)
        cache.probabilities(good)
        cache.probabilities(plot)
        assert len(cache) == 2
        assert cache.misses == 3

        cache.probabilities(good)
        assert cache.misses == 3
        cache.probabilities(bad)
        assert cache.misses == 4
        assert len(cache) == 2

    def test_probability_cache_rejects_empty_bound(self):
        with pytest.raises(InputError):
            ProbabilityCache(make_checkpoint(), max_entries=0)

    def test_attribution_cache_is_write_once(self):
        cache = AttributionCache()
        instance = tokenize("good", make_checkpoint().vocab, 8)
        attribution = random_attribution(instance, make_checkpoint().vocab, seed=0)
        cache.put(0, "random", attribution)
        assert cache.get(0, "random") is attribution
        assert (0, "random") in cache
        assert cache.get(1, "random") is None
        with pytest.raises(ContractError):
            cache.put(0, "random", attribution)


class TestDegradationCurve:
    """劣化曲線"""

    def setup_method(self):
        self.checkpoint = make_checkpoint()
        self.instances = [tokenize(t, self.checkpoint.vocab, 8, label=i % 2) for i, t in enumerate(TEXTS)]
        self.targets = [inst.label for inst in self.instances]
        self.fractions = [0.0, 0.25, 0.5, 1.0]

    def random_method(self, index, instance, target, rng):
        return random_attribution(instance, self.checkpoint.vocab, 0, rng, target=target)

    # TC-020: 端点は手法によらず同じ値
    def test_endpoints_shared_across_methods(self):
        cache = ProbabilityCache(self.checkpoint)
        a = degradation_curve(self.checkpoint, self.instances, self.targets, "random", self.random_method,
                              self.fractions, seed=0, cache=cache)
        b = degradation_curve(self.checkpoint, self.instances, self.targets, "random-2", self.random_method,
                              self.fractions, seed=1, cache=cache)
        assert a.p_mean[0] == b.p_mean[0]
        assert a.p_mean[-1] == b.p_mean[-1]
        probs = [predict_proba(self.checkpoint, i.token_ids, i.mask)[0][t] for i, t in zip(self.instances, self.targets)]
        assert a.original == pytest.approx(np.mean(probs), abs=1e-12)
        assert a.n == len(self.instances)

    # TC-021: 並列数によらず同じ結果
    def test_parallel_matches_sequential(self):
        serial = degradation_curve(self.checkpoint, self.instances, self.targets, "random", self.random_method,
                                   self.fractions, seed=3, jobs=1)
        parallel = degradation_curve(self.checkpoint, self.instances, self.targets, "random", self.random_method,
                                     self.fractions, seed=3, jobs=4)
        np.testing.assert_array_equal(serial.p_mean, parallel.p_mean)

    def test_attribution_cache_reused(self):
        attribution_cache = AttributionCache()
        calls = []

        def counting(index, instance, target, rng):
            calls.append(index)
            return self.random_method(index, instance, target, rng)

        for _ in range(2):
            degradation_curve(self.checkpoint, self.instances, self.targets, "random", counting, self.fractions,
                              seed=0, attribution_cache=attribution_cache)
        assert sorted(calls) == list(range(len(self.instances)))

    # TC-022: 寄与度計算中のチェックポイント変更を検出する
    def test_contamination_detected(self):
        checkpoint = make_checkpoint()

        def tampering(index, instance, target, rng):
            checkpoint.params["classifier.bias"] = np.ones(2)
            return self.random_method(index, instance, target, rng)

        with pytest.raises(ContaminationError):
            degradation_curve(checkpoint, self.instances, self.targets, "random", tampering, self.fractions, seed=0)

    def test_count_mismatch(self):
        attributions = [random_attribution(self.instances[0], self.checkpoint.vocab, 0)]
        with pytest.raises(InputError):
            curve_from_attributions(self.checkpoint, self.instances, self.targets, attributions, self.fractions)

    def test_empty_instances(self):
        with pytest.raises(InputError):
            degradation_curve(self.checkpoint, [], [], "random", self.random_method, self.fractions, seed=0)

    def test_dataset_rng_is_per_instance(self):
        seen = attribute_dataset(self.instances, self.targets, lambda i, inst, t, rng: rng.random(), seed=5, jobs=3)
        assert seen == [instance_rng(5, i).random() for i in range(len(self.instances))]


class TestNormalization:
    """正規化と指標"""

    def test_normalize_against_global_minimum(self):
        curves = [curve("a", [0.9, 0.5, 0.3]), curve("b", [0.9, 0.7, 0.1])]
        normalized = normalize_curves(curves)
        np.testing.assert_allclose(normalized[0].d_norm, [1.0, 0.5, 0.25])
        np.testing.assert_allclose(normalized[1].d_norm, [1.0, 0.75, 0.0])

    def test_degenerate_curve(self):
        with pytest.raises(NormalizationError):
            normalize_curves([curve("a", [0.2, 0.5, 0.2])])

    def test_grid_mismatch(self):
        with pytest.raises(InputError):
            normalize_curves([curve("a", [0.9, 0.5, 0.3]), curve("b", [0.9, 0.5, 0.3], fractions=(0.0, 0.4, 1.0))])

    # TC-030: グリッド上の値はそのまま、グリッド外は線形補間
    def test_absolute_drop(self):
        exact = curve("a", [0.9, 0.7, 0.2], fractions=(0.0, 0.11, 1.0))
        assert absolute_drop_at(exact) == pytest.approx(0.2)
        interpolated = curve("a", [0.9, 0.5, 0.3], fractions=(0.0, 0.22, 1.0))
        assert absolute_drop_at(interpolated) == pytest.approx(0.2)
        with pytest.raises(RangeError):
            absolute_drop_at(exact, 1.5)

    def test_curves_csv(self):
        curves = [curve("a", [0.9, 0.5, 0.3])]
        text = curves_to_csv(curves, normalize_curves(curves))
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(CURVE_HEADER)
        assert lines[1] == "a,0.0,0.9,1.0,4"
        assert len(lines) == 4


class TestSweeps:
    """層 / β スイープ"""

    def setup_method(self):
        self.checkpoint = make_checkpoint()
        self.instances = [tokenize(t, self.checkpoint.vocab, 8, label=i % 2) for i, t in enumerate(TEXTS[:3])]
        self.targets = [inst.label for inst in self.instances]
        self.config = BottleneckConfig(layer=1, steps=2, duplicates=2)
        self.calibration = [tokenize(t, self.checkpoint.vocab, 8) for t in TEXTS]
        self.fractions = [0.0, 0.5, 1.0]

    def stats_for_layer(self, layer):
        return estimate_noise_stats(self.checkpoint, self.calibration, layer)

    def test_layer_sweep(self):
        report = layer_sweep(self.checkpoint, self.instances, self.targets, [2, 0, 1], self.config,
                             self.stats_for_layer, self.fractions, seed=0)
        assert report.values == [0, 1, 2]
        assert all(0.0 < p.mean_mu_final < 1.0 for p in report.points)
        lines = report.to_csv().strip().split("\n")
        assert lines[0] == ",".join(SWEEP_HEADER)
        assert lines[1].startswith("layer,0,")

    # TC-040: 大きな β ほど平均 μ は小さい
    def test_beta_sweep_mean_mu(self):
        report = beta_sweep(self.checkpoint, self.instances, self.targets, [1.0, 1e-5], self.config,
                            self.stats_for_layer(1), self.fractions, seed=0)
        assert report.values == [1e-5, 1.0]
        assert report.points[1].mean_mu_final < report.points[0].mean_mu_final
        assert report.to_csv().split("\n")[1].startswith("beta,1e-05,")

    def test_invalid_sweep_values(self):
        with pytest.raises(RangeError):
            layer_sweep(self.checkpoint, self.instances, self.targets, [3], self.config, self.stats_for_layer,
                        self.fractions, seed=0)
        with pytest.raises(InputError):
            beta_sweep(self.checkpoint, self.instances, self.targets, [0.1, 0.1], self.config,
                       self.stats_for_layer(1), self.fractions, seed=0)
        with pytest.raises(RangeError):
            beta_sweep(self.checkpoint, self.instances, self.targets, [-1.0], self.config,
                       self.stats_for_layer(1), self.fractions, seed=0)

    def test_report_requires_sorted_values(self):
        point = SweepPoint(value=1.0, drop_at_11pct=0.0, mean_mu_final=0.5, curve=curve("iba", [0.9, 0.5, 0.3]))
        other = SweepPoint(value=0.5, drop_at_11pct=0.0, mean_mu_final=0.5, curve=curve("iba", [0.9, 0.5, 0.3]))
        with pytest.raises(InputError):
            SweepReport(axis="beta", points=[point, other])
