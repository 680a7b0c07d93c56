"""
寄与度マップ テストケース
"""
import json

import numpy as np
import pytest

from src.attribution import AttributionMap, attribute_dataset, instance_rng, validate_attribution
from src.error_handler import InputError, InvalidValueError


class TestAttributionMap:
    """AttributionMap のテストケース"""

    def setup_method(self):
        self.attribution = AttributionMap(method="ig", tokens=["[CLS]", "good", "movie"],
                                          scores=[0.1, -0.4, 0.25], target=1, seed=7)

    def test_cls_index(self):
        assert self.attribution.cls_index == 0
        other = AttributionMap(method="random", tokens=["7", "8"], scores=[0.1, 0.2], target=0, seed=0)
        assert other.cls_index is None

    # TC-001: JSON 形式（非ボトルネック手法の layer / beta は null）
    def test_to_json(self):
        data = json.loads(self.attribution.to_json({"version": "1.0.0"}))
        assert data == {
            "method": "ig", "layer": None, "beta": None, "tokens": ["[CLS]", "good", "movie"],
            "scores": [0.1, -0.4, 0.25], "target": 1, "seed": 7, "version": "1.0.0",
        }

    def test_from_dict(self):
        restored = AttributionMap.from_dict(self.attribution.to_dict())
        assert restored.tokens == self.attribution.tokens
        np.testing.assert_array_equal(restored.scores, self.attribution.scores)

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            AttributionMap(method="ig", tokens=["a"], scores=[0.1, 0.2], target=0, seed=0)

    def test_non_finite_scores(self):
        with pytest.raises(InvalidValueError):
            AttributionMap(method="ig", tokens=["a"], scores=[np.nan], target=0, seed=0)


class TestValidateAttribution:
    """スキーマ検証"""

    def setup_method(self):
        self.valid = {"method": "iba", "layer": 1, "beta": 1e-5, "tokens": ["[CLS]", "a"],
                      "scores": [0.0, 2.5], "target": 0, "seed": 0}

    def test_valid(self):
        assert validate_attribution(self.valid) == (True, [])

    @pytest.mark.parametrize("changes", [
        {"method": 3},
        {"target": "0"},
        {"seed": True},
        {"layer": "1"},
        {"beta": 0},
        {"scores": [0.0]},
        {"scores": [0.0, "x"]},
        {"scores": [0.0, -1.0]},
        {"tokens": ["[CLS]", 5]},
    ])
    def test_invalid(self, changes):
        data = dict(self.valid)
        data.update(changes)
        is_valid, errors = validate_attribution(data)
        assert not is_valid
        assert errors

    def test_missing_key(self):
        data = dict(self.valid)
        del data["tokens"]
        assert validate_attribution(data)[0] is False

    def test_negative_scores_allowed_for_gradients(self):
        data = dict(self.valid, method="ig", layer=None, beta=None, scores=[0.0, -1.0])
        assert validate_attribution(data) == (True, [])


class TestAttributeDataset:
    """インスタンス単位の実行"""

    def test_rng_streams_are_independent_of_jobs(self):
        instances = list(range(6))
        targets = [0] * 6

        def draw(index, instance, target, rng):
            return (index, float(rng.random()))

        serial = attribute_dataset(instances, targets, draw, seed=2, jobs=1)
        parallel = attribute_dataset(instances, targets, draw, seed=2, jobs=3)
        assert serial == parallel
        assert serial[4][1] == instance_rng(2, 4).random()

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            attribute_dataset([1, 2], [0], lambda *args: None, seed=0)
