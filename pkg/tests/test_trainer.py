"""
モデル学習 テストケース
"""
import numpy as np
import pytest

from src.corpus import Example, generate_synthetic_corpus, parse_corpus, split_corpus
from src.error_handler import ConfigError, InputError
from src.model import ModelConfig
from src.trainer import TrainConfig, accuracy, clip_gradients, train

from tests.conftest import SMALL_MODEL


class TestTrainConfig:
    """学習設定の検証"""

    @pytest.mark.parametrize("values", [
        dict(epochs=-1), dict(batch_size=0), dict(lr=0.0), dict(momentum=1.0), dict(clip_norm=0.0),
    ])
    def test_invalid_values(self, values):
        with pytest.raises(ConfigError):
            TrainConfig(**values)


class TestClipGradients:
    """勾配の全体ノルムクリップ"""

    def test_small_gradients_unchanged(self):
        grads = {"a": np.array([0.3, 0.4]), "b": np.zeros((2, 2))}
        clipped, norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(0.5)
        assert clipped is grads

    # TC-020: ノルムが上限を超える場合は全パラメータを同じ比率で縮小する
    def test_large_gradients_scaled_jointly(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[0.0, 4.0]])}
        clipped, norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(clipped["a"], [0.6, 0.0])
        np.testing.assert_allclose(clipped["b"], [[0.0, 0.8]])
        total = np.sqrt(sum(np.sum(g ** 2) for g in clipped.values()))
        assert total == pytest.approx(1.0)


class TestTrain:
    """学習処理"""

    def setup_method(self):
        self.examples = parse_corpus(generate_synthetic_corpus(40, seed=0))
        self.model_config = ModelConfig(**SMALL_MODEL)

    # TC-001: 同じシードならパラメータがビット単位で一致する
    def test_training_is_deterministic(self):
        config = TrainConfig(epochs=1, batch_size=8, seed=3)
        a = train(self.examples, self.model_config, config)
        b = train(self.examples, self.model_config, config)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_metadata_recorded(self):
        train_split, validation, _ = split_corpus(self.examples, seed=0)
        checkpoint = train(train_split, self.model_config, TrainConfig(epochs=2, batch_size=8), validation)
        meta = checkpoint.training
        assert meta["epochs"] == 2
        assert meta["n_train"] == len(train_split)
        assert len(meta["loss_history"]) == 2
        assert len(meta["validation_accuracy_history"]) == 2
        assert 0.0 <= meta["validation_accuracy"] <= 1.0

    def test_zero_epochs_returns_initial_model(self):
        checkpoint = train(self.examples, self.model_config, TrainConfig(epochs=0))
        assert checkpoint.training["loss_history"] == []
        assert checkpoint.vocab.tokens[:3] == ["[PAD]", "[UNK]", "[CLS]"]

    def test_single_class_rejected(self):
        examples = [Example(1, "good movie"), Example(1, "great story")]
        with pytest.raises(InputError):
            train(examples, self.model_config, TrainConfig(epochs=1))

    def test_label_out_of_range(self):
        examples = [Example(0, "good movie"), Example(2, "great story")]
        with pytest.raises(InputError):
            train(examples, self.model_config, TrainConfig(epochs=1))

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            train([], self.model_config, TrainConfig(epochs=1))


@pytest.mark.slow
class TestTrainingQuality:
    """既定の最適化設定で 2000 例のキーワードコーパスを学習する"""

    # TC-010: キーワードで決まるラベルは高精度で学習できる
    def test_learns_keyword_task(self, keyword_model):
        checkpoint, test_instances = keyword_model
        assert checkpoint.training["validation_accuracy"] >= 0.90
        assert accuracy(checkpoint, test_instances) >= 0.90

    # TC-011: エポックごとの学習損失は前エポックの 1.05 倍を超えない
    def test_loss_does_not_regress(self, keyword_model):
        losses = keyword_model[0].training["loss_history"]
        assert len(losses) == 20
        for previous, current in zip(losses, losses[1:]):
            assert current <= previous * 1.05
