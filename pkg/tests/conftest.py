"""
テスト共通のフィクスチャ
"""
import pytest

from src.corpus import generate_synthetic_corpus, parse_corpus, split_corpus
from src.model import ModelCheckpoint, ModelConfig, Vocab, init_parameters, tokenize
from src.trainer import TrainConfig, to_instances, train


TINY_WORDS = ["good", "bad", "movie", "plot", "actor", "scene", "music", "story", "great", "awful"]
SMALL_MODEL = dict(vocab_size=128, n_classes=2, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=20)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 学習を伴う受け入れテスト（-m 'not slow' で除外）")


def make_checkpoint(seed: int = 0, n_layers: int = 2, max_seq_len: int = 8) -> ModelCheckpoint:
    """乱数初期化の小さなモデル"""
    config = ModelConfig(vocab_size=16, n_classes=2, d_model=8, n_layers=n_layers, n_heads=2, d_ff=16,
                         max_seq_len=max_seq_len)
    vocab = Vocab(["[PAD]", "[UNK]", "[CLS]"] + TINY_WORDS)
    return ModelCheckpoint(config=config, vocab=vocab, params=init_parameters(config, seed))


@pytest.fixture
def tiny_checkpoint() -> ModelCheckpoint:
    return make_checkpoint()


@pytest.fixture
def tiny_instance(tiny_checkpoint):
    return tokenize("good movie bad plot", tiny_checkpoint.vocab, tiny_checkpoint.config.max_seq_len, label=1)


@pytest.fixture(scope="session")
def keyword_model():
    """2000 例のキーワードコーパスを既定設定で学習したモデルとテスト分割（セッションで1回だけ学習）"""
    examples = parse_corpus(generate_synthetic_corpus(2000, seed=0))
    train_split, validation, test = split_corpus(examples, seed=0)
    checkpoint = train(train_split, ModelConfig(**SMALL_MODEL), TrainConfig(), validation)
    return checkpoint, to_instances(test, checkpoint.vocab, SMALL_MODEL["max_seq_len"])
