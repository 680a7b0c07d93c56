"""
コマンドラインインターフェース

    gen-corpus  合成コーパスを生成
    train       モデルを学習してチェックポイントを保存
    attribute   1インスタンスの寄与度（JSON、任意でヒートマップ）
    degrade     劣化テスト（曲線 CSV と要約 JSON）
    sweep       層 / β スイープ（CSV）

エラー時は標準エラーに "error: <category>: <message>" を1行出力し、非ゼロで終了する。
"""
import argparse
import json
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config_manager import METHODS, TARGET_MODES, ConfigManager, RunConfig
from .corpus import generate_synthetic_corpus, load_corpus, split_corpus, write_corpus
from .error_handler import GlobalErrorHandler, UsageError, get_logger, setup_logging
from .evaluation import REMOVAL_MODES
from .heatmap import render_png, write_html
from .iba import BETA_MODES, STATS_MODES
from .performance_monitor import PerformanceMonitor, PerformanceReporter
from .pipeline import (
    MethodFactory, attribute_one, degradation_summary, evaluation_instances, load_splits, run_degradation,
    run_sweep, select_instance,
)
from .trainer import accuracy, to_instances, train


logger = get_logger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """解析エラーを UsageError として送出する"""

    def error(self, message: str):
        raise UsageError(message)


def _method_name(value: str) -> str:
    if value not in METHODS:
        raise argparse.ArgumentTypeError(f"unknown method '{value}' (valid: {', '.join(METHODS)})")
    return value


def _method_list(value: str) -> List[str]:
    return [_method_name(v.strip()) for v in value.split(",") if v.strip()]


def _float_list(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"数値のカンマ区切りリストではありません: {value}") from None


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="ibakit", description="Information bottleneck attribution toolkit")
    parser.add_argument("--version", action="version", version=f"ibakit {__version__}")

    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="設定ファイル (フラットな JSON)")
    common.add_argument("--corpus", help="コーパスファイル (JSON lines)")
    common.add_argument("--checkpoint", help="チェックポイントファイル")
    common.add_argument("--out", help="出力ディレクトリ")
    common.add_argument("--seed", type=int, help="グローバルシード")
    common.add_argument("--jobs", type=int, help="インスタンス並列数の上限")
    common.add_argument("--log-dir", help="ログファイル出力先")
    common.add_argument("--verbose", action="store_true", help="INFO ログをコンソールに出力")

    bottleneck = ArgumentParser(add_help=False)
    bottleneck.add_argument("--layer", type=int, help="ボトルネックを挿入する層 (0..n_layers)")
    bottleneck.add_argument("--beta", type=float, help="KL 項の重み β (> 0)")
    bottleneck.add_argument("--beta-mode", choices=BETA_MODES, help="fixed: --beta を使用 / estimate: 10·CE/KL")
    bottleneck.add_argument("--steps", type=int, help="最適化ステップ数")
    bottleneck.add_argument("--duplicates", type=int, help="1ステップあたりのノイズ複製数")
    bottleneck.add_argument("--lr", type=float, help="α の学習率")
    bottleneck.add_argument("--stats-mode", choices=STATS_MODES, help="ノイズ統計の単位")
    bottleneck.add_argument("--target", choices=TARGET_MODES, help="寄与度の対象クラス")

    evaluation = ArgumentParser(add_help=False)
    evaluation.add_argument("--fractions", type=_float_list, help="削除割合グリッド (カンマ区切り、0 と 1 を含む)")
    evaluation.add_argument("--removal", choices=REMOVAL_MODES, help="トークン削除方法")
    evaluation.add_argument("--limit", type=int, help="評価インスタンス数の上限")

    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True

    gen = subparsers.add_parser("gen-corpus", parents=[common], help="合成コーパスを生成")
    gen.add_argument("--size", type=int, help="例の数")

    train_parser = subparsers.add_parser("train", parents=[common], help="モデルを学習")
    train_parser.add_argument("--epochs", type=int, help="エポック数")
    train_parser.add_argument("--train-lr", type=float, help="SGD の学習率")
    train_parser.add_argument("--clip-norm", type=float, help="勾配の全体ノルムの上限")

    attribute = subparsers.add_parser("attribute", parents=[common, bottleneck], help="寄与度を計算")
    attribute.add_argument("--method", type=_method_name,
                           help=f"手法 ({', '.join(METHODS)})。未指定時は設定の methods の先頭")
    attribute.add_argument("--index", type=int, default=0, help="テスト分割内のインスタンス番号")
    attribute.add_argument("--text", help="任意のテキストを対象にする")
    attribute.add_argument("--heatmap", help="ヒートマップの出力先 (.html または .png)")

    degrade = subparsers.add_parser("degrade", parents=[common, bottleneck, evaluation], help="劣化テスト")
    degrade.add_argument("--method", type=_method_list, help="手法のカンマ区切りリスト")

    sweep = subparsers.add_parser("sweep", parents=[common, bottleneck, evaluation], help="層 / β スイープ")
    sweep.add_argument("--axis", choices=("layer", "beta"), required=True, help="スイープ軸")
    sweep.add_argument("--values", type=_float_list, help="軸の値 (カンマ区切り)")
    return parser


FLAG_KEYS = {
    "corpus": "corpus", "checkpoint": "checkpoint", "out": "out", "seed": "seed", "jobs": "jobs",
    "size": "corpus_size", "epochs": "epochs", "train_lr": "train_lr", "clip_norm": "clip_norm",
    "layer": "layer", "beta": "beta", "beta_mode": "beta_mode", "steps": "steps", "duplicates": "duplicates",
    "lr": "lr", "stats_mode": "stats_mode", "target": "target",
    "fractions": "fractions", "removal": "removal", "limit": "limit",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """既定値 < --config < フラグ"""
    overrides: Dict[str, Any] = {key: getattr(args, attr) for attr, key in FLAG_KEYS.items() if hasattr(args, attr)}
    method = getattr(args, "method", None)
    if method is not None:
        overrides["methods"] = method if isinstance(method, list) else [method]
    manager = ConfigManager(args.config)
    return manager.resolve(manager.load_config(), overrides)


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    logger.info(f"出力しました: {path}")
    return path


def _write_json(path: Path, data: Dict[str, Any]) -> Path:
    return _write_text(path, json.dumps(data, ensure_ascii=False, indent=2) + "\n")


# ======================================================================
# コマンド
# ======================================================================

def cmd_gen_corpus(args: argparse.Namespace, config: RunConfig, monitor: PerformanceMonitor) -> int:
    with monitor.stage("gen-corpus"):
        lines = generate_synthetic_corpus(config["corpus_size"], config["seed"])
        path = write_corpus(lines, config["corpus"])
    print(f"wrote {config['corpus_size']} examples to {path}")
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig, monitor: PerformanceMonitor) -> int:
    with monitor.stage("load-corpus"):
        train_split, validation_split, test_split = split_corpus(load_corpus(config["corpus"]), config["seed"])
    with monitor.stage("train"):
        checkpoint = train(train_split, config.model_config(), config.train_config(), validation_split)
    with monitor.stage("save"):
        path = save_checkpoint(checkpoint, config["checkpoint"])
        test_instances = to_instances(test_split, checkpoint.vocab, checkpoint.config.max_seq_len)
        metrics = {
            "train_accuracy": checkpoint.training["train_accuracy"],
            "validation_accuracy": checkpoint.training["validation_accuracy"],
            "test_accuracy": accuracy(checkpoint, test_instances) if test_instances else None,
            "loss_history": checkpoint.training["loss_history"],
            "validation_accuracy_history": checkpoint.training["validation_accuracy_history"],
            "n_train": len(train_split),
            "n_validation": len(validation_split),
            "n_test": len(test_split),
            **config.provenance(),
        }
        _write_json(Path(config["out"]) / "train_metrics.json", metrics)
    print(f"checkpoint: {path} (validation accuracy {metrics['validation_accuracy']})")
    return 0


def _prepare(config: RunConfig, monitor: PerformanceMonitor):
    with monitor.stage("load"):
        checkpoint = load_checkpoint(config["checkpoint"])
        splits = load_splits(config, checkpoint)
        factory = MethodFactory(checkpoint, config, splits.train[:config["calibration_size"]])
    return checkpoint, splits, factory


def cmd_attribute(args: argparse.Namespace, config: RunConfig, monitor: PerformanceMonitor) -> int:
    checkpoint, splits, factory = _prepare(config, monitor)
    method = config["methods"][0]
    instance = select_instance(config, checkpoint, splits, args.index, args.text)
    with monitor.stage(f"attribute:{method}"):
        attribution = attribute_one(config, checkpoint, factory, method, instance, args.index)

    name = f"attribution_{method}_{'text' if args.text is not None else args.index}.json"
    _write_text(Path(config["out"]) / name, attribution.to_json(config.provenance()) + "\n")
    if args.heatmap:
        heatmap_path = Path(args.heatmap)
        if heatmap_path.suffix.lower() == ".png":
            render_png(attribution, heatmap_path)
        else:
            write_html(attribution, heatmap_path)
    print(" ".join(f"{t}:{s:.4g}" for t, s in zip(attribution.tokens, attribution.scores)))
    return 0


def cmd_degrade(args: argparse.Namespace, config: RunConfig, monitor: PerformanceMonitor) -> int:
    checkpoint, splits, factory = _prepare(config, monitor)
    instances = evaluation_instances(splits, config["limit"])
    with monitor.stage("degrade"):
        result = run_degradation(config, checkpoint, factory, instances, config["methods"])

    out = Path(config["out"])
    _write_text(out / "curves.csv", result.curves_csv())
    _write_json(out / "summary.json", degradation_summary(config, result))
    for method, drop in result.drops.items():
        print(f"{method}: drop_at_11pct={drop:.4f}")
    return 0


def cmd_sweep(args: argparse.Namespace, config: RunConfig, monitor: PerformanceMonitor) -> int:
    checkpoint, splits, factory = _prepare(config, monitor)
    instances = evaluation_instances(splits, config["limit"])
    values = args.values if args.values is not None else config["layers" if args.axis == "layer" else "betas"]
    with monitor.stage(f"sweep:{args.axis}"):
        report = run_sweep(config, checkpoint, factory, instances, args.axis, values)

    out = Path(config["out"])
    _write_text(out / f"sweep_{args.axis}.csv", report.to_csv())
    _write_text(out / f"sweep_{args.axis}_curves.csv", report.curves_csv())
    _write_json(out / f"sweep_{args.axis}.json", {"axis": args.axis, "values": report.values, **config.provenance()})
    for point in report.points:
        print(f"{args.axis}={point.value}: drop_at_11pct={point.drop_at_11pct:.4f}, "
              f"mean_mu_final={point.mean_mu_final:.4f}")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig, PerformanceMonitor], int]] = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "attribute": cmd_attribute,
    "degrade": cmd_degrade,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """エントリポイント。終了コードを返す"""
    setup_logging()
    handler = GlobalErrorHandler()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        return handler.handle_error(e)

    setup_logging(args.log_dir, args.verbose)
    monitor = PerformanceMonitor()
    try:
        config = resolve_config(args)
        code = COMMANDS[args.command](args, config, monitor)
    except Exception as e:
        return handler.handle_error(e)
    PerformanceReporter(monitor).log_summary()
    return code
