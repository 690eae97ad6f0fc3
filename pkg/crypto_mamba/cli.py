"""
Command-line interface

Usage:
    cryptomamba ingest data/BTC-USD.csv
    cryptomamba train --config configs/default.yaml --set train.max_epochs=50
    cryptomamba evaluate --split test
    cryptomamba predict --as-of 2024-09-16
    cryptomamba backtest --split val --predictor persistence
    cryptomamba report
"""

import argparse
import logging
import os
import sys
from datetime import date
from typing import List, Optional

from dotenv import load_dotenv

from .config import LOG_LEVEL_ENV, RunConfig, load_config
from .data import load_csv
from .errors import ConfigError, CryptoMambaError, DataError
from .pipeline import PREDICTORS, SPLITS, ForecastPipeline
from .report import write_report
from .training import EpochRecord

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4
EXIT_INTERRUPT = 130

# Reference test-split MAPE, printed next to the measured one.
REFERENCE_TEST_MAPE = 2.034


def exit_code_for(error: Exception) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, DataError):
        return EXIT_DATA
    return EXIT_RUNTIME


def banner(title: str) -> None:
    print(f"\n{'=' * 60}")
    print(title)
    print(f"{'=' * 60}")


def _config(args) -> RunConfig:
    return load_config(args.config, args.overrides)


def cmd_ingest(args) -> int:
    dataset = load_csv(args.data_path)
    banner("INGEST OK")
    print(f"{len(dataset)} bars, {dataset.start} .. {dataset.end}")
    return EXIT_OK


def print_epoch(record: EpochRecord) -> None:
    print(f"  epoch {record.epoch:>4}  train {record.train_rmse:.6f}  val {record.val_rmse:.6f}  lr {record.lr:.3g}")


def cmd_train(args) -> int:
    pipeline = ForecastPipeline(_config(args))
    banner("TRAINING CRYPTOMAMBA")
    outcome = pipeline.train(on_epoch=print_epoch)
    result = outcome.result
    print(f"Parameters: {outcome.parameter_count}")
    print(f"Epochs run: {len(result.history)}{' (early stop)' if result.stopped_early else ''}")
    print(f"Best validation RMSE (normalized): {result.best_val_rmse:.6f} at epoch {result.best_epoch}")
    print(f"Checkpoint: {outcome.checkpoint_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pipeline = ForecastPipeline(_config(args))
    reports = pipeline.evaluate(args.split)
    banner(f"EVALUATION ({args.split})")
    print(f"{'model':<14}{'RMSE':>14}{'MAPE %':>10}{'MAE':>14}{'n':>7}")
    for name, report in reports.items():
        print(f"{name:<14}{report.rmse:>14.3f}{report.mape:>10.3f}{report.mae:>14.3f}{report.n:>7}")
    if args.split == "test":
        print(f"\nReference test MAPE: {REFERENCE_TEST_MAPE}")
    return EXIT_OK


def cmd_predict(args) -> int:
    pipeline = ForecastPipeline(_config(args))
    target_date, price = pipeline.predict(args.as_of)
    banner("NEXT-DAY FORECAST")
    print(f"{target_date.isoformat()} close: {price:.2f} USD")
    return EXIT_OK


def cmd_backtest(args) -> int:
    pipeline = ForecastPipeline(_config(args))
    results = pipeline.backtest(args.split, args.predictor)
    banner(f"BACKTEST ({args.split}, {args.predictor} forecasts)")
    print(f"{'strategy':<16}{'final $':>12}{'MDD %':>9}{'trades':>8}")
    for result in results:
        flag = "  net worth went nonpositive" if result.nonpositive_networth else ""
        print(f"{result.strategy:<16}{result.final_balance:>12.2f}{result.mdd_percent:>9.2f}"
              f"{result.trades:>8}{flag}")
    return EXIT_OK


def cmd_report(args) -> int:
    config = _config(args)
    path = write_report(config.output_dir)
    banner("REPORT WRITTEN")
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cryptomamba",
        description="CryptoMamba Bitcoin price forecasting and strategy backtests",
    )
    parser.add_argument("--log-level", default=None,
                        help=f"Logging level (default: ${LOG_LEVEL_ENV} or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="Validate an OHLCV CSV file")
    ingest.add_argument("data_path")
    ingest.set_defaults(handler=cmd_ingest)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", default=None,
                       help="Run config YAML (default: $CRYPTOMAMBA_CONFIG or configs/default.yaml)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Override a config key, e.g. --set train.max_epochs=5 (repeatable)")
        return p

    with_config(sub.add_parser("train", help="Train and write a checkpoint")).set_defaults(handler=cmd_train)

    evaluate = with_config(sub.add_parser("evaluate", help="Regression metrics on a split"))
    evaluate.add_argument("--split", choices=SPLITS, default="test")
    evaluate.set_defaults(handler=cmd_evaluate)

    predict = with_config(sub.add_parser("predict", help="Forecast the next daily close"))
    predict.add_argument("--as-of", type=date.fromisoformat, default=None,
                         help="Last bar to use, YYYY-MM-DD (default: last bar in the file)")
    predict.set_defaults(handler=cmd_predict)

    bt = with_config(sub.add_parser("backtest", help="Simulate the trading strategies on a split"))
    bt.add_argument("--split", choices=SPLITS, default="test")
    bt.add_argument("--predictor", choices=PREDICTORS, default="model")
    bt.set_defaults(handler=cmd_backtest)

    with_config(sub.add_parser("report", help="Bundle run artifacts into report.json")).set_defaults(
        handler=cmd_report)
    return parser


def setup_logging(level: Optional[str]) -> None:
    name = (level or os.environ.get(LOG_LEVEL_ENV) or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except KeyboardInterrupt:
        print("\n\nStopped by user.\n")
        return EXIT_INTERRUPT
    except CryptoMambaError as e:
        logger.error(str(e))
        print(f"\n⚠ {type(e).__name__}: {e}\n", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
