#!/usr/bin/env python3
"""
CryptoMamba command line

Usage:
    python cryptomamba.py ingest data/BTC-USD.csv
    python cryptomamba.py train --set train.max_epochs=50
    python cryptomamba.py evaluate --split test
    python cryptomamba.py backtest --split val
    python cryptomamba.py report
"""

import sys

from crypto_mamba.cli import main

if __name__ == "__main__":
    sys.exit(main())
