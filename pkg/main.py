#!/usr/bin/env python3
"""
ibakit メインエントリポイント

    python main.py gen-corpus --corpus data/corpus.jsonl
    python main.py train --corpus data/corpus.jsonl --checkpoint runs/model.ibak
    python main.py degrade --checkpoint runs/model.ibak --out runs/
"""
import sys

from src.cli import main


if __name__ == "__main__":
    sys.exit(main())
