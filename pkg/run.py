#!/usr/bin/env python3
"""Command entry point for inemo.

Usage:
    python run.py gen-data --out data/datasets/desk --preset desk
    python run.py train --data data/datasets/desk --out data/runs/desk
    python run.py eval --checkpoint data/runs/desk/task-03.ckpt --out report.json
    python run.py pose-eval --checkpoint data/runs/desk/task-03.ckpt --self-render
"""

from __future__ import annotations

import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from inemo.commands.cli import main  # noqa: E402

if __name__ == "__main__":
    raise SystemExit(main())
