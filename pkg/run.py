#!/usr/bin/env python3
"""
MoWE desk-scale toolkit - main entry point

Prints the active settings and hands the command line to ``mowe.cli``.
"""

import os
import sys

from mowe.cli import main as cli_main
from mowe.config import settings


def main() -> int:
    """Main entry point for the toolkit."""
    print("🚀 Starting MoWE toolkit...", file=sys.stderr)
    print(f"📁 Runs directory: {settings.RUNS_DIR}", file=sys.stderr)
    print(f"⚙️  Default config: {settings.CONFIG_PATH or '(built-in defaults)'}", file=sys.stderr)
    print(f"🧵 Evaluation threads: {settings.THREADS}", file=sys.stderr)

    os.makedirs(settings.RUNS_DIR, exist_ok=True)
    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
