# =============================================================================
# ROOT CONFTEST - conftest.py
# =============================================================================
# Puts the repository root on sys.path so the top-level packages import
# without installation.
# =============================================================================

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
