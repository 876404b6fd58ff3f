import os
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parents[1]

# CLI
FORENSICS_CLI = os.environ.get("FORENSICS_CLI", "trojan_forensics.py")
CLI_PATH = (REPO_ROOT / FORENSICS_CLI).resolve()

# Desk-scale runs (test_99) ; désactivées par défaut
FORENSICS_DESK = os.environ.get("FORENSICS_DESK", "0").strip() == "1"

# Zoo du bureau (test_98) : 32x32, 10 classes
DESK_COUNT = int(os.environ.get("FORENSICS_DESK_COUNT", "6000"))
DESK_SIZE = 32
DESK_CLASSES = 10
DESK_EPOCHS = int(os.environ.get("FORENSICS_DESK_EPOCHS", "8"))
DESK_STEPS = int(os.environ.get("FORENSICS_DESK_STEPS", "500"))
DESK_ZOO = int(os.environ.get("FORENSICS_DESK_ZOO", "10"))

# Entraînements minuscules pour les fixtures de session
FORENSICS_TRAIN_EPOCHS = int(os.environ.get("FORENSICS_TRAIN_EPOCHS", "2"))

# Dataset synthétique des tests : 16x16, 4 classes
TINY_COUNT = int(os.environ.get("FORENSICS_TINY_COUNT", "600"))
TINY_SIZE = 16
TINY_CLASSES = 4

# Tolérances des oracles
ALGEBRA_TOL = 1e-5
NORMALIZE_TOL = 1e-6
