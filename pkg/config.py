"""App configuration. DATA_DIR and paths; runtime knobs from environment."""
import os
from pathlib import Path

from dotenv import load_dotenv

# Load .env from project root so DATA_DIR and thread counts can be set there
load_dotenv(Path(__file__).resolve().parent / ".env")

_PROJECT_ROOT = Path(__file__).resolve().parent
DATA_DIR = Path(os.environ.get("DATA_DIR", os.path.join(_PROJECT_ROOT, "data")))

# Named experiment presets (flat key/value mappings)
PRESETS_PATH = Path(os.environ.get("INEMO_PRESETS", _PROJECT_ROOT / "presets.yaml"))


def ensure_data_dirs():
    """Create data dir and subdirs if missing."""
    DATA_DIR.mkdir(parents=True, exist_ok=True)
    DATASETS_DIR.mkdir(parents=True, exist_ok=True)
    RUNS_DIR.mkdir(parents=True, exist_ok=True)


# Paths
DATASETS_DIR = DATA_DIR / "datasets"
RUNS_DIR = Path(os.environ.get("INEMO_RUNS_DIR", DATA_DIR / "runs"))

# Evaluation worker threads (default: CPU count, at most 4)
INEMO_THREADS = max(1, int(os.environ.get("INEMO_THREADS", str(min(os.cpu_count() or 1, 4)))))

INEMO_LOG_LEVEL = os.environ.get("INEMO_LOG_LEVEL", "INFO").upper()
