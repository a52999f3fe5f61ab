from pathlib import Path

_VERSION_FILE = Path(__file__).resolve().parents[2] / "version.txt"

try:
    __version__ = _VERSION_FILE.read_text().strip()
except OSError:
    __version__ = "0.0.0"
