"""Version information from pyproject.toml"""
from functools import lru_cache
from importlib import metadata
from pathlib import Path
import tomllib

DISTRIBUTION = "thb-bezier"


@lru_cache(maxsize=1)
def get_version() -> str:
    """Version of the source tree, falling back to the installed distribution."""
    pyproject_path = Path(__file__).resolve().parent.parent / "pyproject.toml"
    try:
        with open(pyproject_path, "rb") as f:
            return tomllib.load(f).get("project", {}).get("version", "unknown")
    except (FileNotFoundError, tomllib.TOMLDecodeError):
        pass
    try:
        return metadata.version(DISTRIBUTION)
    except metadata.PackageNotFoundError:
        return "unknown"
