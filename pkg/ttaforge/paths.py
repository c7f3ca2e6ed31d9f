from appdirs import user_config_dir, user_cache_dir
from pathlib import Path
import os

user_cache_dir = user_cache_dir(appname="ttaforge")
user_config_dir = user_config_dir(appname="ttaforge")

log_dir = os.path.join(user_cache_dir, "logs")

try:
    os.makedirs(log_dir)
except FileExistsError:
    pass


def ensure_dir(path) -> Path:
    """Create ``path`` (and parents) if missing and return it as a Path."""
    os.makedirs(path, exist_ok=True)
    return Path(path)
