from pathlib import Path
from typing import Union

from ttaforge.core import Image
from .NPYPlugin import NPYPlugin
from .PNGPlugin import PNGPlugin

handlers = [PNGPlugin, NPYPlugin]


def handler_for(path: Union[str, Path]):
    ext = Path(path).suffix.lower()
    for handler in handlers:
        if ext in handler.DEFAULT_EXTENSIONS:
            return handler
    raise ValueError(f"No image handler for extension {ext!r} ({path})")


def load_image(path: Union[str, Path]) -> Image:
    return handler_for(path)(path)()


def save_image(path: Union[str, Path], image: Image):
    handler_for(path).write(path, image)
