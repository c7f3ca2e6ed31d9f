import numpy as np
from PIL import Image as PILImage

from ttaforge.core import Image


class PNGPlugin(object):
    """8-bit lossless RGB. Pixels are quantized to multiples of 1/255 on write."""

    name = "PNGPlugin"

    DEFAULT_EXTENSIONS = [".png"]

    def __init__(self, path):
        super(PNGPlugin, self).__init__()
        self.path = path

    def __call__(self, *args, **kwargs) -> Image:
        with PILImage.open(self.path) as f:
            data = np.asarray(f.convert("RGB"), dtype=np.float64)
        return Image(data / 255.0, copy=False)

    @classmethod
    def write(cls, path, image: Image):
        data = np.round(image.pixels * 255.0).astype(np.uint8)
        # no timestamps or text chunks, so equal images give equal bytes
        PILImage.fromarray(data).save(path, format="PNG", optimize=False)
