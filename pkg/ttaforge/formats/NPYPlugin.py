import numpy as np

from ttaforge.core import Image


class NPYPlugin(object):
    name = "NPYPlugin"

    DEFAULT_EXTENSIONS = [".npy"]

    def __init__(self, path):
        super(NPYPlugin, self).__init__()
        self.path = path

    def __call__(self, *args, **kwargs) -> Image:
        return Image(np.load(self.path, allow_pickle=False))

    @classmethod
    def write(cls, path, image: Image):
        np.save(path, np.ascontiguousarray(image.pixels), allow_pickle=False)
