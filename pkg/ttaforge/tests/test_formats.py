from collections import OrderedDict

import numpy as np
import pytest

from ttaforge.core import Image
from ttaforge.errors import ContainerError
from ttaforge.formats import NPYPlugin, PNGPlugin, container, handler_for, load_image, save_image


def test_handler_dispatch():
    assert handler_for("a/b.png") is PNGPlugin
    assert handler_for("a/B.PNG") is PNGPlugin
    assert handler_for("x.npy") is NPYPlugin
    with pytest.raises(ValueError):
        handler_for("x.tiff")


def test_png_is_lossless_at_8_bits(tmp_path):
    pixels = np.random.default_rng(0).integers(0, 256, (9, 7, 3)) / 255.0
    save_image(tmp_path / "a.png", Image(pixels))
    loaded = load_image(tmp_path / "a.png")
    assert loaded.shape == (9, 7)
    np.testing.assert_allclose(loaded.pixels, pixels, atol=1e-12)


def test_png_bytes_are_stable(tmp_path):
    image = Image(np.random.default_rng(1).uniform(size=(8, 8, 3)))
    save_image(tmp_path / "a.png", image)
    save_image(tmp_path / "b.png", image)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_npy_keeps_floats(tmp_path):
    image = Image(np.random.default_rng(2).uniform(size=(5, 6, 3)))
    save_image(tmp_path / "a.npy", image)
    assert load_image(tmp_path / "a.npy") == image


def test_container_layout():
    sections = OrderedDict([("A", np.arange(6, dtype=np.float32).reshape(2, 3)), ("bias", np.array([0.5, -1.0]))])
    raw = container.dumps(sections, seed=12)
    assert raw[:8] == b"TTAFORGE"
    assert int.from_bytes(raw[8:10], "little") == 1
    assert int.from_bytes(raw[10:18], "little") == 12
    # tag "A": length, tag, ndim, two u32 dims, six float32
    assert raw[18:20] == b"\x01A"
    assert len(raw) == 18 + (1 + 1 + 1 + 8 + 24) + (1 + 4 + 1 + 4 + 8)

    seed, loaded = container.loads(raw)
    assert seed == 12
    assert list(loaded) == ["A", "bias"]
    np.testing.assert_array_equal(loaded["A"], sections["A"])
    assert loaded["bias"].dtype == np.float32


@pytest.mark.parametrize(
    "mutate",
    [
        lambda raw: raw[:10],
        lambda raw: b"NOTFORGE" + raw[8:],
        lambda raw: raw[:8] + (2).to_bytes(2, "little") + raw[10:],
        lambda raw: raw[:-3],
        lambda raw: raw[:20],
    ],
)
def test_container_errors(mutate):
    raw = container.dumps(OrderedDict([("W", np.ones((2, 2)))]), seed=0)
    with pytest.raises(ContainerError):
        container.loads(mutate(raw))
