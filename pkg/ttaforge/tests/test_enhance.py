import math

import numpy as np
import pytest

from ttaforge.core import BoundingBox, Detection, Image
from ttaforge.evalkit import average_precision, match
from ttaforge.idm.enhance import AffinityParams, affinity, enhance, enhance_one


class RedEmbedder(object):
    """Red crops embed to e0, everything else to e1."""

    dim = 2

    def embed(self, crop):
        red = crop.pixels[..., 0].mean() > 0.6 and crop.pixels[..., 1].mean() < 0.4
        return np.array([1.0, 0.0]) if red else np.array([0.0, 1.0])


def test_affinity_closed_form():
    params = AffinityParams(alpha=5.0, beta=5.0)
    assert affinity(1.0, params) == 5.0
    assert abs(affinity(0.0, params) - 5.0 * math.exp(-5.0)) < 1e-12
    np.testing.assert_allclose(affinity(np.array([-1.0, 0.5]), params), 5.0 * np.exp(-5.0 * np.array([2.0, 0.5])))
    values = affinity(np.linspace(-1, 1, 21), params)
    assert np.all(np.diff(values) > 0)


def test_affinity_params():
    assert AffinityParams.preset("coco-c") == AffinityParams(1.0, 5.0)
    assert AffinityParams.preset("pascal-c", th_me=0.4).th_me == 0.4
    with pytest.raises(ValueError):
        AffinityParams(alpha=0.0)
    with pytest.raises(ValueError):
        AffinityParams(th_me=1.5)
    with pytest.raises(KeyError):
        AffinityParams.preset("imagenet")


def test_enhancement_gating(embedder):
    image = Image(np.random.default_rng(0).uniform(size=(16, 16, 3)))
    params = AffinityParams(th_me=0.3)
    prototypes = {0: embedder.embed(Image.full(4, 4, 0.2))}
    low = Detection(BoundingBox(0, 0, 8, 8), [0.3, 0.1])
    high = Detection(BoundingBox(0, 0, 8, 8), [0.31, 0.1])

    assert enhance_one(image, low, prototypes, embedder, params) is low
    assert enhance_one(image, high, {}, embedder, params) is high
    assert enhance_one(image, high, prototypes, embedder, params) is not high


def test_enhancement_is_additive(embedder, rng):
    image = Image(rng.uniform(size=(32, 32, 3)))
    params = AffinityParams()
    prototypes = {0: embedder.embed(Image(rng.uniform(size=(6, 6, 3)))), 2: embedder.embed(Image.full(5, 5, 0.9))}
    detection = Detection(BoundingBox(3, 4, 17, 21), [0.5, 0.2, 0.4])

    enhanced = enhance_one(image, detection, prototypes, embedder, params)

    feat = embedder.embed(Image(image.pixels[4:21, 3:17]))
    bonus = np.array([affinity(float(feat @ prototypes[0]), params), 0.0, affinity(float(feat @ prototypes[2]), params)])
    np.testing.assert_array_equal(enhanced.scores, detection.scores + bonus)
    assert enhanced.box == detection.box


def test_enhancement_relabels():
    image = Image.full(16, 16, 0.5)
    prototypes = {1: np.array([0.0, 1.0])}
    detection = Detection(BoundingBox(0, 0, 8, 8), [0.6, 0.5])
    enhanced = enhance_one(image, detection, prototypes, RedEmbedder(), AffinityParams())
    assert detection.label == 0
    assert enhanced.label == 1
    assert enhanced.score == pytest.approx(5.5)


def test_enhancement_skips_degenerate_boxes(embedder):
    image = Image.full(16, 16, 0.5)
    outside = Detection(BoundingBox(20, 20, 30, 30), [0.9, 0.0])
    assert enhance_one(image, outside, {0: np.array([1.0] + [0.0] * 63)}, embedder, AffinityParams()) is outside


def test_enhance_reorders_true_positives():
    pixels = np.full((32, 32, 3), 0.5)
    pixels[0:8, 0:8] = (0.9, 0.1, 0.1)
    pixels[16:24, 16:24] = (0.9, 0.1, 0.1)
    image = Image(pixels)
    ground_truth = [BoundingBox(0, 0, 8, 8), BoundingBox(16, 16, 24, 24)]
    detections = [
        Detection(BoundingBox(0, 0, 8, 8), [0.40, 0.1]),
        Detection(BoundingBox(16, 16, 24, 24), [0.45, 0.1]),
        Detection(BoundingBox(0, 16, 8, 24), [0.50, 0.1]),
        Detection(BoundingBox(16, 0, 24, 8), [0.60, 0.1]),
    ]
    params = AffinityParams(alpha=5.0, beta=5.0, th_me=0.3)
    assert 0.60 - 0.40 < params.alpha * (1 - math.exp(-params.beta))

    def ap(dets):
        return average_precision(match([(d.box, d.scores[0]) for d in dets], ground_truth, 0.5), len(ground_truth))

    enhanced = enhance(image, detections, {0: np.array([1.0, 0.0])}, RedEmbedder(), params)

    assert [d.box for d in enhanced] == [d.box for d in detections]
    assert min(d.score for d in enhanced[:2]) > max(d.score for d in enhanced[2:])
    assert ap(detections) < 1.0
    assert ap(enhanced) == 1.0
