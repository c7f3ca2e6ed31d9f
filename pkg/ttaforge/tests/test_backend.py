import math

import numpy as np
import pytest

from ttaforge.backend import Target, ToyDetector, ToyEmbedder, pretrain_source
from ttaforge.core import BoundingBox, CategorySpace, Image
from ttaforge.errors import ShapeError
from ttaforge.formats import container
from ttaforge.prompts import PromptSet

from .conftest import make_scenes


def random_prompts(detector, rng, m=3, scale=0.5):
    text = rng.normal(0.0, scale, (len(detector.categories), detector.text_dim))
    visual = [rng.normal(0.0, scale, (m, d)) for d in detector.layer_dims]
    return PromptSet(text, visual)


def test_tokenize_grid(detector):
    tokens = detector.tokenize(Image.full(64, 64, 0.3))
    assert tokens.shape == (64, detector.dim)


def test_tokenize_zero_image(detector):
    np.testing.assert_array_equal(detector.tokenize(Image.zeros(64, 64)), 0.0)


def test_tokenize_locality(detector, rng):
    pixels = rng.uniform(size=(64, 64, 3))
    changed = pixels.copy()
    # patch at grid row 2, column 5
    changed[16:24, 40:48] = rng.uniform(size=(8, 8, 3))
    a = detector.tokenize(Image(pixels))
    b = detector.tokenize(Image(changed))
    differs = np.any(a != b, axis=1)
    assert list(np.flatnonzero(differs)) == [2 * 8 + 5]


def test_tokenize_rejects_unaligned(detector):
    with pytest.raises(ShapeError):
        detector.tokenize(Image.zeros(60, 64))


def test_encode(detector, rng):
    tokens = detector.tokenize(Image(rng.uniform(size=(32, 32, 3))))
    plain = detector.encode(tokens, [np.zeros((0, detector.dim))] * 2)
    assert plain.shape == tokens.shape

    a = detector.encode(tokens, [rng.normal(size=(4, detector.dim)) for _ in range(2)])
    b = detector.encode(tokens, [rng.normal(size=(4, detector.dim)) for _ in range(2)])
    assert a.shape == tokens.shape
    assert not np.allclose(a, b)

    with pytest.raises(ShapeError):
        detector.encode(tokens, [np.zeros((1, detector.dim))])
    with pytest.raises(ShapeError):
        detector.encode(tokens, [np.zeros((1, detector.dim + 1))] * 2)


def test_text_embed(detector, categories):
    raw = detector.weights["T"].astype(np.float64)
    np.testing.assert_array_equal(detector.text_embed(categories, np.zeros_like(raw)), raw)
    np.testing.assert_array_equal(detector.text_embed(categories, -raw), 0.0)

    delta = np.zeros_like(raw)
    delta[1] = 0.25
    shifted = detector.text_embed(categories, delta)
    np.testing.assert_array_equal(shifted[[0, 2]], raw[[0, 2]])
    np.testing.assert_allclose(shifted[1], raw[1] + 0.25)

    with pytest.raises(ShapeError):
        detector.text_embed(categories, np.zeros((2, detector.text_dim)))
    with pytest.raises(ShapeError):
        detector.text_embed(CategorySpace(("a", "b")), np.zeros((2, detector.text_dim)))


def test_predict(detector, scene, rng):
    image, _ = scene
    prompts = random_prompts(detector, rng)
    first = detector.predict(image, prompts)
    second = detector.predict(image, prompts)

    assert len(first) == 64
    assert [d.box for d in first] == [d.box for d in second]
    assert all(np.array_equal(a.scores, b.scores) for a, b in zip(first, second))

    scores = np.array([d.score for d in first])
    assert np.all(scores > 0) and np.all(scores < 1)
    assert np.all(np.diff(scores) <= 0)
    for d in first:
        assert 0 <= d.box.x1 <= d.box.x2 <= image.width
        assert 0 <= d.box.y1 <= d.box.y2 <= image.height


def test_predict_checks_layer_count(detector, scene):
    image, _ = scene
    with pytest.raises(ShapeError):
        detector.predict(image, PromptSet(np.zeros((3, detector.dim)), [np.zeros((1, detector.dim))]))


def test_prompt_influence(detector, scene, rng):
    image, _ = scene
    prompts = random_prompts(detector, rng, m=2)
    before = np.array([d.scores for d in detector.predict(image, prompts)])

    visual = [v.copy() for v in prompts.visual]
    visual[0][1, 3] += 0.5
    after = np.array([d.scores for d in detector.predict(image, PromptSet(prompts.text, visual))])

    assert np.max(np.abs(np.sort(after, axis=None) - np.sort(before, axis=None))) > 1e-9


def test_loss_at_half_scores(detector, categories, scene):
    image, _ = scene
    prompts = PromptSet(-detector.weights["T"].astype(np.float64), [np.zeros((0, detector.dim))] * 2)
    loss, grads = detector.loss_and_grad(image, [], prompts)
    assert loss.cls == pytest.approx(math.log(2), abs=1e-12)
    assert loss.loc == 0.0
    assert loss.total == pytest.approx(math.log(2), abs=1e-12)
    assert grads.same_shape(prompts)


def test_loss_is_order_invariant(detector, scene, rng):
    image, objects = scene
    targets = [Target(box, category, weight) for (box, category), weight in zip(objects, (1.0, 0.5, 0.8, 0.3))]
    targets.append(Target(BoundingBox(3, 40, 17, 52), 2, 0.6))
    prompts = random_prompts(detector, rng)

    loss, grads = detector.loss_and_grad(image, targets, prompts)
    loss_r, grads_r = detector.loss_and_grad(image, targets[::-1], prompts)

    assert loss.total == pytest.approx(loss_r.total, rel=1e-12)
    assert grads.allclose(grads_r, atol=1e-12, rtol=1e-10)
    assert loss.total >= 0
    assert grads.same_shape(prompts)


def test_loss_rejects_bad_category(detector, scene, rng):
    image, _ = scene
    with pytest.raises(ShapeError):
        detector.loss_and_grad(image, [Target(BoundingBox(0, 0, 8, 8), 7)], random_prompts(detector, rng))


def test_assign_falls_back_to_centre(detector):
    # zero-width box on a patch edge overlaps nothing
    assert detector.assign(BoundingBox(16, 20, 16, 20), (8, 8)) == 2 * 8 + 2
    assert detector.assign(BoundingBox(0, 0, 8, 8), (8, 8)) == 0
    assert detector.assign(BoundingBox(9, 9, 15, 15), (8, 8)) == 9


def _kink_margin(detector, image, targets, prompts):
    fwd = detector._forward(image, prompts)
    margin = min(float(np.abs(a).min()) for a in fwd.preacts)
    params = detector._box_params(fwd.grid, fwd.offsets)
    p = detector.patch_size
    for t in targets:
        k = detector.assign(t.box, fwd.grid)
        cx, cy = t.box.center
        goal = np.array([cx / p, cy / p, t.box.width / p, t.box.height / p])
        margin = min(margin, float(np.abs(params[k] - goal).min()))
    return margin


def numeric_gradient(detector, image, targets, prompts, h=1e-4):
    def loss_at(text, visual):
        return detector.loss_and_grad(image, targets, PromptSet(text, visual))[0].total

    arrays = [prompts.text] + list(prompts.visual)
    out = []
    for index, array in enumerate(arrays):
        grad = np.zeros_like(array)
        for pos in np.ndindex(array.shape):
            values = []
            for sign in (1, -1):
                perturbed = [a.copy() for a in arrays]
                perturbed[index][pos] += sign * h
                values.append(loss_at(perturbed[0], perturbed[1:]))
            grad[pos] = (values[0] - values[1]) / (2 * h)
        out.append(grad)
    return out


def test_gradient_check(small_detector):
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(200):
        if checked == 10:
            break
        image = Image(rng.uniform(size=(16, 16, 3)))
        targets = []
        for _ in range(int(rng.integers(0, 4))):
            x, y = rng.uniform(0, 12, 2)
            w, h = rng.uniform(2, 8, 2)
            targets.append(Target(BoundingBox(x, y, min(x + w, 16), min(y + h, 16)), int(rng.integers(3)),
                                  float(rng.uniform(0.2, 1.0))))
        prompts = random_prompts(small_detector, rng, m=int(rng.integers(1, 4)))
        # finite differences are only valid away from ReLU and L1 kinks
        if _kink_margin(small_detector, image, targets, prompts) < 2e-3:
            continue

        _, analytic = small_detector.loss_and_grad(image, targets, prompts)
        for a, n in zip(analytic, numeric_gradient(small_detector, image, targets, prompts)):
            np.testing.assert_allclose(a, n, rtol=1e-3, atol=1e-8)
        checked += 1
    assert checked == 10


def test_weights_are_frozen(detector):
    for w in detector.weights.values():
        assert w.dtype == np.float32
        with pytest.raises(ValueError):
            w[...] = 0


def test_save_load(detector, categories, tmp_path):
    path = tmp_path / "toy.bin"
    detector.save(path)
    raw = path.read_bytes()
    assert raw.startswith(b"TTAFORGE")
    assert container.HEADER.size == 18
    seed, sections = container.loads(raw)
    assert seed == 3
    assert list(sections) == ["W0", "W1", "b1", "W2", "b2", "T", "Wloc", "bloc"]

    loaded = ToyDetector.load(path, categories)
    assert loaded.weight_bytes() == detector.weight_bytes()
    assert loaded.patch_size == 8 and loaded.dim == 32


def test_from_seed_is_deterministic(categories):
    a = ToyDetector.from_seed(categories, seed=11)
    b = ToyDetector.from_seed(categories, seed=11)
    c = ToyDetector.from_seed(categories, seed=12)
    assert a.weight_bytes() == b.weight_bytes()
    assert a.weight_bytes() != c.weight_bytes()


def test_bad_weights(categories):
    weights = ToyDetector.from_seed(categories).weights
    weights["W1"] = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        ToyDetector(categories, weights)
    del weights["T"]
    with pytest.raises(ShapeError):
        ToyDetector(categories, weights)


def test_embedder(embedder, rng):
    crops = [
        Image(rng.uniform(size=(5, 9, 3))),
        Image.full(1, 1, 0.5),
        Image.zeros(3, 3),
        Image(rng.uniform(size=(40, 20, 3))),
    ]
    for crop in crops:
        feat = embedder.embed(crop)
        assert feat.shape == (64,)
        assert np.linalg.norm(feat) == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_array_equal(feat, embedder.embed(crop))

    feat = embedder.embed(crops[0])
    assert feat @ feat == pytest.approx(1.0)
    assert feat @ -feat == pytest.approx(-1.0)


def test_embedder_seeding():
    a, b = ToyEmbedder(seed=1), ToyEmbedder(seed=2)
    crop = Image.full(8, 8, 0.9)
    assert not np.allclose(a.embed(crop), b.embed(crop))
    np.testing.assert_array_equal(a.embed(crop), ToyEmbedder(seed=1).embed(crop))


def test_pretrain_source(detector):
    scenes = make_scenes(30, seed=21)
    images = [image for image, _ in scenes]
    annotations = [objects for _, objects in scenes]
    trained = pretrain_source(detector, images, annotations)

    for tag in ("W0", "W1", "b1", "W2", "b2"):
        np.testing.assert_array_equal(trained.weights[tag], detector.weights[tag])
    assert not np.array_equal(trained.weights["T"], detector.weights["T"])

    prompts = trained.empty_prompts(0)
    positive, negative = [[] for _ in range(3)], [[] for _ in range(3)]
    for image, objects in scenes:
        fwd = trained._forward(image, prompts)
        scores = 1.0 / (1.0 + np.exp(-fwd.logits))
        hit = np.zeros_like(scores, dtype=bool)
        for box, category in objects:
            hit[trained.assign(box, fwd.grid), category] = True
        for c in range(3):
            positive[c].extend(scores[hit[:, c], c])
            negative[c].extend(scores[~hit[:, c], c])
    for c in range(3):
        assert np.mean(positive[c]) > np.mean(negative[c])


def test_pretrain_keeps_unseen_category(detector):
    image = Image.full(64, 64, 0.45)
    trained = pretrain_source(detector, [image], [[(BoundingBox(8, 8, 24, 24), 0)]])
    np.testing.assert_array_equal(trained.weights["T"][1:], detector.weights["T"][1:])
