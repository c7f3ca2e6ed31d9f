import json
from collections import Counter

import numpy as np
import pytest

from ttaforge.core import BoundingBox, Detection, Image
from ttaforge.idm import DynamicQueue, InstanceDynamicMemory, MemoryTriplet


def unit(dim, axis):
    v = np.zeros(dim)
    v[axis] = 1.0
    return v


def triplet(score, category=0, step=0, feat=None):
    return MemoryTriplet(Image.full(2, 2, 0.5), unit(4, 0) if feat is None else feat, score, category, step)


def test_queue_fills_then_replaces_lowest():
    queue = DynamicQueue(3)
    for score in (0.5, 0.7, 0.6):
        assert queue.insert(triplet(score))
    assert queue.full
    assert queue.min_score() == 0.5

    assert queue.insert(triplet(0.9))
    assert sorted(queue.scores()) == [0.6, 0.7, 0.9]

    # equal to the minimum is not enough
    assert not queue.insert(triplet(0.6))
    assert not queue.insert(triplet(0.1))
    assert sorted(queue.scores()) == [0.6, 0.7, 0.9]


def test_queue_replaces_oldest_of_equal_minima():
    queue = DynamicQueue(3)
    queue.insert(triplet(0.4, step=5))
    queue.insert(triplet(0.4, step=2))
    queue.insert(triplet(0.8, step=1))
    queue.insert(triplet(0.5, step=6))
    assert [t.source_step for t in queue] == [5, 6, 1]


def test_queue_capacity_validation():
    with pytest.raises(ValueError):
        DynamicQueue(0)


def test_triplet_needs_unit_feature():
    with pytest.raises(ValueError):
        MemoryTriplet(Image.full(2, 2, 0.5), np.ones(4), 0.5, 0)
    t = triplet(0.5)
    with pytest.raises(ValueError):
        t.feat[0] = 2.0


def test_queue_top_k_oracle():
    rng = np.random.default_rng(99)
    for trial in range(1000):
        capacity = (1, 3, 20)[trial % 3]
        length = int(rng.integers(0, 201))
        # distinct scores
        history = rng.permutation(1000)[:length] / 1000.0
        queue = DynamicQueue(capacity)
        for step, score in enumerate(history):
            queue.insert(triplet(float(score), step=step))
        expected = sorted(history, reverse=True)[:capacity]
        assert Counter(queue.scores()) == Counter(float(s) for s in expected)


def test_queue_floor_never_drops_once_full():
    rng = np.random.default_rng(5)
    for capacity in (1, 3, 20):
        queue = DynamicQueue(capacity)
        floor = None
        # coarse scores so ties with the minimum come up often
        for step, score in enumerate(rng.integers(0, 10, size=300) / 10.0):
            queue.insert(triplet(float(score), step=step))
            assert len(queue) <= capacity
            if queue.full:
                if floor is not None:
                    assert queue.min_score() >= floor
                floor = queue.min_score()


def test_memory_routes_by_category():
    memory = InstanceDynamicMemory(3, capacity=2)
    assert memory.empty
    memory.insert(triplet(0.5, category=2))
    memory.insert(triplet(0.6, category=0))
    assert memory.sizes() == {0: 1, 1: 0, 2: 1}
    assert len(memory) == 2
    assert [t.category for t in memory.triplets()] == [0, 2]


def test_harvest(embedder):
    image = Image(np.random.default_rng(0).uniform(size=(32, 32, 3)))
    memory = InstanceDynamicMemory(3, capacity=5)
    detections = [
        Detection(BoundingBox(0, 0, 10, 10), [0.9, 0.1, 0.0]),
        Detection(BoundingBox(5, 5, 20, 20), [0.1, 0.2, 0.25]),
        # enhanced scores can exceed 1
        Detection(BoundingBox(10, 2, 30, 12), [0.0, 3.4, 0.1]),
        # covers no pixel of the image
        Detection(BoundingBox(40, 40, 50, 50), [0.95, 0.0, 0.0]),
    ]
    inserted = memory.harvest(image, detections, embedder, th_pl=0.3, step=7)

    assert len(inserted) == 2
    assert memory.sizes() == {0: 1, 1: 1, 2: 0}
    assert memory.skipped == 1
    stored = memory.queues[1].items[0]
    assert stored.score == 1.0
    assert stored.source_step == 7
    assert stored.img.shape == (10, 20)
    np.testing.assert_array_equal(stored.feat, embedder.embed(stored.img))


def test_prototypes():
    memory = InstanceDynamicMemory(3)
    memory.insert(triplet(0.5, category=0, feat=unit(4, 0)))
    memory.insert(triplet(0.6, category=0, feat=unit(4, 1)))
    memory.insert(triplet(0.6, category=1, feat=unit(4, 2)))
    # opposite vectors average to zero
    memory.insert(triplet(0.6, category=2, feat=unit(4, 3)))
    memory.insert(triplet(0.7, category=2, feat=-unit(4, 3)))

    prototypes = memory.prototypes()
    assert sorted(prototypes) == [0, 1]
    np.testing.assert_allclose(prototypes[0], np.array([1, 1, 0, 0]) / np.sqrt(2))
    np.testing.assert_allclose(prototypes[1], unit(4, 2))
    for v in prototypes.values():
        assert np.linalg.norm(v) == pytest.approx(1.0)


def test_sample(rng):
    memory = InstanceDynamicMemory(2)
    assert memory.sample(3, rng) == []
    memory.insert(triplet(0.5, category=1))
    drawn = memory.sample(4, rng)
    assert len(drawn) == 4
    assert all(t is memory.queues[1].items[0] for t in drawn)
    with pytest.raises(ValueError):
        memory.sample(0, rng)


def test_sample_is_seeded():
    memory = InstanceDynamicMemory(2)
    for i in range(6):
        memory.insert(triplet(0.4 + i / 20, category=i % 2))
    a = memory.sample(10, np.random.default_rng(5))
    b = memory.sample(10, np.random.default_rng(5))
    assert [id(t) for t in a] == [id(t) for t in b]


def test_dump(tmp_path, embedder):
    memory = InstanceDynamicMemory(3)
    image = Image(np.random.default_rng(1).uniform(size=(16, 16, 3)))
    memory.harvest(image, [Detection(BoundingBox(2, 2, 9, 12), [0.1, 0.8, 0.0])], embedder, 0.3, step=4)
    memory.dump(tmp_path / "memory", ["square", "disk", "triangle"])

    assert (tmp_path / "memory" / "disk" / "000.png").exists()
    assert (tmp_path / "memory" / "square").is_dir()
    index = json.loads((tmp_path / "memory" / "index.json").read_text())
    assert len(index) == 1
    assert index[0]["category"] == 1
    assert index[0]["source_step"] == 4
    assert index[0]["score"] == 0.8
    assert len(index[0]["feat"]) == embedder.dim
