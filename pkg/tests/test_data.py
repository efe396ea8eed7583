from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbackdoor import data, nn
from fedbackdoor.checkpoint import FormatError
from fedbackdoor.data import LabeledDataset, TriggerSpec


@pytest.fixture(scope="module")
def toy():
    return data.synth_dataset(10, 100, (1, 16, 16), seed=3)


def test_synth_counts_and_determinism(toy):
    assert len(toy) == 1000
    assert np.all(np.bincount(toy.labels) == 100)
    again = data.synth_dataset(10, 100, (1, 16, 16), seed=3)
    assert np.array_equal(toy.images, again.images) and np.array_equal(toy.labels, again.labels)
    assert toy.images.min() >= 0 and toy.images.max() <= 1


def test_partition_iid_examples():
    ds = data.synth_dataset(10, 50, (1, 4, 4), seed=0)
    shards = data.partition_iid(ds, 100, seed=1)
    assert [s.n_k for s in shards] == [5] * 100
    single = data.partition_iid(ds, 1, seed=1)
    assert np.array_equal(single[0].dataset.ids, ds.ids)
    with pytest.raises(ValueError):
        data.partition_iid(ds, 0, seed=1)


def test_partition_shards_examples(toy):
    shards = data.partition_shards(toy, 20, 2, seed=5)
    for s in shards:
        # histogram recount by hand
        counts = Counter(int(y) for y in s.labels)
        assert np.array_equal(data.label_histograms([s], 10)[0],
                              [counts.get(k, 0) for k in range(10)])
        assert len(counts) <= 2
    one = data.partition_shards(toy, 1, 40, seed=5)
    assert sorted(one[0].dataset.ids) == sorted(toy.ids)
    with pytest.raises(ValueError):
        data.partition_shards(toy.subset(range(10)), 6, 2, seed=0)


def test_partition_shards_full_scale_bound():
    ds = data.synth_dataset(10, 100, (1, 2, 2), seed=0)
    shards = data.partition_shards(ds, 100, 2, seed=9)
    assert max(len(set(s.labels.tolist())) for s in shards) <= 2


def test_last_shard_absorbs_remainder():
    ds = data.synth_dataset(3, 7, (1, 2, 2), seed=0)
    shards = data.partition_shards(ds, 2, 2, seed=0)
    assert sorted(s.n_k for s in shards) == [10, 11]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(1, 30), st.integers(1, 3))
def test_partitioners_conserve_data(seed, k, spc):
    ds = data.synth_dataset(5, 20, (1, 2, 2), seed=1)
    for shards in (data.partition_iid(ds, k, seed), data.partition_shards(ds, k, spc, seed)):
        ids = np.concatenate([s.dataset.ids for s in shards])
        assert Counter(ids.tolist()) == Counter(ds.ids.tolist())
    sizes = [s.n_k for s in data.partition_iid(ds, k, seed)]
    assert max(sizes) - min(sizes) <= 1


def test_trigger_pixel_count():
    trig = TriggerSpec.make("white_patch", (1, 8, 8), size=2, position=(6, 6))
    img = np.zeros((1, 8, 8), np.float32)
    out = data.apply_trigger(img, trig)
    assert np.count_nonzero(out == 1.0) == 4 and np.count_nonzero(out) == 4
    assert np.all(img == 0)
    assert np.array_equal(data.apply_trigger(out, trig), out)


def test_empty_patch_is_identity():
    trig = TriggerSpec("white_patch", np.ones((1, 0, 0)), (0, 0))
    img = np.random.default_rng(0).random((1, 5, 5)).astype(np.float32)
    assert np.array_equal(data.apply_trigger(img, trig), img)


def test_trigger_default_position_and_bounds():
    trig = TriggerSpec.make("logo_patch", (3, 16, 16))
    assert trig.position == (13, 13) and trig.patch.shape == (1, 3, 3)
    assert len(np.unique(trig.patch)) >= 2 and 0 <= trig.patch.min() and trig.patch.max() <= 1
    with pytest.raises(ValueError):
        TriggerSpec.make("white_patch", (1, 8, 8), size=3, position=(6, 6))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 13), st.integers(0, 13), st.sampled_from(["white_patch", "logo_patch"]))
def test_trigger_locality(r, c, kind):
    trig = TriggerSpec.make(kind, (2, 16, 16), 3, (r, c))
    img = np.random.default_rng(r * 16 + c).random((2, 16, 16)).astype(np.float32)
    out = data.apply_trigger(img, trig)
    mask = np.ones(img.shape, bool)
    mask[:, r:r + 3, c:c + 3] = False
    assert np.array_equal(out[mask], img[mask])
    assert np.array_equal(out[:, r:r + 3, c:c + 3], np.broadcast_to(trig.patch, (2, 3, 3)))


def test_poison_counts():
    ds = data.synth_dataset(4, 100, (1, 8, 8), seed=0)
    trig = TriggerSpec.make("white_patch", (1, 8, 8), target_label=2)
    same = data.poison_dataset(ds, trig, 0.0, seed=1)
    assert np.array_equal(same.images, ds.images) and np.array_equal(same.labels, ds.labels)
    full = data.poison_dataset(ds, trig, 1.0, seed=1)
    assert np.all(full.labels == 2)
    assert np.all(full.images[:, :, 5:, 5:] == 1.0)
    quarter = data.poison_dataset(ds, trig, 0.25, seed=1)
    changed = np.any(quarter.images != ds.images, axis=(1, 2, 3)) | (quarter.labels != ds.labels)
    assert changed.sum() == 100
    assert np.all(quarter.labels[changed] == 2)


def test_poison_rounds_half_up():
    ds = data.synth_dataset(2, 5, (1, 4, 4), seed=0)
    trig = TriggerSpec.make("white_patch", (1, 4, 4), size=1)
    out = data.poison_dataset(ds, trig, 0.25, seed=0)  # 2.5 -> 3
    assert np.sum(np.any(out.images != ds.images, axis=(1, 2, 3))) == 3


def test_public_dataset(toy):
    train, pool = data.split_dataset(toy, [800, 200], seed=0)
    shards = data.partition_iid(train, 10, seed=0)
    pub = data.make_public_dataset(pool, 200, seed=0)
    assert len(pub) == 200 and set(pub.ids.tolist()) == set(pool.ids.tolist())
    shard_ids = set(np.concatenate([s.dataset.ids for s in shards]).tolist())
    assert shard_ids.isdisjoint(pub.ids.tolist())
    resized = data.make_public_dataset(pool, 50, seed=1, shape=(3, 8, 8))
    assert resized.images.shape == (50, 3, 8, 8)
    with pytest.raises(ValueError):
        data.make_public_dataset(pool, 201, seed=0)


def test_synth_is_learnable_centrally():
    ds = data.synth_dataset(10, 150, (1, 16, 16), seed=0, noise=0.6)
    train, test = data.split_dataset(ds, [1200, 300], seed=1)
    spec = nn.small_cnn(conv_channels=16, hidden=64)
    params = nn.train_local(spec, nn.init_params(spec, 0), train, nn.TrainConfig(0.05, 32, 8, 0))
    assert np.mean(nn.predict(spec, params, test.images) == test.labels) >= 0.9


def test_tensor_directory_roundtrip(tmp_path, toy):
    data.save_dataset(tmp_path, toy)
    back = data.load_dataset(tmp_path, "tensors")
    assert np.array_equal(back.images, toy.images)
    assert np.array_equal(back.labels, toy.labels) and np.array_equal(back.ids, toy.ids)


def test_cifar_reader(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, size=4).astype(np.uint8)
    pixels = rng.integers(0, 256, size=(4, 3072)).astype(np.uint8)
    buf = np.concatenate([labels[:, None], pixels], axis=1).tobytes()
    (tmp_path / "data_batch_1.bin").write_bytes(buf)
    ds = data.load_dataset(tmp_path, "cifar10")
    assert ds.images.shape == (4, 3, 32, 32)
    assert np.array_equal(ds.labels, labels)
    assert ds.images[1, 2, 0, 5] == pytest.approx(pixels[1, 2 * 1024 + 5] / 255)
    with pytest.raises(FormatError) as info:
        data.read_cifar10_batch(buf[:-10])
    assert info.value.offset == 3 * 3073
    bad = bytearray(buf)
    bad[3073] = 42
    with pytest.raises(FormatError) as info:
        data.read_cifar10_batch(bytes(bad))
    assert info.value.offset == 3073


def test_dataset_invariants():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((3, 1, 2, 2)), [0, 1])
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((3, 2, 2)), [0, 1, 1])
