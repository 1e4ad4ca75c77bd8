import struct

import numpy as np
import pytest

from cnninte import cnn, store
from cnninte import forest as F
from cnninte.errors import ArtifactError, DataError

import fig5


@pytest.fixture(scope="module")
def tiny_model():
    cfg = cnn.CnnConfig(conv1_filters=2, conv2_filters=3, kernel_size=3, fc1_neurons=5, image_size=8,
                        steps=2, batch_size=2)
    from cnninte.dataset import Dataset
    rng = np.random.default_rng(0)
    return cnn.train(cfg, Dataset(rng.random((4, 8, 8)), rng.integers(0, 10, 4)))


def roundtrip(dump, load, obj):
    a = dump(obj)
    b = dump(load(a))
    assert a == b
    return load(a)


def test_model_roundtrip(tiny_model):
    back = roundtrip(store.dump_model, store.load_model, tiny_model)
    assert back.checksum() == tiny_model.checksum()
    assert back.config == tiny_model.config
    assert back.training_log == tiny_model.training_log
    assert back.fc1.step_count == tiny_model.fc1.step_count
    np.testing.assert_array_equal(back.conv2.v_w, tiny_model.conv2.v_w)


def test_activation_factor_meta_roundtrip():
    fm, acts = fig5.fixture()
    back = roundtrip(store.dump_activations, store.load_activations, acts)
    np.testing.assert_array_equal(back.values, acts.values)
    fm2 = roundtrip(store.dump_factor, store.load_factor, fm)
    np.testing.assert_array_equal(fm2.factor_of_neuron, fm.factor_of_neuron)
    from cnninte.meta import build_meta_train
    meta = build_meta_train(fm2, acts, fig5.LABELS)
    assert meta.features.T.tolist() == fig5.EXPECTED
    m2 = roundtrip(store.dump_meta, store.load_meta, meta)
    np.testing.assert_array_equal(m2.features, meta.features)
    assert m2.role == meta.role


def test_forest_roundtrip():
    rng = np.random.default_rng(1)
    x, y = rng.random((80, 6)), rng.integers(0, 3, 80)
    rf = F.forest_fit(x, y, n_trees=3, max_nodes=15, seed=2)
    back = roundtrip(store.dump_forest, store.load_forest, rf)
    probe = rng.random((40, 6))
    np.testing.assert_array_equal(F.forest_predict_batch(back, probe), F.forest_predict_batch(rf, probe))
    assert back.seeds == rf.seeds


def test_ensemble_directory_roundtrip(small_run, tmp_path):
    ens = small_run["ensemble"]
    store.save_ensemble(ens, tmp_path / "a")
    back = store.load_ensemble(tmp_path / "a")
    store.save_ensemble(back, tmp_path / "b")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    from cnninte.meta import evaluate_ensemble
    assert evaluate_ensemble(back, small_run["meta_test"]) == evaluate_ensemble(ens, small_run["meta_test"])


def test_corruption_detected():
    _, acts = fig5.fixture()
    data = bytearray(store.dump_activations(acts))
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    with pytest.raises(ArtifactError, match="CRC"):
        store.load_activations(bytes(flipped))
    with pytest.raises(ArtifactError, match="expected a model"):
        store.load_model(bytes(data))
    with pytest.raises(ArtifactError, match="magic"):
        store.load_activations(b"NOTMAGIC" + bytes(data[8:]))
    with pytest.raises(ArtifactError):
        store.load_activations(bytes(data[:-7]))
    with pytest.raises(ArtifactError):
        store.load_activations(bytes(data[:10]))
    bumped = bytearray(data)
    struct.pack_into("<H", bumped, 9, 99)
    with pytest.raises(ArtifactError, match="version"):
        store.load_activations(bytes(bumped))
    assert issubclass(ArtifactError, DataError)


def test_missing_ensemble_dir(tmp_path):
    with pytest.raises(ArtifactError):
        store.load_ensemble(tmp_path)
