import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gap import zoo
from gap.data import (
    CIFAR_RECORD,
    CIFAR_TEST_FILES,
    CIFAR_TRAIN_FILES,
    DatasetFormatError,
    DatasetSpec,
    SyntheticSource,
    augment_batch,
    generate_synthetic,
    load_any,
    load_cifar10,
    load_dataset,
    raw_channel_means,
    read_cifar_file,
    save_dataset,
)
from gap.engine import evaluate
from gap.regularize import TrainConfig, train_plain

SMALL = SyntheticSource(classes=4, train_samples=200, test_samples=40, image_size=(3, 8, 8), seed=3)


def test_same_seed_is_bit_identical():
    a, b = generate_synthetic(SMALL), generate_synthetic(SMALL)
    for k in ("x_train", "y_train", "x_test", "y_test"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    c = generate_synthetic(SyntheticSource(**{**SMALL.__dict__, "seed": 4}))
    assert not np.array_equal(a.x_train, c.x_train)


def test_default_fixture_shape_and_balance(synthetic):
    assert synthetic.x_train.shape == (4000, 3, 16, 16) and synthetic.x_test.shape == (1000, 3, 16, 16)
    assert np.array_equal(np.bincount(synthetic.y_train), [500] * 8)
    assert np.array_equal(np.bincount(synthetic.y_test), [125] * 8)


def test_normalized_statistics(synthetic):
    m = synthetic.x_train.mean(axis=(0, 2, 3))
    s = synthetic.x_train.std(axis=(0, 2, 3))
    assert np.abs(m).max() < 1e-3
    assert np.abs(s - 1).max() < 1e-2


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(source=SyntheticSource(classes=1))
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSource(classes=3, train_samples=10))


def test_linear_model_is_in_calibrated_band(synthetic):
    from sklearn.linear_model import LogisticRegression

    clf = LogisticRegression(max_iter=2000, C=1.0)
    clf.fit(synthetic.x_train.reshape(len(synthetic.x_train), -1), synthetic.y_train)
    acc = clf.score(synthetic.x_test.reshape(len(synthetic.x_test), -1), synthetic.y_test)
    print(f"logistic regression test accuracy {acc:.3f}")
    assert 0.60 <= acc <= 0.80


@pytest.mark.slow
def test_synthetic_calibration(synthetic):
    g, w = zoo.build_toy_cnn(0)
    w, _ = train_plain(g, w, synthetic, TrainConfig(epochs=20, batch_size=64, lr=0.05, schedule="step", eval_every=0), 0)
    acc = evaluate(g, w, synthetic.x_test, synthetic.y_test)["accuracy"]
    print(f"toy CNN test accuracy {acc:.3f}")
    assert acc >= 0.95


@given(st.integers(0, 10_000), st.booleans(), st.booleans())
def test_augmentation_preserves_shape(seed, crop, mirror):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 3, 8, 8)).astype(np.float32)
    out = augment_batch(x, rng, crop, mirror)
    assert out.shape == x.shape and out.dtype == x.dtype
    if not crop and not mirror:
        assert np.array_equal(out, x)


def test_mirror_only_flips_or_keeps(rng):
    x = rng.standard_normal((20, 3, 6, 6)).astype(np.float32)
    out = augment_batch(x, rng, crop=False, mirror=True)
    for a, b in zip(x, out):
        assert np.array_equal(a, b) or np.array_equal(a[..., ::-1], b)


def test_unaugmented_epochs_are_deterministic():
    ds = generate_synthetic(DatasetSpec(source=SMALL, crop=True, mirror=True))
    a = [b.inputs.numpy() for b in ds.batches(64, np.random.default_rng(0), augment=False)]
    b = [b.inputs.numpy() for b in ds.batches(64, np.random.default_rng(0), augment=False)]
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    labels = np.concatenate([b.labels.numpy() for b in ds.batches(64, np.random.default_rng(1))])
    assert np.array_equal(np.sort(labels), np.sort(ds.y_train))


def write_cifar(directory, records=4, seed=0):
    rng = np.random.default_rng(seed)
    for name in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES:
        rec = rng.integers(0, 256, (records, CIFAR_RECORD), dtype=np.uint8)
        rec[:, 0] = rng.integers(0, 10, records)
        (directory / name).write_bytes(rec.tobytes())


def test_fake_cifar_layout(tmp_path):
    write_cifar(tmp_path)
    raw = np.fromfile(tmp_path / CIFAR_TRAIN_FILES[0], dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    x, y = read_cifar_file(tmp_path / CIFAR_TRAIN_FILES[0])
    assert x.shape == (4, 3, 32, 32) and np.array_equal(y, raw[:, 0])
    # R plane first, rows in row-major order
    assert x[1, 0, 0, 1] == raw[1, 2] and x[1, 1, 0, 0] == raw[1, 1 + 1024] and x[1, 2, 31, 31] == raw[1, 3072]
    ds = load_cifar10(tmp_path)
    assert len(ds.x_train) == 20 and len(ds.x_test) == 4
    assert ds.crop and ds.mirror
    assert 0 <= ds.y_train.min() and ds.y_train.max() < 10
    assert np.abs(ds.x_train.mean(axis=(0, 2, 3))).max() < 1e-3
    means = raw_channel_means(tmp_path)
    pixels = np.concatenate([read_cifar_file(tmp_path / f)[0] for f in CIFAR_TRAIN_FILES]).astype(np.float64) / 255
    assert np.allclose(means, pixels.mean(axis=(0, 2, 3)))


def test_truncated_cifar_file_names_file_and_offset(tmp_path):
    write_cifar(tmp_path)
    bad = tmp_path / CIFAR_TRAIN_FILES[2]
    bad.write_bytes(bad.read_bytes()[: 2 * CIFAR_RECORD + 100])
    with pytest.raises(DatasetFormatError) as info:
        load_cifar10(tmp_path)
    assert CIFAR_TRAIN_FILES[2] in str(info.value) and str(2 * CIFAR_RECORD) in str(info.value)


def test_missing_cifar_file(tmp_path):
    write_cifar(tmp_path)
    (tmp_path / CIFAR_TEST_FILES[0]).unlink()
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path)


def test_bad_label_is_rejected(tmp_path):
    write_cifar(tmp_path)
    p = tmp_path / CIFAR_TRAIN_FILES[0]
    raw = bytearray(p.read_bytes())
    raw[CIFAR_RECORD] = 12
    p.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError):
        read_cifar_file(p)


@pytest.mark.skipif(not os.environ.get("GAP_CIFAR10_DIR"), reason="set GAP_CIFAR10_DIR to the CIFAR-10 binary directory")
def test_real_cifar_means():
    d = os.environ["GAP_CIFAR10_DIR"]
    ds = load_cifar10(d)
    assert len(ds.x_train) == 50_000 and len(ds.x_test) == 10_000
    assert np.abs(raw_channel_means(d) - [0.491, 0.482, 0.447]).max() < 0.01


def test_export_round_trip(tmp_path):
    ds = generate_synthetic(DatasetSpec(source=SMALL, crop=True))
    save_dataset(ds, tmp_path / "ds.json")
    back = load_dataset(tmp_path / "ds.json")
    for k in ("x_train", "y_train", "x_test", "y_test"):
        assert np.array_equal(getattr(ds, k), getattr(back, k))
    assert back.crop and not back.mirror and back.name == ds.name
    assert np.array_equal(load_any(tmp_path / "ds.json").x_test, ds.x_test)


def test_corrupt_export_is_rejected(tmp_path):
    save_dataset(generate_synthetic(SMALL), tmp_path / "ds.json")
    blob = tmp_path / "ds.bin"
    blob.write_bytes(blob.read_bytes()[:100])
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "ds.json")
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "x.json")


def test_load_any_synthetic_seed():
    a = load_any("synthetic:5")
    assert a.name.endswith("seed5") and len(a.x_train) == 4000
