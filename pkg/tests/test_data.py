"""IDX and CIFAR-10 parsing, corruption handling, synthetic corpus."""

import struct

import numpy as np
import pytest

from xbarlab import data
from xbarlab.rng import derive_generator


def write_valid_idx_pair(d, n=20, train=True):
    rng = derive_generator(0, "idx")
    images = rng.integers(0, 256, size=(n, 28, 28)).astype(np.uint8)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    stem = "train" if train else "test"
    data.write_idx_images(d / data.MNIST_FILES[f"{stem}_images"], images)
    data.write_idx_labels(d / data.MNIST_FILES[f"{stem}_labels"], labels)
    return images, labels


def test_idx_round_trip(tmp_path):
    images, labels = write_valid_idx_pair(tmp_path, train=True)
    write_valid_idx_pair(tmp_path, train=False)
    train, test = data.load_mnist(tmp_path)
    assert len(train) == 20 and len(test) == 20
    assert np.array_equal(train.labels, labels.astype(np.int64))
    assert train.images.max() <= 1.0 and train.images.min() >= 0.0


def test_idx_pixel_255_scales_to_one(tmp_path):
    images = np.zeros((2, 28, 28), dtype=np.uint8)
    images[0, 3, 4] = 255
    data.write_idx_images(tmp_path / data.MNIST_FILES["train_images"], images)
    data.write_idx_labels(tmp_path / data.MNIST_FILES["train_labels"],
                          np.zeros(2, dtype=np.uint8))
    write_valid_idx_pair(tmp_path, train=False)
    train, _ = data.load_mnist(tmp_path)
    assert train.images[0, 3, 4] == 1.0


def test_idx_bad_magic_names_file_and_offset(tmp_path):
    path = tmp_path / data.MNIST_FILES["train_images"]
    path.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 28, 28) + b"\x00" * 784)
    with pytest.raises(data.DataError, match="offset 0"):
        data.read_idx_images(path)


def test_idx_truncated_rejected(tmp_path):
    path = tmp_path / "truncated"
    path.write_bytes(struct.pack(">IIII", data.IMAGE_MAGIC, 3, 28, 28) + b"\x00" * 100)
    with pytest.raises(data.DataError, match="expected"):
        data.read_idx_images(path)


def test_idx_count_mismatch_rejected(tmp_path):
    rng = derive_generator(1, "idx")
    data.write_idx_images(tmp_path / data.MNIST_FILES["train_images"],
                          rng.integers(0, 255, (5, 28, 28)).astype(np.uint8))
    data.write_idx_labels(tmp_path / data.MNIST_FILES["train_labels"],
                          np.zeros(4, dtype=np.uint8))
    write_valid_idx_pair(tmp_path, train=False)
    with pytest.raises(data.DataError, match="count"):
        data.load_mnist(tmp_path)


def test_idx_gzip_supported(tmp_path):
    import gzip

    rng = derive_generator(2, "idx")
    images = rng.integers(0, 255, (3, 28, 28)).astype(np.uint8)
    raw = (struct.pack(">IIII", data.IMAGE_MAGIC, 3, 28, 28) + images.tobytes())
    (tmp_path / (data.MNIST_FILES["train_images"] + ".gz")).write_bytes(gzip.compress(raw))
    loaded = data.read_idx_images(tmp_path / (data.MNIST_FILES["train_images"] + ".gz"))
    assert np.array_equal(loaded, images)


def test_missing_idx_file(tmp_path):
    with pytest.raises(data.DataError, match="missing"):
        data.load_mnist(tmp_path)


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------


def write_cifar_file(path, n, seed=3):
    rng = derive_generator(seed, "cifar")
    rec = np.zeros((n, data.CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = rng.integers(0, 10, n)
    rec[:, 1:] = rng.integers(0, 256, (n, 3072))
    path.write_bytes(rec.tobytes())
    return rec


def test_cifar_round_trip(tmp_path):
    for fname in data.CIFAR_TRAIN_FILES:
        write_cifar_file(tmp_path / fname, 30)
    write_cifar_file(tmp_path / data.CIFAR_TEST_FILE, 10)
    train, test = data.load_cifar10(tmp_path)
    assert len(train) == 150 and len(test) == 10
    assert train.images.shape == (150, 32, 32, 3)


def test_cifar_subset_flag_deterministic(tmp_path):
    for fname in data.CIFAR_TRAIN_FILES:
        write_cifar_file(tmp_path / fname, 30)
    write_cifar_file(tmp_path / data.CIFAR_TEST_FILE, 10)
    full, _ = data.load_cifar10(tmp_path)
    sub, _ = data.load_cifar10(tmp_path, subset=50)
    assert len(sub) == 50
    assert np.array_equal(sub.images, full.images[:50])


def test_cifar_bad_record_size(tmp_path):
    for fname in data.CIFAR_TRAIN_FILES:
        write_cifar_file(tmp_path / fname, 5)
    (tmp_path / data.CIFAR_TEST_FILE).write_bytes(b"\x00" * 100)
    with pytest.raises(data.DataError, match="record length"):
        data.load_cifar10(tmp_path)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def test_synthetic_deterministic():
    a_img, a_lab = data.synthesize_digits(50, derive_generator(9, "g"))
    b_img, b_lab = data.synthesize_digits(50, derive_generator(9, "g"))
    assert np.array_equal(a_img, b_img)
    assert np.array_equal(a_lab, b_lab)


def test_synthetic_covers_all_classes():
    _, labels = data.synthesize_digits(600, derive_generator(10, "g"))
    assert set(labels.tolist()) == set(range(10))


def test_build_corpus_loads_through_idx(tmp_path):
    data.build_synthetic_corpus(tmp_path, n_train=80, n_test=30, master_seed=5)
    train, test = data.load_mnist(tmp_path)
    assert len(train) == 80 and len(test) == 30
    assert train.images.shape[1:] == (28, 28)


def test_session_corpus_standard_sizes(corpus):
    train, test = corpus
    assert (len(train), len(test)) == (60000, 10000)
    assert train.labels.min() >= 0 and train.labels.max() <= 9
