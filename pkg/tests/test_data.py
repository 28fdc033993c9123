"""Synthetic corpus determinism and folder ingestion."""

import numpy as np
import pytest
import torch

from ordtok.data import NUM_CLASSES, class_name, hflip, load_folder, synth_dataset
from ordtok.errors import ValidationError


def test_synth_deterministic():
    a_img, a_lab = synth_dataset(16, seed=0)
    b_img, b_lab = synth_dataset(16, seed=0)
    assert torch.equal(a_img, b_img)
    assert torch.equal(a_lab, b_lab)
    c_img, _ = synth_dataset(16, seed=1)
    assert not torch.equal(a_img, c_img)


def test_synth_shapes_range_classes():
    img, lab = synth_dataset(8, seed=3)
    assert img.shape == (8, 32, 32, 3) and img.dtype == torch.float32
    assert img.min() >= -1.0 and img.max() <= 1.0
    assert lab.unique().numel() >= 2
    assert NUM_CLASSES == 12
    assert class_name(0) == "disk-0"
    with pytest.raises(ValidationError):
        synth_dataset(0)


def test_synth_round_robin_labels():
    _, lab = synth_dataset(15, seed=0)
    assert torch.equal(lab, torch.arange(15) % NUM_CLASSES)


def test_synth_custom_size():
    img, _ = synth_dataset(2, seed=0, size=16)
    assert img.shape == (2, 16, 16, 3)


def test_hflip():
    img, _ = synth_dataset(4, seed=5)
    mask = torch.tensor([True, False, True, False])
    out = hflip(img, mask)
    assert torch.equal(out[0], img[0].flip(-2))
    assert torch.equal(out[1], img[1])
    assert torch.equal(img, hflip(hflip(img, mask), mask))


def test_load_folder_roundtrip(tmp_path):
    from PIL import Image

    for cls in ("a", "b"):
        (tmp_path / cls).mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        arr = rng.integers(0, 256, (40, 48, 3), dtype=np.uint8)
        Image.fromarray(arr).save(tmp_path / ("a" if i < 2 else "b") / f"{i}.png")
    imgs, labs = load_folder(tmp_path, size=32)
    assert imgs.shape == (3, 32, 32, 3)
    assert labs.tolist() == [0, 0, 1]
    assert imgs.min() >= -1.0 and imgs.max() <= 1.0
    again, _ = load_folder(tmp_path, size=32)
    assert torch.equal(imgs, again)


def test_load_folder_errors(tmp_path):
    with pytest.raises(ValidationError):
        load_folder(tmp_path / "nope")
    with pytest.raises(ValidationError):
        load_folder(tmp_path)
