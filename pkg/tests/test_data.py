import json

import numpy as np
import pytest
import torch
from PIL import Image

from radfm.data import (
    channel_stats, convert_medmnist, load_dataset, normalize, read_manifest, synth_blobs,
    synth_shapes_captions, synth_squares, write_manifest,
)
from radfm.exceptions import DataError


def _cls_manifest(tmp_path, n=8):
    d = synth_blobs(n, seed=0, size=28)
    return write_manifest(tmp_path, "classification", d.split((0.5, 0.25, 0.25)), 2)


def test_manifest_split_lengths(tmp_path):
    ds = load_dataset(_cls_manifest(tmp_path))
    assert [len(ds[s]) for s in ("train", "val", "test")] == [4, 2, 2]
    assert ds["train"].images.shape == (4, 3, 224, 224)
    assert ds.task == "classification" and ds.n_classes == 2


def test_image_size_policy(tmp_path):
    d = synth_squares(4, seed=0, size=32)
    path = write_manifest(tmp_path, "segmentation", {"train": d.split((1.0,))["train"]}, 2)
    ds = load_dataset(path)
    assert ds["train"].images.shape[-1] == 448 and ds["train"].targets.shape == (4, 448, 448)
    assert load_dataset(path, image_size=64)["train"].images.shape[-1] == 64


def test_batches_deterministic(tmp_path):
    split = load_dataset(_cls_manifest(tmp_path), image_size=28)["train"]
    a = [y.tolist() for _, y in split.batches(2, seed=5, epoch=1)]
    b = [y.tolist() for _, y in split.batches(2, seed=5, epoch=1)]
    assert a == b
    order = lambda s, e: [x.sum().item() for x, _ in split.batches(1, seed=s, epoch=e)]
    assert order(5, 1) == order(5, 1)
    assert sorted(order(5, 1)) == sorted(order(5, 2))


def test_missing_file_named(tmp_path):
    path = _cls_manifest(tmp_path)
    m = json.loads(path.read_text())
    m["splits"]["train"][0]["image"] = "images/nope.png"
    path.write_text(json.dumps(m))
    with pytest.raises(DataError, match="nope.png"):
        load_dataset(path)


def test_label_out_of_range(tmp_path):
    path = _cls_manifest(tmp_path)
    m = json.loads(path.read_text())
    m["splits"]["train"][0]["label"] = 5
    path.write_text(json.dumps(m))
    with pytest.raises(DataError):
        load_dataset(path)


def test_seg_labels_enforced(tmp_path):
    d = synth_squares(2, seed=0, size=16)
    masks = d.targets.copy()
    masks[0, 0, 0] = 2
    path = write_manifest(tmp_path, "segmentation", {"train": (d.images, masks)}, 3)
    ds = load_dataset(path, image_size=16)
    assert set(ds["train"].targets.unique().tolist()) <= {0, 1, 2}
    masks[1, 0, 0] = 3
    path = write_manifest(tmp_path, "segmentation", {"train": (d.images, masks)}, 3)
    with pytest.raises(DataError):
        load_dataset(path, image_size=16)


def test_split_disjointness(tmp_path):
    path = _cls_manifest(tmp_path)
    m = json.loads(path.read_text())
    m["splits"]["val"].append(m["splits"]["train"][0])
    path.write_text(json.dumps(m))
    with pytest.raises(DataError):
        read_manifest(path)


def test_grayscale_replicated(tmp_path):
    Image.fromarray(np.full((14, 14), 128, np.uint8)).save(tmp_path / "g.png")
    (tmp_path / "m.json").write_text(json.dumps({
        "task": "pretrain", "normalization": {"mean": [0, 0, 0], "std": [1, 1, 1]},
        "splits": {"train": [{"image": "g.png"}]}}))
    x = load_dataset(tmp_path / "m.json", image_size=14)["train"].images
    assert x.shape == (1, 3, 14, 14) and torch.equal(x[0, 0], x[0, 2])


def test_images_not_mutated_across_epochs(tmp_path):
    split = load_dataset(_cls_manifest(tmp_path), image_size=28)["train"]
    before = split.images.clone()
    for epoch in range(3):
        for xb, _ in split.batches(2, epoch=epoch):
            xb.mul_(0)  # a careless consumer
    assert torch.equal(split.images, before)


def test_synth_squares_exact_masks():
    d = synth_squares(20, seed=1)
    for m in d.targets:
        rows, cols = np.nonzero(m)
        side = rows.max() - rows.min() + 1
        assert cols.max() - cols.min() + 1 == side
        assert m.sum() == side * side


def test_synth_determinism():
    for gen in (synth_blobs, synth_squares, synth_shapes_captions):
        a, b = gen(6, seed=4), gen(6, seed=4)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(np.asarray(a.targets), np.asarray(b.targets))
    assert not np.array_equal(synth_blobs(6, seed=1).images, synth_blobs(6, seed=2).images)


def test_blobs_linearly_separable():
    d = synth_blobs(64, n_classes=2, seed=0)
    X = np.c_[d.images.reshape(64, -1), np.ones(64)]
    y = np.where(d.targets == 1, 1.0, -1.0)
    w, *_ = np.linalg.lstsq(X, y, rcond=None)
    assert ((X @ w > 0) == (y > 0)).all()


def test_captions_name_shape_and_position():
    d = synth_shapes_captions(10, seed=0)
    for c in d.targets:
        words = c.split()
        assert words[1] in ("circle", "square", "cross") and words[-1] in ("top", "bottom")


def test_normalize_stats():
    x, stats = normalize(np.random.rand(5, 8, 8).astype(np.float32))
    assert x.shape == (5, 3, 8, 8)
    assert torch.allclose(x.mean(dim=(0, 2, 3)), torch.zeros(3), atol=1e-5)
    assert channel_stats(torch.ones(2, 3, 4, 4))["std"] == [1.0, 1.0, 1.0]


def test_convert_medmnist(tmp_path):
    rng = np.random.default_rng(0)
    np.savez(tmp_path / "d.npz", train_images=rng.integers(0, 255, (6, 28, 28), dtype=np.uint8),
             train_labels=rng.integers(0, 3, (6, 1)), val_images=rng.integers(0, 255, (2, 28, 28), dtype=np.uint8),
             val_labels=np.array([[0], [2]]))
    ds = load_dataset(convert_medmnist(tmp_path / "d.npz", tmp_path / "out"), image_size=28)
    assert len(ds["train"]) == 6 and ds["val"].targets.tolist() == [0, 2]
