import dataclasses
import math

import numpy as np
import pytest

from watermark3d import nn
from watermark3d.errors import CheckpointError, ManifestError, ShapeMismatchError
from watermark3d.model import (DESK_CHANNELS, FULL_CHANNELS, KERNEL_SIZES, Cnn3dwModel, TrainConfig,
                               augment, desk_config, forward, load_checkpoint, load_checkpoint_bytes,
                               full_config, save_checkpoint, save_checkpoint_bytes, train, train_step)
from watermark3d.render import ConditionRanges, gaussian_ground_truth, generate_dataset, read_manifest

TINY = (3, 4, 3, 2, 1)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    generate_dataset(out, 3, 4, 5, ranges=ConditionRanges(out_size=192), images_per_object=3,
                     natural_per_object=2)
    return str(out / "manifest.jsonl")


def tiny_config(**kw):
    base = dict(crop_size=64, crops_per_image=2, batch_size=2, channels=TINY, epochs=2,
                drop_after_epoch=1, lr=1e-3, lr_after_drop=1e-4)
    base.update(kw)
    return TrainConfig(**base)


# -- architecture and forward ----------------------------------------------------

def test_full_size_architecture():
    model = Cnn3dwModel(channels=FULL_CHANNELS, kernels=KERNEL_SIZES)
    assert model.architecture() == [(3, 48, 9), (48, 96, 7), (96, 48, 7), (48, 24, 7), (24, 1, 1)]


@pytest.mark.parametrize("h,w", [(512, 512), (100, 200), (36, 36), (37, 45)])
def test_output_is_quarter_size(h, w):
    model = Cnn3dwModel(channels=TINY)
    out = forward(model, np.random.default_rng(0).random((h, w, 3), dtype=np.float32))
    assert out.shape == (h // 4, w // 4)
    assert (out >= 0).all()


def test_undersized_and_wrong_channels():
    model = Cnn3dwModel(channels=TINY)
    with pytest.raises(ShapeMismatchError):
        forward(model, np.zeros((35, 64, 3), np.float32))
    with pytest.raises(ShapeMismatchError):
        forward(model, np.zeros((64, 64), np.float32))


def test_zero_weights_give_bias_constant():
    model = Cnn3dwModel(channels=TINY)
    for layer in model.layers:
        layer.weight.value[:] = 0
        layer.bias.value[:] = 0
    model.layers[-1].bias.value[:] = 0.25
    out = forward(model, np.random.default_rng(0).random((48, 40, 3), dtype=np.float32))
    np.testing.assert_array_equal(out, np.full((12, 10), 0.25, np.float32))


def test_translation_covariance():
    model = Cnn3dwModel(channels=TINY, seed=2, dtype=np.float64)
    x = np.random.default_rng(1).random((1, 3, 128, 128))
    shifted = np.zeros_like(x)
    shifted[..., 4:, 4:] = x[..., :-4, :-4]
    a = model.forward_batch(x)[0, 0]
    b = model.forward_batch(shifted)[0, 0]
    # the receptive field spans +-34 input px, so stay 10 map px clear of the padding
    np.testing.assert_allclose(b[11:-10, 11:-10], a[10:-11, 10:-11], atol=1e-10)


# -- configuration ----------------------------------------------------------------

def test_full_size_schedule():
    cfg = full_config()
    assert cfg.lr_at(1) == 1e-5 and cfg.lr_at(50) == 1e-5 and cfg.lr_at(51) == 1e-6
    assert cfg.epochs == 100 and cfg.crop_size == 512 and cfg.crops_per_image == 10
    assert desk_config().channels == DESK_CHANNELS


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(crop_size=126)


# -- augmentation -----------------------------------------------------------------

def test_augment_identity_crop_is_subwindow(rng):
    cfg = TrainConfig(crop_size=64)
    img = rng.random((128, 128, 3)).astype(np.float32)
    ann = np.zeros((32, 32), np.uint8)
    ann[10, 12] = 1
    # crop centre (63.5, 63.5) aligned with pixel indices: top-left source pixel is (32, 32)
    out, a = augment(img, ann, cfg, rng, angle=0.0, center=(63.5, 63.5), brightness=1.0)
    np.testing.assert_allclose(out, img[32:96, 32:96], atol=1e-6)
    assert np.argwhere(a).tolist() == [[2, 4]]


def test_augment_brightness_only_scales(rng):
    cfg = TrainConfig(crop_size=64)
    img = rng.random((100, 100, 3)).astype(np.float32) * 0.5
    a, _ = augment(img, np.zeros((25, 25), np.uint8), cfg, rng, angle=17.0, center=(50, 50), brightness=1.0)
    b, _ = augment(img, np.zeros((25, 25), np.uint8), cfg, rng, angle=17.0, center=(50, 50), brightness=1.2)
    np.testing.assert_allclose(b, np.clip(a * 1.2, 0, 1), atol=1e-6)


def test_augment_moves_peaks_with_image(rng):
    cfg = TrainConfig(crop_size=128)
    for _ in range(10):
        img = np.zeros((256, 256, 3), np.float32)
        ann = np.zeros((64, 64), np.uint8)
        pts = rng.integers(20, 44, size=(5, 2))
        for u, v in pts:
            ann[v, u] = 1
            # mark the matching image pixel block
            img[4 * v:4 * v + 4, 4 * u:4 * u + 4, 0] = 1.0
        angle = rng.uniform(-180, 180)
        out, a = augment(img, ann, cfg, rng, angle=angle, center=(127.5, 127.5), brightness=1.0)
        th = math.radians(angle)
        c, s = math.cos(th), math.sin(th)
        for v, u in np.argwhere(a):
            # map pixel centre -> crop pixel -> source pixel through the same rotation
            da, db = 4 * u + 1.5 - 63.5, 4 * v + 1.5 - 63.5
            sx, sy = 127.5 + c * da - s * db, 127.5 + s * da + c * db
            src_u, src_v = (sx - 1.5) / 4, (sy - 1.5) / 4
            assert np.min(np.hypot(pts[:, 0] - src_u, pts[:, 1] - src_v)) <= 1.0


def test_augment_crop_too_large(rng):
    with pytest.raises(ValueError):
        augment(np.zeros((60, 60, 3), np.float32), np.zeros((15, 15), np.uint8),
                TrainConfig(crop_size=64), rng)


# -- training -----------------------------------------------------------------------

def test_overfit_single_image():
    rng = np.random.default_rng(0)
    model = Cnn3dwModel(seed=1)
    x = rng.random((1, 3, 64, 64)).astype(np.float32)
    ann = np.zeros((16, 16))
    ann[[3, 8, 12], [4, 10, 6]] = 1
    y = (gaussian_ground_truth(ann, 1.5) / gaussian_ground_truth(ann, 1.5).max())[None, None]
    adam = nn.AdamState(lr=1e-3)
    losses = [train_step(model, x, y.astype(np.float32), adam) for _ in range(200)]
    assert all(np.isfinite(losses))
    assert losses[-1] < 0.1 * losses[0]


def test_train_records_losses_and_lrs(tiny_manifest):
    model = Cnn3dwModel(channels=TINY, seed=0)
    res = train(model, tiny_manifest, tiny_config())
    assert len(res.losses) == 2 and all(np.isfinite(res.losses))
    assert res.lrs == [1e-3, 1e-4]


def test_train_is_deterministic(tiny_manifest):
    a = Cnn3dwModel(channels=TINY, seed=0)
    b = Cnn3dwModel(channels=TINY, seed=0)
    ra = train(a, tiny_manifest, tiny_config(epochs=1))
    rb = train(b, tiny_manifest, tiny_config(epochs=1))
    assert ra.losses == rb.losses and a.checksum() == b.checksum()


def test_resume_matches_uninterrupted(tiny_manifest, tmp_path):
    full = Cnn3dwModel(channels=TINY, seed=0)
    ref = train(full, tiny_manifest, tiny_config(epochs=3))

    first = Cnn3dwModel(channels=TINY, seed=0)
    part = train(first, tiny_manifest, tiny_config(epochs=1, checkpoint_every=1,
                                                   checkpoint_dir=str(tmp_path)))
    model, adam, epoch = load_checkpoint(tmp_path / "epoch001.c3dw")
    assert epoch == 1
    rest = train(model, tiny_manifest, tiny_config(epochs=3), start_epoch=2, adam=adam)
    assert part.losses + rest.losses == ref.losses
    assert model.checksum() == full.checksum()


def test_train_empty_split(tiny_manifest):
    recs = [dict(r, split="test") for r in read_manifest(tiny_manifest)]
    with pytest.raises(ManifestError):
        train(Cnn3dwModel(channels=TINY), recs, tiny_config())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_detects_divergence(tiny_manifest):
    model = Cnn3dwModel(channels=TINY, seed=0)
    for layer in model.layers:
        layer.weight.value[:] = np.float32(1e30)
    with pytest.raises(FloatingPointError):
        train(model, tiny_manifest, tiny_config(epochs=1))


# -- checkpoints -----------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = Cnn3dwModel(seed=4)
    img = np.random.default_rng(0).random((64, 64, 3), dtype=np.float32)
    save_checkpoint(model, tmp_path / "m.c3dw")
    again, adam, epoch = load_checkpoint(tmp_path / "m.c3dw", expected_layers=5)
    assert adam is None and epoch == 0
    assert forward(again, img).tobytes() == forward(model, img).tobytes()
    assert again.checksum() == model.checksum()


def test_checkpoint_header_layout():
    data = save_checkpoint_bytes(Cnn3dwModel(channels=TINY))
    assert data[:4] == b"C3DW"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:12], "little") == 5
    assert [int.from_bytes(data[12 + 4 * k:16 + 4 * k], "little") for k in range(3)] == [3, 3, 9]


def test_checkpoint_with_adam_state():
    model = Cnn3dwModel(channels=TINY)
    adam = nn.AdamState(lr=5e-4, step=7, m=[np.full(p.shape, 0.5, np.float32) for p in model.params],
                        v=[np.full(p.shape, 0.25, np.float32) for p in model.params])
    _, loaded, epoch = load_checkpoint_bytes(save_checkpoint_bytes(model, adam, epoch=3))
    assert (loaded.step, loaded.lr, epoch) == (7, 5e-4, 3)
    assert all((a == 0.5).all() for a in loaded.m)


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + (2).to_bytes(4, "little") + d[8:], "version"),
    (lambda d: d[:-3], "truncated"),
    (lambda d: d + b"junk", "trailing"),
])
def test_checkpoint_corruption(mutate, msg):
    data = save_checkpoint_bytes(Cnn3dwModel(channels=TINY))
    with pytest.raises(CheckpointError, match=msg):
        load_checkpoint_bytes(mutate(data))


def test_checkpoint_layer_count_mismatch():
    data = save_checkpoint_bytes(Cnn3dwModel(channels=TINY))
    with pytest.raises(CheckpointError, match="layers"):
        load_checkpoint_bytes(data, expected_layers=6)
    bad = data[:8] + (6).to_bytes(4, "little") + data[12:]
    with pytest.raises(CheckpointError):
        load_checkpoint_bytes(bad)
