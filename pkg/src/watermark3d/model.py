"""The confidence-map network: architecture, augmentation, training, checkpoints."""

import hashlib
import io
import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import nn
from .errors import CheckpointError, ManifestError, ShapeMismatchError
from .netpbm import read_pnm
from .render import gaussian_ground_truth, image_to_map, kernel_peak, map_to_image, read_manifest

log = logging.getLogger(__name__)

FULL_CHANNELS = (48, 96, 48, 24, 1)
KERNEL_SIZES = (9, 7, 7, 7, 1)
DESK_CHANNELS = (12, 24, 12, 6, 1)
# max pooling follows these layer indices
POOL_AFTER = (0, 1)
MIN_INPUT = 36

CHECKPOINT_MAGIC = b"C3DW"
ADAM_MAGIC = b"ADAM"
CHECKPOINT_VERSION = 1


class Cnn3dwModel:
    """conv+ReLU, pool, conv+ReLU, pool, conv+ReLU, conv+ReLU, linear 1x1 head."""

    def __init__(self, channels=DESK_CHANNELS, kernels=KERNEL_SIZES, in_channels=3,
                 seed=0, dtype=np.float32):
        if len(channels) != len(kernels):
            raise ValueError("channels and kernels must have equal length")
        rng = np.random.default_rng(seed)
        self.layers = []
        cin = in_channels
        for cout, k in zip(channels, kernels):
            self.layers.append(nn.ConvLayer(cin, cout, k, rng=rng, dtype=dtype))
            cin = cout

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def dtype(self):
        return self.layers[0].weight.value.dtype

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def forward_batch(self, x, keep=False):
        """Raw (unclamped) network output for an NCHW batch.

        With ``keep=True`` also returns the per-layer caches for ``backward``.
        """
        caches = []
        last = len(self.layers) - 1
        for idx, layer in enumerate(self.layers):
            z = nn.conv2d_forward(x, layer)
            cache = {"x": x}
            if idx != last:
                cache["z"] = z
                z = nn.relu_forward(z)
                if idx in POOL_AFTER:
                    cache["pre_pool"] = z.shape
                    z, cache["argmax"] = nn.maxpool2x2_forward(z)
            if keep:
                caches.append(cache)
            x = z
        return (x, caches) if keep else x

    def backward(self, caches, upstream):
        """Accumulate parameter gradients; returns the gradient w.r.t. the input."""
        g = upstream
        for idx in range(len(self.layers) - 1, -1, -1):
            layer, cache = self.layers[idx], caches[idx]
            if "argmax" in cache:
                g = nn.maxpool2x2_backward(cache["pre_pool"], cache["argmax"], g)
            if "z" in cache:
                g = nn.relu_backward(cache["z"], g)
            gx, gw, gb = nn.conv2d_backward(cache["x"], layer, g, need_input_grad=True)
            layer.weight.grad = gw.astype(layer.weight.value.dtype)
            layer.bias.grad = gb.astype(layer.bias.value.dtype)
            g = gx
        return g

    def architecture(self):
        return [(l.in_channels, l.out_channels, l.kernel_size) for l in self.layers]

    def checksum(self):
        return hashlib.sha256(save_checkpoint_bytes(self)).hexdigest()


def forward(model, image):
    """Confidence map of an (H, W, 3) image in [0, 1]; negatives clamped to 0."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError(f"expected an (H, W, 3) image, got {image.shape}")
    if min(image.shape[:2]) < MIN_INPUT:
        raise ShapeMismatchError(f"input must be at least {MIN_INPUT}x{MIN_INPUT}")
    x = image.transpose(2, 0, 1)[None].astype(model.dtype)
    return np.maximum(model.forward_batch(x)[0, 0], 0)


# -- training configuration --------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_after_drop: float = 1e-4
    drop_after_epoch: int = 2
    epochs: int = 4
    batch_size: int = 4
    crop_size: int = 128
    crops_per_image: int = 10
    rotation_deg: float = 180.0
    brightness: tuple = (0.7, 1.3)
    sigma: float = 1.5
    # targets are divided by the kernel peak so a bump's target maximum is ~1
    normalize_targets: bool = True
    channels: tuple = DESK_CHANNELS
    kernels: tuple = KERNEL_SIZES
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.crop_size % 4:
            raise ValueError("crop_size must be divisible by 4")

    def lr_at(self, epoch):
        """Learning rate used during (1-based) ``epoch``."""
        return self.lr if epoch <= self.drop_after_epoch else self.lr_after_drop


def full_config(**overrides):
    """Full-size network: 512 px crops, sigma 5, lr 1e-5 then 1e-6 after epoch 50 of 100."""
    base = TrainConfig(lr=1e-5, lr_after_drop=1e-6, drop_after_epoch=50, epochs=100,
                       crop_size=512, channels=FULL_CHANNELS, sigma=5.0)
    return replace(base, **overrides)


def desk_config(**overrides):
    return replace(TrainConfig(), **overrides)


# -- augmentation ------------------------------------------------------------

def augment(image, annotation, config, rng, angle=None, center=None, brightness=None):
    """Rotated crop of an image and its map-resolution annotation image.

    The crop is ``config.crop_size`` square, rotated by ``angle`` degrees about
    ``center`` (image pixel coordinates).  Annotation pixels are moved through
    the same transform and re-rasterised; brightness only scales the image.
    """
    s = config.crop_size
    h, w = image.shape[:2]
    if s > min(h, w):
        raise ValueError(f"crop {s} larger than image {w}x{h}")
    if angle is None:
        angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    th = math.radians(angle)
    c, sn = math.cos(th), math.sin(th)
    if center is None:
        ext = min(0.5 * s * (abs(c) + abs(sn)), 0.5 * min(h, w) - 0.5)
        center = (rng.uniform(ext - 0.5, w - 0.5 - ext), rng.uniform(ext - 0.5, h - 0.5 - ext))
    if brightness is None:
        brightness = rng.uniform(*config.brightness)
    cx, cy = center
    half = (s - 1) / 2.0
    b, a = np.mgrid[0:s, 0:s].astype(np.float64)
    da, db = a - half, b - half
    src_x = cx + c * da - sn * db
    src_y = cy + sn * da + c * db
    img = np.stack([ndimage.map_coordinates(image[..., k], [src_y, src_x], order=1,
                                            mode="constant", cval=0.0)
                    for k in range(image.shape[2])], axis=-1)
    img = np.clip(img * brightness, 0.0, 1.0).astype(np.float32)

    ms = s // 4
    out = np.zeros((ms, ms), dtype=np.uint8)
    vs, us = np.nonzero(annotation)
    if len(us):
        p = map_to_image(np.stack([us, vs], axis=1))
        dx, dy = p[:, 0] - cx, p[:, 1] - cy
        q = np.stack([c * dx + sn * dy + half, -sn * dx + c * dy + half], axis=1)
        qm = np.rint(image_to_map(q)).astype(int)
        ok = (qm >= 0).all(axis=1) & (qm < ms).all(axis=1)
        out[qm[ok, 1], qm[ok, 0]] = 1
    return img, out


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: Cnn3dwModel
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    adam: nn.AdamState = None


def load_training_pairs(records):
    pairs = []
    for rec in records:
        base = rec.get("_base", ".")
        img = read_pnm(os.path.join(base, rec["image_file"]))
        ann = read_pnm(os.path.join(base, rec["annotation_file"])) > 0
        pairs.append((img, ann.astype(np.uint8)))
    return pairs


def _epoch_batches(pairs, config, epoch):
    """Deterministic crop schedule for one epoch, from SeedSequence([seed, epoch])."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch]))
    jobs = [(i, int(rng.integers(0, 2**31 - 1)))
            for i in range(len(pairs)) for _ in range(config.crops_per_image)]
    order = rng.permutation(len(jobs))
    jobs = [jobs[k] for k in order]
    for start in range(0, len(jobs), config.batch_size):
        yield jobs[start:start + config.batch_size]


def train_step(model, x, target, adam):
    pred, caches = model.forward_batch(x, keep=True)
    loss, grad = nn.mse_loss(pred, target)
    model.backward(caches, grad.astype(pred.dtype))
    params = model.params
    nn.adam_step([p.value for p in params], [p.grad for p in params], adam)
    return loss


def train(model, records, config, start_epoch=1, adam=None, progress=None):
    """Fit ``model`` on the train-split records of a manifest.

    Returns a TrainResult with the mean loss and learning rate of every epoch
    run.  Pass ``start_epoch``/``adam`` from a checkpoint to resume.
    """
    if isinstance(records, (str, os.PathLike)):
        records = read_manifest(records)
    train_recs = [r for r in records if r.get("split", "train") == "train"]
    if not train_recs:
        raise ManifestError("no train-split records")
    pairs = load_training_pairs(train_recs)
    adam = adam or nn.AdamState(lr=config.lr_at(start_epoch))
    scale = 1.0 / kernel_peak(config.sigma) if config.normalize_targets else 1.0
    result = TrainResult(model=model, adam=adam)
    for epoch in range(start_epoch, config.epochs + 1):
        adam.lr = config.lr_at(epoch)
        total, steps = 0.0, 0
        for batch in _epoch_batches(pairs, config, epoch):
            xs, ys = [], []
            for idx, crop_seed in batch:
                img, ann = pairs[idx]
                crop, a = augment(img.astype(np.float32) / 255.0, ann, config,
                                  np.random.default_rng(crop_seed))
                xs.append(crop.transpose(2, 0, 1))
                ys.append(gaussian_ground_truth(a, config.sigma)[None] * scale)
            x = np.stack(xs).astype(model.dtype)
            y = np.stack(ys).astype(model.dtype)
            loss = train_step(model, x, y, adam)
            if not math.isfinite(loss):
                raise FloatingPointError(f"training diverged at epoch {epoch}")
            total += loss
            steps += 1
        result.losses.append(total / steps)
        result.lrs.append(adam.lr)
        log.info("epoch %d lr %.1e loss %.6f", epoch, adam.lr, result.losses[-1])
        if progress:
            progress(epoch, result.losses[-1])
        if config.checkpoint_every and config.checkpoint_dir and epoch % config.checkpoint_every == 0:
            os.makedirs(config.checkpoint_dir, exist_ok=True)
            save_checkpoint(model, os.path.join(config.checkpoint_dir, f"epoch{epoch:03d}.c3dw"),
                            adam=adam, epoch=epoch)
    return result


# -- checkpoints -------------------------------------------------------------
#
# "C3DW" | u32 version | u32 layer count | per layer u32 in, out, k |
# f32 weights (layer order) | f32 biases (layer order) |
# optional: "ADAM" | u32 step | u32 epoch | f64 lr | f32 m then v, per param

def save_checkpoint_bytes(model, adam=None, epoch=0):
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(model.layers)))
    for cin, cout, k in model.architecture():
        buf.write(struct.pack("<III", cin, cout, k))
    for layer in model.layers:
        buf.write(layer.weight.value.astype("<f4").tobytes())
    for layer in model.layers:
        buf.write(layer.bias.value.astype("<f4").tobytes())
    if adam is not None and adam.m:
        buf.write(ADAM_MAGIC)
        buf.write(struct.pack("<IId", adam.step, epoch, adam.lr))
        for arrs in (adam.m, adam.v):
            for a in arrs:
                buf.write(np.asarray(a).astype("<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model, path, adam=None, epoch=0):
    with open(path, "wb") as fh:
        fh.write(save_checkpoint_bytes(model, adam, epoch))


def _read(buf, n, what):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint_bytes(data, expected_layers=None):
    """Returns (model, adam_or_None, epoch)."""
    buf = io.BytesIO(data)
    if _read(buf, 4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a C3DW checkpoint")
    version, nlayers = struct.unpack("<II", _read(buf, 8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if expected_layers is not None and nlayers != expected_layers:
        raise CheckpointError(
            f"checkpoint has {nlayers} layers, expected {expected_layers}"
        )
    if not 1 <= nlayers <= 64:
        raise CheckpointError(f"implausible layer count {nlayers}")
    arch = [struct.unpack("<III", _read(buf, 12, "layer header")) for _ in range(nlayers)]
    for idx in range(1, nlayers):
        if arch[idx][0] != arch[idx - 1][1]:
            raise CheckpointError(f"layer {idx} input channels do not chain")
    model = Cnn3dwModel(channels=[a[1] for a in arch], kernels=[a[2] for a in arch],
                        in_channels=arch[0][0])
    for layer, (cin, cout, k) in zip(model.layers, arch):
        n = cout * cin * k * k
        layer.weight.value = np.frombuffer(_read(buf, 4 * n, "weights"), "<f4").astype(
            np.float32).reshape(cout, cin, k, k)
    for layer, (_, cout, _) in zip(model.layers, arch):
        layer.bias.value = np.frombuffer(_read(buf, 4 * cout, "biases"), "<f4").astype(np.float32)
    adam, epoch = None, 0
    tag = buf.read(4)
    if tag:
        if tag != ADAM_MAGIC:
            raise CheckpointError("unexpected trailing data in checkpoint")
        step, epoch, lr = struct.unpack("<IId", _read(buf, 16, "optimizer header"))
        adam = nn.AdamState(lr=lr, step=step)
        for name in ("m", "v"):
            arrs = []
            for p in model.params:
                n = int(np.prod(p.shape))
                arrs.append(np.frombuffer(_read(buf, 4 * n, f"adam {name}"), "<f4")
                            .astype(np.float32).reshape(p.shape))
            setattr(adam, name, arrs)
        if buf.read(1):
            raise CheckpointError("unexpected trailing data in checkpoint")
    return model, adam, epoch


def load_checkpoint(path, expected_layers=None):
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read(), expected_layers)
