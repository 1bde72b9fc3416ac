"""Small stacked-convolution feature extractor and the episode channel shift.

Each block is conv(3x3, same padding) -> batch norm -> ReLU, with a 2x
average-pool downsample in the first `downsample_blocks` blocks and a final
center crop to the configured feature size.  The default config maps a
32x32x3 image to a 5x5x64 feature map.  Batch statistics are used while
training; evaluation runs on frozen running statistics so it is fully
deterministic.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import Config
from .errors import DataError, ShapeError

KERNEL_SIZE = 3
IMAGE_CHANNELS = 3

CHECKPOINT_MAGIC = b"FCKP"
CHECKPOINT_VERSION = 1


@dataclass
class BackboneParams:
    """Learnable tensors plus frozen running statistics for every block."""

    widths: list
    downsample_blocks: int
    feature_size: int
    bn_momentum: float
    bn_eps: float
    params: dict = field(default_factory=dict)    # name -> Tensor (learnable)
    running: dict = field(default_factory=dict)   # name -> np.ndarray (buffers)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


def init_backbone(cfg: Config, rng: np.random.Generator) -> BackboneParams:
    """Fresh parameters, uniform in +-sqrt(1/fan_in), from the run RNG."""
    widths = list(cfg["backbone.widths"])
    if len(widths) != cfg["backbone.blocks"]:
        widths = (widths + [widths[-1]] * cfg["backbone.blocks"])[:cfg["backbone.blocks"]]
    bb = BackboneParams(
        widths=widths,
        downsample_blocks=cfg["backbone.downsample_blocks"],
        feature_size=cfg["backbone.feature_size"],
        bn_momentum=cfg["backbone.bn_momentum"],
        bn_eps=cfg["backbone.bn_eps"],
    )
    c_in = IMAGE_CHANNELS
    for i, c_out in enumerate(widths):
        fan_in = KERNEL_SIZE * KERNEL_SIZE * c_in
        bound = np.sqrt(1.0 / fan_in)
        kern = rng.uniform(-bound, bound, size=(KERNEL_SIZE, KERNEL_SIZE, c_in, c_out))
        bias = rng.uniform(-bound, bound, size=(c_out,))
        bb.params[f"block{i}.kernel"] = ad.parameter(kern)
        bb.params[f"block{i}.bias"] = ad.parameter(bias)
        bb.params[f"block{i}.gamma"] = ad.parameter(np.ones(c_out))
        bb.params[f"block{i}.beta"] = ad.parameter(np.zeros(c_out))
        bb.running[f"block{i}.running_mean"] = np.zeros(c_out)
        bb.running[f"block{i}.running_var"] = np.ones(c_out)
        c_in = c_out
    return bb


def extract_features(images, bb: BackboneParams, training: bool = False):
    """Forward pass: (B, H_img, W_img, 3) -> (B, H, W, C) feature maps.

    Returns (features, new_running): when training, `new_running` carries the
    updated running statistics for the caller to commit after the step; the
    forward itself never mutates `bb`, so it stays pure and repeatable.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    if x.ndim != 4 or x.shape[3] != IMAGE_CHANNELS:
        raise ShapeError(f"expected a (B, H, W, {IMAGE_CHANNELS}) image batch, got {x.shape}")
    new_running = {}
    pad = (KERNEL_SIZE - 1) // 2
    for i in range(len(bb.widths)):
        x = ad.conv2d(x, bb.params[f"block{i}.kernel"], stride=1, padding=pad)
        x = x + bb.params[f"block{i}.bias"]
        x = _batch_norm(x, bb, i, training, new_running)
        x = ad.relu(x)
        if i < bb.downsample_blocks:
            x = ad.avg_pool2(x)
    x = _center_crop(x, bb.feature_size)
    return x, new_running


def _batch_norm(x: Tensor, bb: BackboneParams, block: int, training: bool,
                new_running: dict) -> Tensor:
    eps = bb.bn_eps
    if training:
        m = x.mean(axis=(0, 1, 2), keepdims=True)
        v = ((x - m) ** 2).mean(axis=(0, 1, 2), keepdims=True)
        mom = bb.bn_momentum
        new_running[f"block{block}.running_mean"] = (
            (1 - mom) * bb.running[f"block{block}.running_mean"] + mom * m.data.ravel())
        new_running[f"block{block}.running_var"] = (
            (1 - mom) * bb.running[f"block{block}.running_var"] + mom * v.data.ravel())
    else:
        m = Tensor(bb.running[f"block{block}.running_mean"].reshape(1, 1, 1, -1))
        v = Tensor(bb.running[f"block{block}.running_var"].reshape(1, 1, 1, -1))
    xn = (x - m) / ad.sqrt(v + eps)
    return xn * bb.params[f"block{block}.gamma"] + bb.params[f"block{block}.beta"]


def _center_crop(x: Tensor, size: int) -> Tensor:
    _, h, w, _ = x.shape
    if h < size or w < size:
        raise ShapeError(f"feature map {h}x{w} smaller than crop size {size}")
    if h == size and w == size:
        return x
    top = (h - size) // 2
    left = (w - size) // 2
    return x[:, top:top + size, left:left + size, :]


def episode_channel_shift(maps: Tensor) -> Tensor:
    """Subtract each channel's mean over every position of every map.

    After the shift the pooled per-channel episode mean is zero; applying
    the shift twice is a no-op.
    """
    if maps.ndim != 4:
        raise ShapeError("episode_channel_shift expects (B, H, W, C) maps")
    if maps.shape[0] < 1:
        raise ShapeError("episode_channel_shift needs at least one map")
    return maps - maps.mean(axis=(0, 1, 2), keepdims=True)


# -- checkpoint file format -----------------------------------------------------
#
# little-endian binary: magic "FCKP", u32 format version, length-prefixed
# config digest, u32 tensor count, then per tensor: length-prefixed name,
# u32 rank, u32 dims, float32 values.


def save_checkpoint(path, tensors: dict, config_digest: str) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        digest = config_digest.encode()
        fh.write(struct.pack("<I", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float32)
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (config_digest, {name: float64 array})."""
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise DataError(f"truncated checkpoint file {path}")
        piece = blob[off:off + n]
        off += n
        return piece

    if take(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (dlen,) = struct.unpack("<I", take(4))
    digest = take(dlen).decode()
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_values = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * n_values), dtype="<f4")
        tensors[name] = values.reshape(dims).astype(np.float64)
    return digest, tensors


def backbone_state(bb: BackboneParams) -> dict:
    """All tensors needed to rebuild the extractor, keyed by name."""
    state = {name: t.data for name, t in bb.params.items()}
    state.update(bb.running)
    return state


def restore_backbone(cfg: Config, state: dict) -> BackboneParams:
    bb = init_backbone(cfg, np.random.default_rng(0))
    for name in bb.params:
        if name not in state:
            raise DataError(f"checkpoint is missing tensor {name!r}")
        if state[name].shape != bb.params[name].shape:
            raise DataError(f"checkpoint tensor {name!r} has shape "
                            f"{state[name].shape}, config wants {bb.params[name].shape}")
        bb.params[name] = ad.parameter(state[name])
    for name in bb.running:
        if name not in state:
            raise DataError(f"checkpoint is missing tensor {name!r}")
        bb.running[name] = np.asarray(state[name], dtype=np.float64)
    return bb
