"""Dataset storage, the synthetic background-shift generator, and exports.

Images travel as flat little-endian float32 tensors with a 16-byte header
(magic + three u32 dims) listed by a plain-text manifest, one record per
line.  The generator composites a class-determined foreground shape over a
value-noise background texture; binding textures to classes on the base
split while shuffling them on the novel split manufactures exactly the
background/foreground confound the correlation branches are meant to beat.
"""
from __future__ import annotations

import colorsys
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

IMAGE_MAGIC = b"FCIM"
MANIFEST_VERSION = 1
SPLITS = ("base", "novel")

SHAPES = ("circle", "square", "triangle", "diamond", "ring", "cross", "bar")
BACKGROUND_MODES = ("correlated", "shuffled", "none")


@dataclass
class Dataset:
    """Images in [0, 1], integer class labels, and a base/novel split map."""

    images: np.ndarray                    # (M, H, W, 3) float64
    labels: np.ndarray                    # (M,) int
    splits: np.ndarray                    # (M,) "base" | "novel"
    texture_ids: np.ndarray | None = None  # generator bookkeeping, not persisted

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        self.splits = np.asarray(self.splits)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise DataError(f"images must be (M, H, W, 3), got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.splits) != len(self.images):
            raise DataError("images, labels, and splits must have equal length")
        bad = set(np.unique(self.splits)) - set(SPLITS)
        if bad:
            raise DataError(f"unknown split names {sorted(bad)}")
        overlap = set(self.classes("base")) & set(self.classes("novel"))
        if overlap:
            raise DataError(f"classes {sorted(overlap)} appear in both splits")

    @property
    def image_size(self) -> tuple:
        return self.images.shape[1:3]

    def classes(self, split: str | None = None) -> list:
        mask = slice(None) if split is None else self.splits == split
        present = self.labels[mask]
        return sorted(int(c) for c in np.unique(present)) if present.size else []

    def indices_by_class(self, split: str) -> dict:
        out: dict = {}
        for i in np.flatnonzero(self.splits == split):
            out.setdefault(int(self.labels[i]), []).append(int(i))
        return {c: np.asarray(v) for c, v in sorted(out.items())}


# -- binary image files and the manifest ----------------------------------------


def write_image(path, image: np.ndarray) -> None:
    arr = np.ascontiguousarray(image, dtype="<f4")
    if arr.ndim != 3:
        raise DataError(f"image must be rank-3, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<3I", *arr.shape))
        fh.write(arr.tobytes())


def read_image(path) -> np.ndarray:
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != IMAGE_MAGIC:
        raise DataError(f"{path} is not an image tensor file")
    h, w, c = struct.unpack("<3I", blob[4:16])
    expected = 16 + 4 * h * w * c
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(h, w, c).astype(np.float64)


def save_dataset(ds: Dataset, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    h, w = ds.image_size
    lines = [f"version={MANIFEST_VERSION} height={h} width={w}"]
    for i in range(len(ds.images)):
        rel = f"images/img_{i:05d}.bin"
        write_image(out_dir / rel, ds.images[i])
        lines.append(f"file={rel} label={int(ds.labels[i])} split={ds.splits[i]}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _parse_record(line: str, lineno: int) -> dict:
    fields = {}
    for token in line.split():
        if "=" not in token:
            raise DataError(f"manifest line {lineno}: bad token {token!r}")
        key, _, value = token.partition("=")
        fields[key] = value
    return fields


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    lines = manifest_path.read_text().splitlines()
    if not lines:
        raise DataError(f"{manifest_path} is empty")
    header = _parse_record(lines[0], 1)
    if header.get("version") != str(MANIFEST_VERSION):
        raise DataError(f"manifest line 1: unsupported version {header.get('version')!r}")
    try:
        height, width = int(header["height"]), int(header["width"])
    except (KeyError, ValueError):
        raise DataError("manifest line 1: header needs integer height and width") from None
    images, labels, splits = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = _parse_record(line, lineno)
        for need in ("file", "label", "split"):
            if need not in rec:
                raise DataError(f"manifest line {lineno}: missing {need}=")
        if rec["split"] not in SPLITS:
            raise DataError(f"manifest line {lineno}: split must be base or novel, "
                            f"got {rec['split']!r}")
        try:
            labels.append(int(rec["label"]))
        except ValueError:
            raise DataError(f"manifest line {lineno}: label {rec['label']!r} "
                            "is not an integer") from None
        img = read_image(manifest_path.parent / rec["file"])
        if img.shape[:2] != (height, width):
            raise DataError(f"manifest line {lineno}: image is {img.shape[:2]}, "
                            f"header says {(height, width)}")
        images.append(img)
        splits.append(rec["split"])
    if not images:
        raise DataError(f"{manifest_path} lists no images")
    try:
        return Dataset(np.stack(images), np.asarray(labels), np.asarray(splits))
    except DataError as exc:
        raise DataError(f"{manifest_path}: {exc}") from None


def dataset_digest(ds: Dataset) -> str:
    """Order-independent content hash over (label, split, float32 image)."""
    record_digests = []
    for i in range(len(ds.images)):
        h = hashlib.sha256()
        h.update(struct.pack("<q", int(ds.labels[i])))
        h.update(str(ds.splits[i]).encode())
        h.update(np.ascontiguousarray(ds.images[i], dtype="<f4").tobytes())
        record_digests.append(h.digest())
    outer = hashlib.sha256()
    for d in sorted(record_digests):
        outer.update(d)
    return outer.hexdigest()


# -- synthetic background-shift generator ----------------------------------------


@dataclass
class SynthSpec:
    """Everything the generator needs; one texture pool serves both splits."""

    base_classes: int = 8
    novel_classes: int = 5
    images_per_class: int = 60
    size: int = 32
    textures: int = 0                     # 0 means one texture per class
    base_background: str = "correlated"
    novel_background: str = "shuffled"
    noise: float = 0.02
    fg_scale: float = 0.30                # foreground radius relative to image size
    bg_contrast: float = 0.6              # texture amplitude
    seed: int = 0

    def __post_init__(self):
        if self.base_classes < 1 or self.novel_classes < 0:
            raise ConfigError("need at least one base class")
        if self.images_per_class < 1:
            raise ConfigError("images_per_class must be positive")
        if self.size < 8:
            raise ConfigError("image size must be at least 8")
        for mode in (self.base_background, self.novel_background):
            if mode not in BACKGROUND_MODES:
                raise ConfigError(f"background mode must be one of "
                                  f"{BACKGROUND_MODES}, got {mode!r}")
        if not 0 <= self.noise < 0.5:
            raise ConfigError("noise must lie in [0, 0.5)")

    @property
    def n_classes(self) -> int:
        return self.base_classes + self.novel_classes

    @property
    def texture_pool(self) -> int:
        return self.textures if self.textures > 0 else self.n_classes


_SYNTH_KEYS = {
    "synth.base_classes": ("int", "base_classes"),
    "synth.novel_classes": ("int", "novel_classes"),
    "synth.images_per_class": ("int", "images_per_class"),
    "synth.size": ("int", "size"),
    "synth.textures": ("int", "textures"),
    "synth.background_mode": ("mode", None),      # shorthand for both splits
    "synth.base_background": ("str", "base_background"),
    "synth.novel_background": ("str", "novel_background"),
    "synth.noise": ("float", "noise"),
    "synth.fg_scale": ("float", "fg_scale"),
    "synth.bg_contrast": ("float", "bg_contrast"),
    "synth.seed": ("int", "seed"),
}


def parse_synth_spec(text: str) -> SynthSpec:
    """Parse `synth.key = value` lines into a SynthSpec."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _SYNTH_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind, attr = _SYNTH_KEYS[key]
        try:
            if kind == "int":
                values[attr] = int(raw)
            elif kind == "float":
                values[attr] = float(raw)
            elif kind == "mode":
                values["base_background"] = raw
                values["novel_background"] = raw
            else:
                values[attr] = raw
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None
    return SynthSpec(**values)


def load_synth_spec(path) -> SynthSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"spec file not found: {path}")
    return parse_synth_spec(path.read_text())


def _texture(seed: int, texture_id: int, size: int, contrast: float) -> np.ndarray:
    """Seeded value-noise texture with a per-texture tint, values in [0, 1]."""
    rng = np.random.default_rng([seed, 7919, texture_id])
    noise = np.zeros((size, size))
    for cells, weight in ((4, 0.6), (8, 0.4)):
        grid = rng.random((cells + 1, cells + 1))
        noise += weight * _bilinear(grid, size)
    hue = rng.random()
    tint = np.array(colorsys.hsv_to_rgb(hue, 0.55, 1.0))
    level = (1.0 - contrast) * 0.5 + contrast * noise
    return level[:, :, None] * tint[None, None, :]


def _bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    cells = grid.shape[0] - 1
    pos = (np.arange(size) + 0.5) / size * cells
    i0 = np.minimum(pos.astype(int), cells - 1)
    frac = pos - i0
    g = grid[np.ix_(i0, i0)]
    gx = grid[np.ix_(i0, i0 + 1)]
    gy = grid[np.ix_(i0 + 1, i0)]
    gxy = grid[np.ix_(i0 + 1, i0 + 1)]
    fy, fx = frac[:, None], frac[None, :]
    return (g * (1 - fx) * (1 - fy) + gx * fx * (1 - fy)
            + gy * (1 - fx) * fy + gxy * fx * fy)


def _polygon_mask(rx: np.ndarray, ry: np.ndarray, verts) -> np.ndarray:
    inside = np.ones_like(rx, dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        inside &= (x1 - x0) * (ry - y0) - (y1 - y0) * (rx - x0) >= 0
    return inside


def _regular_verts(sides: int, r: float, phase: float = 0.0) -> list:
    angles = phase + 2 * np.pi * np.arange(sides) / sides
    return [(r * np.cos(a), r * np.sin(a)) for a in angles]


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float,
                angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    rx, ry = ca * dx + sa * dy, -sa * dx + ca * dy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(rx), np.abs(ry)) <= 0.85 * r
    if shape == "triangle":
        return _polygon_mask(rx, ry, _regular_verts(3, 1.15 * r, np.pi / 2))
    if shape == "diamond":
        return np.abs(rx) + np.abs(ry) <= 1.2 * r
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((np.abs(rx) <= 0.35 * r) | (np.abs(ry) <= 0.35 * r)) \
            & (np.maximum(np.abs(rx), np.abs(ry)) <= r)
    if shape == "bar":
        return (np.abs(rx) <= r) & (np.abs(ry) <= 0.4 * r)
    raise ConfigError(f"unknown shape {shape!r}")


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Deterministic dataset from a SynthSpec; images are float32-exact."""
    rng = np.random.default_rng(spec.seed)
    size, total = spec.size, spec.n_classes
    pool = spec.texture_pool
    textures = [_texture(spec.seed, t, size, spec.bg_contrast) for t in range(pool)]
    images, labels, splits, tex_ids = [], [], [], []
    for cls in range(total):
        split = "base" if cls < spec.base_classes else "novel"
        mode = spec.base_background if split == "base" else spec.novel_background
        shape = SHAPES[cls % len(SHAPES)]
        color = np.array(colorsys.hsv_to_rgb(cls / total, 1.0, 1.0))
        for _ in range(spec.images_per_class):
            if mode == "correlated":
                tex = cls % pool
            elif mode == "shuffled":
                tex = int(rng.integers(pool))
            else:
                tex = -1
            img = np.zeros((size, size, 3)) if tex < 0 else textures[tex].copy()
            cx = size / 2 + rng.uniform(-0.15, 0.15) * size
            cy = size / 2 + rng.uniform(-0.15, 0.15) * size
            r = spec.fg_scale * size * rng.uniform(0.8, 1.2)
            angle = rng.uniform(0, 2 * np.pi)
            mask = _shape_mask(shape, size, cx, cy, r, angle)
            brightness = rng.uniform(0.85, 1.0)
            img[mask] = color * brightness
            if spec.noise > 0:
                img = img + rng.normal(0.0, spec.noise, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(cls)
            splits.append(split)
            tex_ids.append(tex)
    stacked = np.stack(images).astype("<f4").astype(np.float64)
    return Dataset(stacked, np.asarray(labels), np.asarray(splits),
                   texture_ids=np.asarray(tex_ids))


# -- attention-map export ---------------------------------------------------------


def export_attention(maps, episode_id, out_dir) -> Path:
    """Write each (image_id, branch, H-by-W weights) map as a CSV grid.

    Returns the index file, which gains one line per map naming the source
    image and branch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = out_dir / "attention_index.txt"
    lines = []
    for image_id, branch, grid in maps:
        arr = np.asarray(grid, dtype=np.float64)
        if arr.ndim != 2:
            raise DataError(f"attention map for image {image_id} is not 2-D")
        name = f"ep{episode_id}_{branch}_img{image_id}.csv"
        try:
            with open(out_dir / name, "w") as fh:
                for row in arr:
                    fh.write(",".join(repr(float(v)) for v in row) + "\n")
        except OSError as exc:
            raise DataError(f"cannot write {out_dir / name}: {exc}") from exc
        lines.append(f"map={name} episode={episode_id} "
                     f"image={image_id} branch={branch}")
    # the index is appended, so several episodes can share one directory
    with open(index, "a") as fh:
        for line in lines:
            fh.write(line + "\n")
    return index


def read_attention_csv(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read attention map {path}: {exc}") from exc
    rows = [[float(v) for v in line.split(",")]
            for line in text.splitlines() if line.strip()]
    return np.asarray(rows, dtype=np.float64)
