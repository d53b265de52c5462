"""Dataset ingestion and the input pipeline.

Raw examples are side-by-side pair PNGs (color ground truth on the left,
sketch on the right). Preparation splits, resizes to S x S with a documented
corner-aligned bilinear filter, and stores the pair back side by side under
<root>/{train,val}/<id>.png with a manifest listing `id<TAB>split` lines.
Loading normalizes 8-bit values to [-1, 1] via v/127.5 - 1; augmentation
jitters (upscale by S//8, shared random crop) and mirrors both halves with
one shared transform.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import tensor as ts
from .errors import ConfigError, DataError

MANIFEST_NAME = "manifest.tsv"


# ---------------------------------------------------------------------------
# image file I/O


def load_png(path):
    """Read an 8-bit RGB PNG into a uint8 [H, W, 3] array."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def save_png(arr, path):
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DataError(f"save_png expects uint8 values, got {arr.dtype}")
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


# ---------------------------------------------------------------------------
# pipeline primitives


def split_pair(raw):
    """Split a side-by-side pair into (color_half, sketch_half).

    The color ground truth is the left half, the sketch the right half.
    """
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise DataError(f"split_pair: expected [H, W, 3] image, got shape {raw.shape}")
    h, w = raw.shape[:2]
    if w % 2:
        raise DataError(f"split_pair: width {w} is odd, cannot halve")
    if h < 8:
        raise DataError(f"split_pair: height {h} below the minimum of 8")
    half = w // 2
    return raw[:, :half].copy(), raw[:, half:].copy()


def resize(img, size):
    """Corner-aligned bilinear resample of [H, W] or [H, W, C] to size x size.

    Sample positions are linspace(0, N-1, size) along each axis, so corners
    map to corners exactly and an S x S input is returned unchanged (as
    float32). No antialiasing; this one fixed filter keeps metrics
    comparable across runs. Pipeline target sizes must be >= 4 (enforced by
    prepare); the primitive itself accepts any size >= 2.
    """
    if size < 2:
        raise ConfigError(f"resize: target {size} below the minimum of 2")
    img = np.asarray(img, dtype=np.float32)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    if img.ndim != 3:
        raise DataError(f"resize: expected 2-D or 3-D image, got shape {img.shape}")

    def axis_coords(n):
        if n == 1:
            return np.zeros(size, dtype=np.float64)
        return np.linspace(0.0, n - 1, size)

    out = img
    for axis in (0, 1):
        n = out.shape[axis]
        pos = axis_coords(n)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        frac = (pos - lo).astype(np.float32)
        take_lo = np.take(out, lo, axis=axis)
        take_hi = np.take(out, hi, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = size
        w = frac.reshape(shape)
        out = take_lo * (1 - w) + take_hi * w
    return out if not squeeze else out[:, :, 0]


def normalize(img):
    """Map 8-bit values (possibly fractional after resize) to a [-1, 1] CHW tensor."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DataError(f"normalize: expected [H, W(, C)] image, got shape {arr.shape}")
    arr = arr / 127.5 - 1.0
    return ts.Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def denormalize(t):
    """Invert normalize: clamp to [0, 255] and round half-up to uint8 HWC."""
    arr = t.data if isinstance(t, ts.Tensor) else np.asarray(t)
    if arr.ndim != 3:
        raise DataError(f"denormalize: expected CHW tensor, got shape {arr.shape}")
    v = (arr.astype(np.float64) + 1.0) * 127.5
    v = np.clip(v, 0.0, 255.0)
    v = np.floor(v + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def to_unit(t):
    """Map a [-1, 1] CHW tensor to clipped [0, 1] float64 (metric representation)."""
    arr = t.data if isinstance(t, ts.Tensor) else np.asarray(t)
    return np.clip((arr.astype(np.float64) + 1.0) / 2.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# training examples


@dataclass
class ImagePair:
    """Aligned sketch/color example, both halves normalized to [-1, 1]."""

    sketch: ts.Tensor
    color: ts.Tensor
    id: str

    def __post_init__(self):
        if self.sketch.data.shape[1:] != self.color.data.shape[1:]:
            raise DataError(
                f"pair {self.id!r}: sketch {self.sketch.data.shape} and color "
                f"{self.color.data.shape} spatial extents differ"
            )
        for name, t in (("sketch", self.sketch), ("color", self.color)):
            lo, hi = float(t.data.min()), float(t.data.max())
            if lo < -1 - 1e-6 or hi > 1 + 1e-6:
                raise DataError(f"pair {self.id!r}: {name} values outside [-1, 1]: [{lo}, {hi}]")


@dataclass
class Batch:
    sketch: ts.Tensor  # [B, C, S, S]
    color: ts.Tensor  # [B, 3, S, S]
    ids: list = field(default_factory=list)

    def __len__(self):
        return self.sketch.data.shape[0]


def _chw_to_hwc(arr):
    return arr.transpose(1, 2, 0)


def _hwc_to_chw(arr):
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def augment(pair, seed):
    """Jitter-crop and mirror an ImagePair with one shared random transform.

    Both halves are upscaled from S to S + max(1, S//8), cropped at one
    shared offset back to S x S, then mirrored together with probability 0.5.
    """
    rng = np.random.default_rng(seed)
    s = pair.sketch.data.shape[-1]
    margin = max(1, s // 8)
    big = s + margin
    dy = int(rng.integers(0, margin + 1))
    dx = int(rng.integers(0, margin + 1))
    mirror = bool(rng.random() < 0.5)

    def transform(t):
        arr = resize(_chw_to_hwc(t.data), big)
        arr = arr[dy : dy + s, dx : dx + s]
        if mirror:
            arr = arr[:, ::-1]
        return ts.Tensor(_hwc_to_chw(np.clip(arr, -1.0, 1.0)))

    return ImagePair(sketch=transform(pair.sketch), color=transform(pair.color), id=pair.id)


# ---------------------------------------------------------------------------
# manifest and dataset


def write_manifest(root, entries):
    """entries: iterable of (id, split); written as `id<TAB>split` LF lines."""
    path = os.path.join(root, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair_id, split in entries:
            fh.write(f"{pair_id}\t{split}\n")
    return path


def read_manifest(root):
    path = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"missing manifest {path}")
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2 or fields[1] not in ("train", "val"):
                raise DataError(f"{path}:{line_no}: malformed manifest line {line!r}")
            entries.append((fields[0], fields[1]))
    return entries


class Dataset:
    """Prepared pair PNGs under <root>/{train,val} plus the manifest.

    Loaded pairs are cached in memory after first use (desk-scale sets are
    small). With grayscale_sketch=True the sketch half is collapsed to one
    luma channel.
    """

    def __init__(self, root, grayscale_sketch=False):
        self.root = root
        self.grayscale_sketch = grayscale_sketch
        self._splits = {"train": [], "val": []}
        for pair_id, split in read_manifest(root):
            self._splits[split].append(pair_id)
        self._cache = {}

    def ids(self, split):
        if split not in self._splits:
            raise ConfigError(f"unknown split {split!r}")
        return list(self._splits[split])

    def _path(self, pair_id):
        for split, members in self._splits.items():
            if pair_id in members:
                return os.path.join(self.root, split, f"{pair_id}.png")
        raise DataError(f"id {pair_id!r} not in manifest")

    def load_pair(self, pair_id):
        if pair_id in self._cache:
            return self._cache[pair_id]
        raw = load_png(self._path(pair_id))
        color, sketch = split_pair(raw)
        if self.grayscale_sketch:
            luma = (
                0.299 * sketch[:, :, 0] + 0.587 * sketch[:, :, 1] + 0.114 * sketch[:, :, 2]
            )
            sketch = luma
        pair = ImagePair(sketch=normalize(sketch), color=normalize(color), id=pair_id)
        self._cache[pair_id] = pair
        return pair

    @property
    def image_size(self):
        ids = self._splits["train"] or self._splits["val"]
        if not ids:
            raise DataError("dataset is empty")
        return self.load_pair(ids[0]).color.data.shape[-1]


def _derived_seed(*entropy):
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def batches(dataset, batch_size, seed, epoch, split="train", augmented=True):
    """Yield Batch objects covering one epoch.

    The permutation is a pure function of (seed, epoch) for the train split;
    the val split keeps manifest order. The last partial batch is kept, and
    each example appears exactly once. Augmentation draws a per-example
    stream from (seed, epoch, position).
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    ids = dataset.ids(split)
    if not ids:
        raise DataError(f"split {split!r} is empty")
    if split == "train":
        order = np.random.default_rng((seed, epoch)).permutation(len(ids))
    else:
        order = np.arange(len(ids))
    for start in range(0, len(ids), batch_size):
        chunk = order[start : start + batch_size]
        members = []
        for position, idx in enumerate(chunk, start=start):
            pair = dataset.load_pair(ids[idx])
            if augmented and split == "train":
                pair = augment(pair, _derived_seed(seed, epoch, position))
            members.append(pair)
        sketch = np.stack([p.sketch.data for p in members])
        color = np.stack([p.color.data for p in members])
        yield Batch(
            sketch=ts.Tensor(sketch), color=ts.Tensor(color), ids=[p.id for p in members]
        )


# ---------------------------------------------------------------------------
# preparation


@dataclass
class PrepareSummary:
    train_ids: list
    val_ids: list
    skipped: list  # (filename, reason)

    @property
    def total(self):
        return len(self.train_ids) + len(self.val_ids)


def prepare(input_dir, output_dir, size=256, val_fraction=0.1, seed=0):
    """Split, resize and store raw pair PNGs; write the manifest.

    The train/val split is a deterministic function of the seed over the
    sorted id list (floor(n * val_fraction) validation examples). Unreadable
    or odd-width inputs are skipped and reported in the summary.
    """
    if not 0 <= val_fraction < 1:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    if size < 4:
        raise ConfigError(f"prepare: target size {size} below the minimum of 4")
    names = sorted(n for n in os.listdir(input_dir) if n.lower().endswith(".png"))
    if not names:
        raise ConfigError(f"no .png files in {input_dir}")

    processed = []
    skipped = []
    os.makedirs(os.path.join(output_dir, "train"), exist_ok=True)
    os.makedirs(os.path.join(output_dir, "val"), exist_ok=True)
    prepared = {}
    for name in names:
        pair_id = os.path.splitext(name)[0]
        try:
            raw = load_png(os.path.join(input_dir, name))
            color, sketch = split_pair(raw)
        except DataError as exc:
            skipped.append((name, str(exc)))
            continue
        color_r = resize(color, size)
        sketch_r = resize(sketch, size)
        joined = np.concatenate([color_r, sketch_r], axis=1)
        prepared[pair_id] = np.clip(np.floor(joined + 0.5), 0, 255).astype(np.uint8)
        processed.append(pair_id)

    if not processed:
        raise DataError(f"no usable pair images in {input_dir} ({len(skipped)} skipped)")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(processed))
    n_val = int(len(processed) * val_fraction)
    val_ids = sorted(processed[i] for i in order[:n_val])
    train_ids = sorted(p for p in processed if p not in set(val_ids))

    entries = []
    for pair_id in train_ids:
        save_png(prepared[pair_id], os.path.join(output_dir, "train", f"{pair_id}.png"))
        entries.append((pair_id, "train"))
    for pair_id in val_ids:
        save_png(prepared[pair_id], os.path.join(output_dir, "val", f"{pair_id}.png"))
        entries.append((pair_id, "val"))
    write_manifest(output_dir, entries)
    return PrepareSummary(train_ids=train_ids, val_ids=val_ids, skipped=skipped)
