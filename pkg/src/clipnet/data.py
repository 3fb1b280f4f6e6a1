"""Clip ingestion and the desk-scale synthetic motion-order dataset.

Clips live in FSEQ files: a little-endian header (magic "FSEQ", version,
u16 L, u8 C, u16 H, u16 W, u8 dtype code) followed by the raw row-major
payload. A CSV manifest with header ``path,label,split`` drives training
and evaluation.
"""

import csv
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError
from .rng import PURPOSE_SYNTH, SeedStream
from .tensor import CODE_DTYPES, DTYPE_CODES, Tensor

_FSEQ_MAGIC = b"FSEQ"
_FSEQ_VERSION = 1
_FSEQ_HEADER = struct.Struct("<4sBHBHHB")

SPLITS = ("train", "validation", "test")


# -- FSEQ binary clip format -----------------------------------------------------


def fseq_to_bytes(tensor):
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if data.ndim != 4:
        raise ParameterError(f"FSEQ stores 4-d clips, got {data.ndim}-d")
    length, c, h, w = data.shape
    if length > 0xFFFF or c > 0xFF or h > 0xFFFF or w > 0xFFFF:
        raise ParameterError(f"clip extents {data.shape} exceed FSEQ header range")
    code = DTYPE_CODES.get(data.dtype)
    if code is None:
        raise ParameterError(f"FSEQ cannot store dtype {data.dtype}")
    header = _FSEQ_HEADER.pack(_FSEQ_MAGIC, _FSEQ_VERSION, length, c, h, w, code)
    return header + np.ascontiguousarray(data).astype(data.dtype.newbyteorder("<")).tobytes()


def fseq_from_bytes(buf):
    if len(buf) < _FSEQ_HEADER.size:
        raise FormatError(
            f"truncated FSEQ header: need {_FSEQ_HEADER.size} bytes, have {len(buf)} (at byte 0)"
        )
    magic, version, length, c, h, w, code = _FSEQ_HEADER.unpack_from(buf, 0)
    if magic != _FSEQ_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0, expected {_FSEQ_MAGIC!r}")
    if version != _FSEQ_VERSION:
        raise FormatError(f"unsupported FSEQ version {version} at byte 4")
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code} at byte 12")
    if min(length, c, h, w) < 1:
        raise FormatError(f"non-positive extent in FSEQ header at byte 5: {(length, c, h, w)}")
    dtype = np.dtype(CODE_DTYPES[code])
    expected = length * c * h * w * dtype.itemsize
    payload = buf[_FSEQ_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(
            f"FSEQ payload is {len(payload)} bytes, header claims {expected} "
            f"(at byte {_FSEQ_HEADER.size})"
        )
    data = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype, copy=True)
    return Tensor(data.reshape(length, c, h, w))


def write_fseq(tensor, path):
    with open(path, "wb") as fh:
        fh.write(fseq_to_bytes(tensor))


def read_fseq(path):
    with open(path, "rb") as fh:
        return fseq_from_bytes(fh.read())


# -- manifest ---------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    split: str


class Manifest:
    """Ordered list of (path, label, split) entries backing a dataset."""

    def __init__(self, entries, base_dir="."):
        seen = set()
        for e in entries:
            if e.path in seen:
                raise FormatError(f"duplicate manifest path {e.path!r}")
            seen.add(e.path)
            if e.label < 0:
                raise FormatError(f"negative label for {e.path!r}")
            if e.split not in SPLITS:
                raise FormatError(f"unknown split {e.split!r} for {e.path!r}")
        self.entries = list(entries)
        self.base_dir = base_dir

    @classmethod
    def read(cls, path, num_classes=None):
        entries = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["path", "label", "split"]:
                raise FormatError(
                    f"manifest header must be 'path,label,split', got {header!r}"
                )
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3:
                    raise FormatError(f"manifest line {lineno} has {len(row)} fields, expected 3")
                p, label_s, split = row
                try:
                    label = int(label_s)
                except ValueError:
                    raise FormatError(f"manifest line {lineno}: label {label_s!r} is not an integer") from None
                if num_classes is not None and not 0 <= label < num_classes:
                    raise FormatError(
                        f"manifest line {lineno}: label {label} outside [0, {num_classes})"
                    )
                entries.append(ManifestEntry(p, label, split))
        return cls(entries, base_dir=os.path.dirname(os.path.abspath(path)))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "label", "split"])
            for e in self.entries:
                writer.writerow([e.path, e.label, e.split])

    def split(self, name):
        if name not in SPLITS:
            raise ParameterError(f"unknown split {name!r}")
        selected = [e for e in self.entries if e.split == name]
        if not selected:
            raise ParameterError(f"manifest has no entries in split {name!r}")
        return selected

    def labels(self, name):
        return [e.label for e in self.split(name)]

    def resolve(self, entry):
        if os.path.isabs(entry.path):
            return entry.path
        return os.path.join(self.base_dir, entry.path)


# -- preprocessing -----------------------------------------------------------------


def temporal_downsample(frames, target):
    """Uniform-stride frame selection; short inputs repeat the last frame.

    Stride is floor(L_in / target) and indices are 0, s, 2s, ... so the
    output frames are an exact subsequence of the input.
    """
    data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    l_in = data.shape[0]
    if l_in < 1 or target < 1:
        raise ParameterError(f"need l_in >= 1 and target >= 1, got {l_in} and {target}")
    if l_in < target:
        indices = list(range(l_in)) + [l_in - 1] * (target - l_in)
    else:
        stride = l_in // target
        indices = [i * stride for i in range(target)]
    out = data[indices].copy()
    return Tensor(out) if isinstance(frames, Tensor) else out


def _bilinear_resize(img, out_h, out_w):
    """Half-pixel-center bilinear resample of [C,H,W]; edges replicate."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0).astype(img.dtype)
    wx = (xs - x0).astype(img.dtype)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = img[:, y0c, :][:, :, x0c] * (1 - wx) + img[:, y0c, :][:, :, x1c] * wx
    bot = img[:, y1c, :][:, :, x0c] * (1 - wx) + img[:, y1c, :][:, :, x1c] * wx
    return top * (1 - wy[:, None]) + bot * wy[:, None]


def spatial_resize_normalize(frame, out_size, mean, std):
    """Bilinear resize of one frame [C,H,W], then per-channel (x-mean)/std.

    Integer pixels are first scaled to [0,1]; float inputs are taken to
    be in [0,1] already.
    """
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if data.ndim != 3:
        raise ParameterError(f"frame must be 3-d, got {data.ndim}-d")
    c = data.shape[0]
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float32), (c,)).copy()
    std = np.broadcast_to(np.asarray(std, dtype=np.float32), (c,)).copy()
    if np.any(std <= 0):
        raise ParameterError(f"std must be positive per channel, got {std.tolist()}")
    if np.issubdtype(data.dtype, np.integer):
        pixels = data.astype(np.float32) / np.float32(np.iinfo(data.dtype).max)
    else:
        pixels = data.astype(np.float32)
    out_h, out_w = out_size
    resized = _bilinear_resize(pixels, out_h, out_w).astype(np.float32)
    normalized = (resized - mean[:, None, None]) / std[:, None, None]
    out = normalized.astype(np.float32)
    return Tensor(out) if isinstance(frame, Tensor) else out


def preprocess_clip(raw, clip_len, frame_size, mean=0.5, std=0.5):
    """Temporal downsample then per-frame resize/normalize to float32."""
    data = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    if data.ndim != 4:
        raise ParameterError(f"raw clip must be 4-d, got {data.ndim}-d")
    frames = temporal_downsample(data, clip_len)
    out = np.stack([spatial_resize_normalize(f, frame_size, mean, std) for f in frames])
    return Tensor(out.astype(np.float32))


# -- class weights and samplers -----------------------------------------------------


def class_weights(counts):
    """w_c = N / (K * n_c); balanced counts give unit weights."""
    counts = [int(c) for c in counts]
    for i, c in enumerate(counts):
        if c < 1:
            raise ParameterError(f"class {i} has count {c}; weights need every count >= 1")
    n = sum(counts)
    k = len(counts)
    return np.array([n / (k * c) for c in counts], dtype=np.float64)


def label_counts(labels, num_classes):
    counts = [0] * num_classes
    for y in labels:
        if not 0 <= y < num_classes:
            raise ParameterError(f"label {y} outside [0, {num_classes})")
        counts[y] += 1
    return counts


def stratified_batches(labels, batch_size, rng):
    """One epoch of index batches with every present class in every batch.

    Classes are drawn in round-robin order with the cursor carried across
    batches; each class pool is a shuffled permutation, reshuffled when
    exhausted, so minority classes repeat within the epoch. Epoch length
    is ceil(N / batch_size) full-size batches.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ParameterError("cannot sample from an empty label list")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    classes = sorted(int(c) for c in np.unique(labels))
    if batch_size < len(classes):
        raise ParameterError(
            f"batch_size {batch_size} cannot cover all {len(classes)} classes per batch"
        )
    gen = rng.generator() if isinstance(rng, SeedStream) else rng
    index_of = {c: np.flatnonzero(labels == c) for c in classes}
    pools = {c: gen.permutation(index_of[c]) for c in classes}
    cursors = {c: 0 for c in classes}
    num_batches = math.ceil(n / batch_size)
    batches = []
    rr = 0
    for _ in range(num_batches):
        batch = []
        for _ in range(batch_size):
            c = classes[rr % len(classes)]
            rr += 1
            if cursors[c] >= len(pools[c]):
                pools[c] = gen.permutation(index_of[c])
                cursors[c] = 0
            batch.append(int(pools[c][cursors[c]]))
            cursors[c] += 1
        batches.append(batch)
    return batches


def uniform_batches(num_items, batch_size, rng):
    """One epoch of uniformly shuffled index batches (last may be short)."""
    if num_items < 1:
        raise ParameterError("cannot sample from an empty dataset")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    gen = rng.generator() if isinstance(rng, SeedStream) else rng
    order = gen.permutation(num_items)
    return [order[i : i + batch_size].tolist() for i in range(0, num_items, batch_size)]


# -- synthetic motion-order dataset ---------------------------------------------------

_DIRECTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right


@dataclass(frozen=True)
class SynthConfig:
    """Bright square gliding over a noisy background; the label is the
    motion direction, so no single frame determines the class.

    ``speed`` is a range in half-pixels per frame: (1, 2) means each clip
    draws 0.5 or 1.0 px/frame. Trajectories stay inside the frame, so the
    whole travel distance must fit next to the largest object.
    """

    counts: tuple
    frame_size: tuple = (32, 32)
    clip_len: int = 16
    object_size: tuple = (10, 14)
    speed: tuple = (1, 2)
    intensity: tuple = (180, 255)
    noise: float = 0.05
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        k = len(self.counts)
        if not 2 <= k <= len(_DIRECTIONS):
            raise ParameterError(f"counts must list 2..{len(_DIRECTIONS)} classes, got {k}")
        if any(c < 0 for c in self.counts):
            raise ParameterError(f"counts must be >= 0, got {self.counts}")
        if sum(1 for c in self.counts if c > 0) < 2:
            raise ParameterError("at least two classes need a nonzero count")
        if self.split not in SPLITS:
            raise ParameterError(f"unknown split {self.split!r}")
        h, w = self.frame_size
        lo, hi = self.object_size
        if lo < 1 or hi < lo:
            raise ParameterError(f"bad object_size range {self.object_size}")
        if hi > min(h, w):
            raise ParameterError(
                f"frame {h}x{w} too small for object size up to {hi}"
            )
        if self.speed[0] < 1 or self.speed[1] < self.speed[0]:
            raise ParameterError(f"bad speed range {self.speed}")
        travel = self.speed[1] * (self.clip_len - 1) // 2
        if hi + travel > min(h, w):
            raise ParameterError(
                f"frame {h}x{w} too small for object size {hi} plus travel {travel}"
            )
        if not 0.0 <= self.noise <= 0.3:
            raise ParameterError(f"noise must be in [0, 0.3], got {self.noise}")
        if self.clip_len < 2:
            raise ParameterError(f"clip_len must be >= 2, got {self.clip_len}")


def _synth_clip(config, label, gen):
    """One clip: a bright square gliding inside a noisy frame, never wrapping.

    The square's color follows its position: channel 0 ramps with the row,
    channel 1 with the column, channel 2 stays at the mid intensity. The
    gliding axis sweeps its ramp monotonically while the other ramp holds
    still, so the four directions differ only in which channel ramps and
    with which sign over time. A single frame shows one position and one
    color, which some trajectory of every class passes through.
    """
    h, w = config.frame_size
    length = config.clip_len
    lo, hi = config.intensity
    noise_max = int(round(config.noise * 255))
    if noise_max > 0:
        frames = gen.integers(0, noise_max + 1, size=(length, 3, h, w), dtype=np.uint8)
    else:
        frames = np.zeros((length, 3, h, w), dtype=np.uint8)
    size = int(gen.integers(config.object_size[0], config.object_size[1] + 1))
    speed = int(gen.integers(config.speed[0], config.speed[1] + 1))
    travel = speed * (length - 1) // 2
    dr, dc = _DIRECTIONS[label]
    band_r = h - size
    band_c = w - size
    if dr > 0 or dc > 0:
        row = int(gen.integers(0, (band_r if dr else band_c) - travel + 1))
    else:
        row = int(gen.integers(travel, (band_r if dr else band_c) + 1))
    moving0, fixed_band = (True, band_c) if dr else (False, band_r)
    col = int(gen.integers(0, fixed_band + 1))
    for t in range(length):
        disp = speed * t // 2
        if moving0:
            top, left = row + dr * disp, col
        else:
            top, left = col, row + dc * disp
        center_r = top + size // 2
        center_c = left + size // 2
        frames[t, 0, top : top + size, left : left + size] = (
            lo + (hi - lo) * center_r // (h - 1)
        )
        frames[t, 1, top : top + size, left : left + size] = (
            lo + (hi - lo) * center_c // (w - 1)
        )
        frames[t, 2, top : top + size, left : left + size] = (lo + hi) // 2
    return frames


def synth_generate(config, out_dir, manifest_path=None, append=False):
    """Write one FSEQ file per clip plus (or into) a manifest CSV.

    A fixed seed regenerates byte-identical files. Returns the manifest
    covering everything written (plus prior entries when appending).
    """
    os.makedirs(out_dir, exist_ok=True)
    if manifest_path is None:
        manifest_path = os.path.join(out_dir, "manifest.csv")
    stream = SeedStream(config.seed, PURPOSE_SYNTH)
    entries = []
    for label, count in enumerate(config.counts):
        for i in range(count):
            gen = stream.generator()
            frames = _synth_clip(config, label, gen)
            name = f"{config.split}_c{label}_{i:04d}.fseq"
            write_fseq(frames, os.path.join(out_dir, name))
            entries.append(ManifestEntry(name, label, config.split))
    if append and os.path.exists(manifest_path):
        prior = Manifest.read(manifest_path).entries
    else:
        prior = []
    manifest = Manifest(prior + entries, base_dir=os.path.abspath(out_dir))
    manifest.write(manifest_path)
    return manifest


# -- dataset loader ----------------------------------------------------------------


@dataclass
class ClipRecord:
    tensor: Tensor
    label: int
    source_id: str


class ClipDataset:
    """Loads, preprocesses, and caches the clips of one manifest split.

    Every disk read is appended to ``access_log`` so a run can prove
    which files it touched.
    """

    def __init__(self, manifest, split, clip_len, frame_size, mean=0.5, std=0.5, cache=True):
        self.manifest = manifest
        self.entries = manifest.split(split)
        self.clip_len = clip_len
        self.frame_size = tuple(frame_size)
        self.mean = mean
        self.std = std
        self.cache = cache
        self.access_log = []
        self._cached = {}

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self):
        return [e.label for e in self.entries]

    def load(self, index):
        entry = self.entries[index]
        if index in self._cached:
            tensor = self._cached[index]
        else:
            path = self.manifest.resolve(entry)
            raw = read_fseq(path)
            self.access_log.append(path)
            tensor = preprocess_clip(raw, self.clip_len, self.frame_size, self.mean, self.std)
            if self.cache:
                self._cached[index] = tensor
        return ClipRecord(tensor=tensor, label=entry.label, source_id=entry.path)

    def batch(self, indices):
        """Stack clips into [B,L,C,H,W] plus the label vector."""
        records = [self.load(i) for i in indices]
        clips = np.stack([r.tensor.data for r in records])
        labels = np.array([r.label for r in records], dtype=np.int64)
        return Tensor(clips), labels
