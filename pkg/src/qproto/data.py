"""Synthetic few-shot dataset: generation, on-disk format, loading.

Each class is a motif (shape + color + stripe texture) rendered over a
noise background at a position and scale that vary per sample, so the
discriminative region of two samples of one class rarely lands on the
same grid cells or at the same size. Splits use disjoint motif
combinations.

On disk a dataset is a directory with a plain-text manifest plus one raw
tensor file per class:

    manifest.txt        line-oriented, space-separated (grammar in README)
    <split>/clsNNN.bin  32-byte header + float64 little-endian payload

The 32-byte header is: 8-byte magic ``QPDS0001``, four uint32 LE fields
(count, channels, height, width), 8 zero pad bytes.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, DatasetError, ValidationError

MAGIC = b"QPDS0001"
HEADER = struct.Struct("<8s4I8x")   # 32 bytes
MANIFEST_FORMAT = "qproto-dataset"
MANIFEST_VERSION = 1

SHAPES = ("rectangle", "ellipse", "cross", "ring")
PALETTE = (
    ("red", (1.0, 0.15, 0.15)),
    ("green", (0.15, 1.0, 0.15)),
    ("blue", (0.2, 0.35, 1.0)),
    ("yellow", (1.0, 1.0, 0.2)),
    ("magenta", (1.0, 0.2, 1.0)),
    ("cyan", (0.2, 1.0, 1.0)),
)
FREQS = (2, 3, 4, 5)

ENV_DATA_ROOT = "QPROTO_DATA_ROOT"


@dataclass
class MotifSpec:
    shape: str
    color_name: str
    color: tuple
    freq: int


@dataclass
class SyntheticSpec:
    """Generation parameters; the dataset is a pure function of these."""
    classes_train: int = 12
    classes_val: int = 6
    classes_test: int = 6
    samples_per_class: int = 40
    image_size: int = 32
    channels: int = 3
    noise_level: float = 0.30
    jitter: float = 1.0          # 0 pins position and scale, 1 full range
    scale_min: float = 0.30      # motif size as a fraction of the image
    scale_max: float = 0.80
    seed: int = 7

    def __post_init__(self):
        if not (0.1 < self.scale_min < self.scale_max < 0.9):
            raise ConfigError(
                f"motif scale range ({self.scale_min}, {self.scale_max}) "
                "must lie strictly inside (0.1, 0.9)")
        if not 0.0 <= self.jitter <= 1.0:
            raise ConfigError(f"jitter must be in [0, 1], got {self.jitter}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError(f"noise_level must be in [0, 1], got {self.noise_level}")
        if self.channels != 3:
            raise ConfigError("synthetic motifs are rendered in 3 channels")
        if min(self.classes_train, self.classes_val, self.classes_test) < 1:
            raise ConfigError("every split needs at least one class")
        total = self.classes_train + self.classes_val + self.classes_test
        if total > len(SHAPES) * len(PALETTE) * len(FREQS):
            raise ConfigError(f"{total} classes exceed the distinct motif combinations")

    @property
    def split_sizes(self):
        return {"train": self.classes_train, "val": self.classes_val,
                "test": self.classes_test}


@dataclass
class Split:
    tag: str
    class_ids: list
    class_names: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)   # class_id -> (n, c, s, s)

    @property
    def n_classes(self):
        return len(self.class_ids)


@dataclass
class DatasetBundle:
    splits: dict
    root: str = ""

    def split(self, tag):
        if tag not in self.splits:
            raise DatasetError(f"dataset has no split {tag!r} (have {sorted(self.splits)})")
        return self.splits[tag]


def assign_motifs(spec):
    """Deterministically pick pairwise-distinct motifs and split them."""
    combos = [MotifSpec(shape=s, color_name=cn, color=c, freq=f)
              for s in SHAPES for (cn, c) in PALETTE for f in FREQS]
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xA551)))
    order = rng.permutation(len(combos))
    assignment = {}
    cid = 0
    for tag in ("train", "val", "test"):
        take = spec.split_sizes[tag]
        chosen = [combos[i] for i in order[cid:cid + take]]
        assignment[tag] = {cid + j: m for j, m in enumerate(chosen)}
        cid += take
    return assignment


def _motif_mask(shape, yy, xx, half):
    if shape == "rectangle":
        return (np.abs(yy) <= half * 0.8) & (np.abs(xx) <= half)
    if shape == "ellipse":
        return (yy / (half * 0.75)) ** 2 + (xx / half) ** 2 <= 1.0
    if shape == "cross":
        arm = half / 3.0
        return ((np.abs(yy) <= arm) & (np.abs(xx) <= half)) | \
               ((np.abs(xx) <= arm) & (np.abs(yy) <= half))
    if shape == "ring":
        r = np.sqrt(yy * yy + xx * xx)
        return (r <= half) & (r >= half * 0.55)
    raise ConfigError(f"unknown motif shape {shape!r}")


def render_sample(motif, spec, rng):
    """One (3, s, s) image in [0, 1]: noise background plus the motif at a
    jittered position and scale, striped at the class frequency."""
    s = spec.image_size
    img = spec.noise_level * rng.random((spec.channels, s, s))

    mid = 0.5 * (spec.scale_min + spec.scale_max)
    halfspan = 0.5 * (spec.scale_max - spec.scale_min) * spec.jitter
    scale = mid + rng.uniform(-halfspan, halfspan)
    half = 0.5 * scale * s

    center = 0.5 * (s - 1)
    max_off = max(0.0, center - half) * spec.jitter
    cy = center + rng.uniform(-max_off, max_off)
    cx = center + rng.uniform(-max_off, max_off)

    yy, xx = np.mgrid[0:s, 0:s]
    yy = yy - cy
    xx = xx - cx
    mask = _motif_mask(motif.shape, yy, xx, half)
    # stripes ride with the motif and scale with it, so the pattern is a
    # class property rather than an absolute-position artifact
    phase = xx if motif.freq % 2 == 0 else yy
    tex = 0.5 + 0.5 * np.sin(np.pi * motif.freq * phase / max(half, 1e-9))
    for ch in range(spec.channels):
        channel = img[ch]
        channel[mask] = motif.color[ch] * (0.35 + 0.65 * tex[mask])
    return np.clip(img, 0.0, 1.0)


def synthesize(spec):
    """Generate all splits in memory; bit-identical for equal specs."""
    assignment = assign_motifs(spec)
    splits = {}
    for tag in ("train", "val", "test"):
        motifs = assignment[tag]
        split = Split(tag=tag, class_ids=sorted(motifs))
        for cid in split.class_ids:
            m = motifs[cid]
            rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 1, cid)))
            stack = np.stack([render_sample(m, spec, rng)
                              for _ in range(spec.samples_per_class)])
            split.samples[cid] = stack
            split.class_names[cid] = f"c{cid:03d}_{m.shape}_{m.color_name}_f{m.freq}"
        splits[tag] = split
    return DatasetBundle(splits=splits)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def resolve_root(path):
    """Honor the dataset-root override environment variable."""
    return os.environ.get(ENV_DATA_ROOT, path)


def _class_file_bytes(stack):
    n, c, h, w = stack.shape
    header = HEADER.pack(MAGIC, n, c, h, w)
    payload = np.ascontiguousarray(stack, dtype="<f8").tobytes()
    return header + payload


def write_dataset(bundle, root):
    """Write manifest + per-class tensor files under ``root``."""
    os.makedirs(root, exist_ok=True)
    lines = [f"format {MANIFEST_FORMAT} {MANIFEST_VERSION}"]
    any_split = next(iter(bundle.splits.values()))
    any_stack = next(iter(any_split.samples.values()))
    _, c, h, w = any_stack.shape
    lines.append(f"channels {c}")
    lines.append(f"image_size {h}")
    for tag in sorted(bundle.splits):
        split = bundle.splits[tag]
        os.makedirs(os.path.join(root, tag), exist_ok=True)
        for cid in split.class_ids:
            stack = split.samples[cid]
            if not np.all(np.isfinite(stack)):
                raise DataFormatError(f"class {cid}: non-finite sample values")
            if stack.min() < 0.0 or stack.max() > 1.0:
                raise DataFormatError(f"class {cid}: sample values outside [0, 1]")
            rel = f"{tag}/cls{cid:03d}.bin"
            blob = _class_file_bytes(stack)
            with open(os.path.join(root, rel), "wb") as f:
                f.write(blob)
            digest = hashlib.sha256(blob).hexdigest()
            lines.append(f"class {cid} {tag} {split.class_names[cid]} "
                         f"{stack.shape[0]} {rel} {digest}")
    with open(os.path.join(root, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    bundle.root = root
    return bundle


def gen_synthetic(spec, out_path):
    """Generate and persist the dataset; returns the bundle."""
    return write_dataset(synthesize(spec), out_path)


def _read_class_file(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < HEADER.size:
        raise DataFormatError(f"{path}: truncated header", offset=len(blob))
    magic, n, c, h, w = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}", offset=0)
    expected = HEADER.size + n * c * h * w * 8
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: payload length {len(blob)} != expected {expected}",
            offset=min(len(blob), expected))
    data = np.frombuffer(blob, dtype="<f8", offset=HEADER.size).reshape(n, c, h, w)
    return np.ascontiguousarray(data), blob


def load_dataset(path):
    """Load every split under ``path``, validating checksums, shapes,
    finiteness and split disjointness."""
    root = resolve_root(path)
    manifest_path = os.path.join(root, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise DataFormatError(f"no manifest at {manifest_path}")
    splits = {}
    seen = {}
    shape_ref = None
    with open(manifest_path) as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "format":
                if parts[1] != MANIFEST_FORMAT or int(parts[2]) != MANIFEST_VERSION:
                    raise DataFormatError(
                        f"manifest line {ln}: unsupported format {parts[1:]}")
            elif parts[0] in ("channels", "image_size"):
                continue
            elif parts[0] == "class":
                cid, tag, name, count, rel, digest = (
                    int(parts[1]), parts[2], parts[3], int(parts[4]), parts[5], parts[6])
                if cid in seen:
                    raise ValidationError(
                        f"class {cid} ({name}) appears in splits "
                        f"{seen[cid]!r} and {tag!r}")
                seen[cid] = tag
                data, blob = _read_class_file(os.path.join(root, rel))
                actual = hashlib.sha256(blob).hexdigest()
                if actual != digest:
                    raise DataFormatError(
                        f"{rel}: checksum mismatch", offset=HEADER.size)
                if data.shape[0] != count:
                    raise DataFormatError(
                        f"{rel}: manifest count {count} != header count {data.shape[0]}")
                if not np.all(np.isfinite(data)):
                    raise DataFormatError(f"{rel}: non-finite values")
                if shape_ref is None:
                    shape_ref = data.shape[1:]
                elif data.shape[1:] != shape_ref:
                    raise ValidationError(
                        f"{rel}: sample shape {data.shape[1:]} != {shape_ref}")
                split = splits.setdefault(tag, Split(tag=tag, class_ids=[]))
                split.class_ids.append(cid)
                split.class_names[cid] = name
                split.samples[cid] = data
            else:
                raise DataFormatError(f"manifest line {ln}: unknown directive {parts[0]!r}")
    if not splits:
        raise DataFormatError(f"{manifest_path}: no classes listed")
    return DatasetBundle(splits=splits, root=root)
