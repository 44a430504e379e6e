"""Dataset ingestion, deterministic splitting, synthetic data, and weight files.

Three file formats live here:

* the dataset manifest, a line-oriented text file (one ``path<TAB>label<TAB>
  split`` row per image) with a small key:value header,
* the BTWF weight container, a little-endian binary holding named tensors in
  float32 or int8 (with per-channel scales) plus a trailing CRC32,
* plain ``key=value`` config text used by run directories and ``--config``.

The synthetic generator draws one bright shape per image on a dark noisy
background.  Class identity controls the shape family and its radius and
intensity ranges, and the exact foreground mask is saved next to every image
so localization quality can be scored against ground truth.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path, PurePosixPath

import numpy as np
from PIL import Image, UnidentifiedImageError

from .util import rng_for

__all__ = [
    "DatasetManifest",
    "ManifestEntry",
    "SynthSpec",
    "TensorRecord",
    "ingest",
    "load_image",
    "load_manifest",
    "load_state_into",
    "mask_path_for",
    "read_config_text",
    "read_weight_records",
    "save_image",
    "save_manifest",
    "serialize_weight_records",
    "split",
    "synth_generate",
    "write_config_text",
    "write_weight_records",
    "write_weights",
]

SPLITS = ("train", "val", "test")
UNSPLIT = "-"

# stream tags for rng_for: 40 = split shuffling, 50 = synthetic images
_SPLIT_STREAM = 40
_SYNTH_STREAM = 50


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str  # POSIX-style, relative to the manifest's directory
    label: int
    split: str = UNSPLIT


@dataclass(frozen=True)
class DatasetManifest:
    classes: tuple[str, ...]
    entries: tuple[ManifestEntry, ...]
    seed: int | None = None
    skipped: tuple[str, ...] = ()

    def class_counts(self) -> list[int]:
        counts = [0] * len(self.classes)
        for e in self.entries:
            counts[e.label] += 1
        return counts

    def split_entries(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [e for e in self.entries if e.split == name]

    def split_counts(self) -> dict[str, int]:
        return {name: len(self.split_entries(name)) for name in SPLITS}


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    lines = ["format: manifest v1"]
    lines.append(f"seed: {'-' if manifest.seed is None else manifest.seed}")
    lines.append("classes:\t" + "\t".join(manifest.classes))
    for skipped in manifest.skipped:
        lines.append(f"skipped:\t{skipped}")
    for e in manifest.entries:
        lines.append(f"{e.path}\t{e.label}\t{e.split}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "format: manifest v1":
        raise ValueError(f"{path} is not a manifest file")
    seed_text = lines[1].split(":", 1)[1].strip()
    seed = None if seed_text == "-" else int(seed_text)
    class_line = lines[2].split("\t")
    if not class_line[0].startswith("classes:"):
        raise ValueError(f"{path}: malformed class header")
    classes = tuple(class_line[1:])
    skipped: list[str] = []
    entries: list[ManifestEntry] = []
    for line in lines[3:]:
        if not line.strip():
            continue
        if line.startswith("skipped:\t"):
            skipped.append(line.split("\t", 1)[1])
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}: malformed entry line {line!r}")
        rel, label, sp = parts
        label = int(label)
        if not 0 <= label < len(classes):
            raise ValueError(f"{path}: label {label} out of range")
        if sp not in SPLITS and sp != UNSPLIT:
            raise ValueError(f"{path}: unknown split {sp!r}")
        entries.append(ManifestEntry(rel, label, sp))
    return DatasetManifest(classes=classes, entries=tuple(entries),
                           seed=seed, skipped=tuple(skipped))


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Decode to uint8, grayscale (h, w) or color (h, w, 3)."""
    with Image.open(path) as im:
        if im.mode == "L":
            return np.asarray(im, dtype=np.uint8)
        if im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8)


def save_image(path, arr: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"image arrays must be uint8, got {arr.dtype}")
    Image.fromarray(arr).save(path, format="PNG")
    return path


def ingest(root) -> DatasetManifest:
    """Scan a class-per-subdirectory image tree into an unsplit manifest.

    Class indices follow the lexicographic order of the subdirectory names,
    so a reshuffled directory listing cannot change labels.  Files that do
    not decode as images are recorded under ``skipped`` rather than failing
    the whole scan.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root} contains no class subdirectories")
    for d in class_dirs:
        if "\t" in d.name or "\n" in d.name:
            raise ValueError(f"class directory name {d.name!r} contains tab or newline")
    classes = tuple(d.name for d in class_dirs)
    entries: list[ManifestEntry] = []
    skipped: list[str] = []
    for label, d in enumerate(class_dirs):
        for f in sorted(p for p in d.iterdir() if p.is_file()):
            if f.name.startswith("."):
                continue
            rel = str(PurePosixPath(d.name) / f.name)
            try:
                with Image.open(f) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError, SyntaxError):
                skipped.append(rel)
                continue
            entries.append(ManifestEntry(rel, label))
    if not entries:
        raise ValueError(f"{root} contains no decodable images")
    return DatasetManifest(classes=classes, entries=tuple(entries),
                           skipped=tuple(skipped))


def split(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Assign stratified train/val/test splits: per class, a seeded shuffle
    takes the first floor(0.7n) entries for train, the next floor(0.1n) for
    val, and the remainder for test."""
    new_split = [UNSPLIT] * len(manifest.entries)
    for label in range(len(manifest.classes)):
        idxs = [i for i, e in enumerate(manifest.entries) if e.label == label]
        n = len(idxs)
        if n == 0:
            continue
        perm = rng_for(seed, _SPLIT_STREAM, label).permutation(n)
        n_train = 7 * n // 10
        n_val = n // 10
        for rank, j in enumerate(perm):
            if rank < n_train:
                sp = "train"
            elif rank < n_train + n_val:
                sp = "val"
            else:
                sp = "test"
            new_split[idxs[j]] = sp
    entries = tuple(replace(e, split=sp) for e, sp in zip(manifest.entries, new_split))
    return replace(manifest, entries=entries, seed=seed)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Three shape families (disc, ring, square) with per-class geometry.

    ``radius_fracs`` are fractions of the short image side.  The defaults
    keep the foreground areas of all classes inside one overlapping band, so
    the class evidence is the disjoint intensity range (plus the outline)
    rather than blob size; saliency maps then have to point at the blob
    itself.  Pass disjoint radius bands instead to get classes separable by
    area alone.  ``noise`` is the background noise sigma in intensity
    levels."""

    n_images: int = 600
    image_size: int = 64
    class_names: tuple[str, ...] = ("disc", "ring", "square")
    radius_fracs: tuple[tuple[float, float], ...] = (
        (0.28, 0.35), (0.32, 0.41), (0.28, 0.34))
    intensity_ranges: tuple[tuple[int, int], ...] = (
        (130, 170), (170, 210), (210, 250))
    noise: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.n_images < len(self.class_names):
            raise ValueError("need at least one image per class")
        if self.image_size < 16:
            raise ValueError("image size too small for shape drawing")
        if not (len(self.class_names) == len(self.radius_fracs)
                == len(self.intensity_ranges)):
            raise ValueError("per-class range tuples must match class count")
        for lo, hi in self.radius_fracs:
            if not 0.0 < lo <= hi:
                raise ValueError("radius fractions must satisfy 0 < lo <= hi")
            # centers are sampled r + 2 px away from every border
            if hi * self.image_size + 2.0 >= self.image_size / 2.0:
                raise ValueError("blob radius range does not fit inside the image")


def _draw_shape(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    if kind == "disc":
        return (rr - cy) ** 2 + (cc - cx) ** 2 <= r * r
    if kind == "ring":
        d2 = (rr - cy) ** 2 + (cc - cx) ** 2
        return (d2 <= r * r) & (d2 > (0.5 * r) ** 2)
    if kind == "square":
        return (np.abs(rr - cy) <= r) & (np.abs(cc - cx) <= r)
    raise ValueError(f"unknown shape kind {kind!r}")


_SHAPE_CYCLE = ("disc", "ring", "square")


def synth_image(spec: SynthSpec, label: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair; every image draws from its own seeded stream."""
    rng = rng_for(spec.seed, _SYNTH_STREAM, label, index)
    size = spec.image_size
    lo, hi = spec.radius_fracs[label]
    r = rng.uniform(lo, hi) * size
    margin = r + 2.0
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    intensity = float(rng.integers(*spec.intensity_ranges[label], endpoint=True))
    kind = _SHAPE_CYCLE[label % len(_SHAPE_CYCLE)]
    mask = _draw_shape(kind, size, cy, cx, r)
    img = 30.0 + spec.noise * rng.standard_normal((size, size))
    img[mask] = intensity + 0.25 * spec.noise * rng.standard_normal(int(mask.sum()))
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img, (mask.astype(np.uint8) * 255)


def mask_path_for(image_path) -> Path:
    """masks/ mirror of an images/ tree path."""
    p = Path(image_path)
    parts = list(p.parts)
    for i in range(len(parts) - 1, -1, -1):
        if parts[i] == "images":
            parts[i] = "masks"
            return Path(*parts)
    raise ValueError(f"{image_path} is not under an images/ directory")


def synth_generate(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write the image tree, the mask tree, and a split manifest.

    Images land in ``out/images/<class>/``, the aligned foreground masks in
    ``out/masks/<class>/``, and the manifest (split with ``spec.seed``) at
    ``out/manifest.txt``.  Image count is divided evenly across classes with
    any remainder going to the lowest class indices.
    """
    out = Path(out_dir)
    k = len(spec.class_names)
    base, extra = divmod(spec.n_images, k)
    entries: list[ManifestEntry] = []
    for label, name in enumerate(spec.class_names):
        count = base + (1 if label < extra else 0)
        for i in range(count):
            img, mask = synth_image(spec, label, i)
            rel = str(PurePosixPath("images") / name / f"{name}_{i:04d}.png")
            save_image(out / rel, img)
            save_image(mask_path_for(out / rel), mask)
            entries.append(ManifestEntry(rel, label))
    manifest = DatasetManifest(classes=tuple(spec.class_names),
                               entries=tuple(entries))
    manifest = split(manifest, spec.seed)
    save_manifest(manifest, out / "manifest.txt")
    return manifest


def load_split_arrays(manifest: DatasetManifest, root, split_name: str,
                      loader=load_image) -> tuple[list[np.ndarray], np.ndarray]:
    """Decode one split's images (list, sizes may vary) plus the label vector."""
    root = Path(root)
    entries = manifest.split_entries(split_name)
    images = [loader(root / e.path) for e in entries]
    labels = np.array([e.label for e in entries], dtype=np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# weight container (BTWF)
# ---------------------------------------------------------------------------

_MAGIC = b"BTWF"
_VERSION = 1
_DTYPE_CODES = {0: np.float32, 1: np.int8}


@dataclass(frozen=True)
class TensorRecord:
    """One named tensor: raw float32, or int8 with dequantization scales.

    ``axis`` is the broadcast axis for ``scale`` (-1 means one scale for the
    whole tensor); it is only meaningful for int8 records.
    """

    name: str
    values: np.ndarray
    scale: np.ndarray | None = None
    axis: int = -1

    def dequantize(self) -> np.ndarray:
        if self.values.dtype != np.int8:
            return self.values.astype(np.float32, copy=False)
        if self.scale is None:
            raise ValueError(f"int8 record {self.name!r} has no scales")
        out = self.values.astype(np.float32)
        if self.axis < 0:
            return out * np.float32(self.scale[0])
        shape = [1] * out.ndim
        shape[self.axis] = self.scale.size
        return out * self.scale.reshape(shape).astype(np.float32)


def _record_bytes(rec: TensorRecord) -> bytes:
    name = rec.name.encode("utf-8")
    # asarray keeps 0-d tensors 0-d where ascontiguousarray would promote them
    values = np.asarray(rec.values, order="C")
    if values.dtype == np.float32:
        code, payload = 0, values.astype("<f4", copy=False).tobytes()
        scales = b""
        n_scales = 0
    elif values.dtype == np.int8:
        code, payload = 1, values.tobytes()
        if rec.scale is None:
            raise ValueError(f"int8 record {rec.name!r} requires scales")
        scale = np.ascontiguousarray(rec.scale, dtype="<f4")
        n_scales = scale.size
        scales = struct.pack("<b", rec.axis) + scale.tobytes()
    else:
        raise ValueError(f"unsupported dtype {values.dtype} for {rec.name!r}")
    head = struct.pack("<H", len(name)) + name
    head += struct.pack("<BB", code, values.ndim)
    head += struct.pack(f"<{values.ndim}I", *values.shape)
    head += struct.pack("<I", n_scales)
    return head + scales + payload


def serialize_weight_records(records: list[TensorRecord]) -> bytes:
    names = [r.name for r in records]
    if len(set(names)) != len(names):
        raise ValueError("tensor names must be unique")
    parts = [_MAGIC + struct.pack("<II", _VERSION, len(records))]
    parts += [_record_bytes(rec) for rec in records]
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob))


def write_weight_records(path, records: list[TensorRecord]) -> int:
    """Serialize records to a BTWF file; returns the byte count written."""
    blob = serialize_weight_records(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes, label: str):
        self.blob = blob
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError(f"{self.label}: truncated weight file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_weight_records(path) -> list[TensorRecord]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(_MAGIC) + 12:
        raise ValueError(f"{path}: truncated weight file")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4])
    if stored_crc != actual_crc:
        raise ValueError(f"{path}: checksum mismatch; file is corrupt or truncated")
    r = _Reader(blob[:-4], str(path))
    if r.take(4) != _MAGIC:
        raise ValueError(f"{path}: not a weight container (bad magic)")
    version, n_records = r.unpack("<II")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported weight format version {version}")
    records: list[TensorRecord] = []
    seen: set[str] = set()
    for _ in range(n_records):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        if name in seen:
            raise ValueError(f"{path}: duplicate tensor name {name!r}")
        seen.add(name)
        code, rank = r.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise ValueError(f"{path}: unknown dtype code {code} for {name!r}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        (n_scales,) = r.unpack("<I")
        scale, axis = None, -1
        if n_scales:
            (axis,) = r.unpack("<b")
            scale = np.frombuffer(r.take(4 * n_scales), dtype="<f4").astype(np.float32)
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(count * np.dtype(dtype).itemsize)
        values = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<"))
        values = values.astype(dtype).reshape(dims)
        records.append(TensorRecord(name=name, values=values, scale=scale, axis=axis))
    if r.pos != len(r.blob):
        raise ValueError(f"{path}: trailing bytes after the last record")
    return records


def write_weights(path, module) -> int:
    """Snapshot a network's parameters and buffers as float32 records."""
    records = [TensorRecord(name, np.asarray(arr, dtype=np.float32))
               for name, arr in sorted(module.state_dict().items())]
    return write_weight_records(path, records)


def load_state_into(path, module) -> None:
    """Read a weight file (dequantizing int8 records) into a network."""
    state = {rec.name: rec.dequantize() for rec in read_weight_records(path)}
    module.load_state(state)


# ---------------------------------------------------------------------------
# key=value config text
# ---------------------------------------------------------------------------

def write_config_text(path, values: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={values[key]}" for key in values]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_config_text(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed config line {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
