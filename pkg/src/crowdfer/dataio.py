"""Dataset CSV ingest, synthetic data, checkpoints and metrics files.

Dataset CSV layout::

    # size=48x48            <- optional; default 48x48
    usage,pixels,neutral,happiness,...,contempt[,unknown,NF]
    Training,0 12 255 ...,7,1,2,0,0,0,0,0

``usage`` is one of Training / PublicTest / PrivateTest (or train /
validation / test). ``pixels`` holds W*H space-separated integers in
[0, 255], row-major. Vote columns are matched by emotion name; any other
column is ignored.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (CheckpointError, CheckpointShapeError, CheckpointTruncatedError,
                     CheckpointVersionError, DatasetFormatError)
from .labels import DEFAULT_OUTLIER_THRESHOLD, EmotionSet, normalize_batch, reject_outliers_batch
from .quality import TaggerNoiseModel, synth_votes, tags_to_counts
from .tensornet import LayerSpec, Model

log = logging.getLogger(__name__)

SPLIT_TOKENS = {
    "Training": "train", "PublicTest": "validation", "PrivateTest": "test",
    "train": "train", "validation": "validation", "test": "test",
}
SPLIT_NAMES = {"train": "Training", "validation": "PublicTest", "test": "PrivateTest"}
DEFAULT_SOURCE_SIZE = (48, 48)


@dataclass
class DatasetItem:
    image: np.ndarray
    votes: np.ndarray
    dist: np.ndarray
    split: str


@dataclass
class Dataset:
    """Column-oriented dataset; images are (N, H, W) floats in [0, 1]."""

    images: np.ndarray
    votes: np.ndarray  # cleaned counts the distributions come from
    dist: np.ndarray
    split: np.ndarray
    emotion_set: EmotionSet = field(default_factory=EmotionSet)
    raw_votes: Optional[np.ndarray] = None
    tags: Optional[np.ndarray] = None  # per-tagger labels, when known

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> DatasetItem:
        return DatasetItem(self.images[i], self.votes[i], self.dist[i], str(self.split[i]))

    def subset(self, idx) -> "Dataset":
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.images[idx], self.votes[idx], self.dist[idx], self.split[idx],
                       self.emotion_set, pick(self.raw_votes), pick(self.tags))

    def select(self, split: str) -> "Dataset":
        return self.subset(np.flatnonzero(self.split == split))

    @property
    def majority(self) -> np.ndarray:
        return np.argmax(self.dist, axis=1)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.images, self.votes, self.dist):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update("\n".join(self.split.tolist()).encode())
        return h.hexdigest()


# -- images ----------------------------------------------------------------

def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize with edge clamping."""
    h, w = image.shape
    if (h, w) == (size, size):
        return image.astype(np.float64, copy=True)

    def axis_weights(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(pos).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis_weights(h, size)
    x0, x1, fx = axis_weights(w, size)
    img = image.astype(np.float64)
    rows = img[y0] * (1 - fy)[:, None] + img[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


# -- CSV ingest ------------------------------------------------------------

def _parse_size(text: str):
    w, h = text.lower().split("x")
    return int(w), int(h)


def load_dataset(path, emotion_set: EmotionSet = EmotionSet(), image_size: Optional[int] = 64,
                 outlier_threshold: int = DEFAULT_OUTLIER_THRESHOLD, keep_unusable: bool = False,
                 source_size: Optional[tuple] = None) -> Dataset:
    """Parse a dataset CSV, resize images, and build cleaned label distributions.

    Items whose votes are all rejected are dropped, or kept with their raw
    counts when ``keep_unusable`` is set.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    size = source_size
    first = 0
    while first < len(lines) and lines[first].startswith("#"):
        meta = lines[first].lstrip("#").strip()
        for token in meta.split():
            if token.startswith("size="):
                if size is None:
                    size = _parse_size(token[5:])
        first += 1
    size = size or DEFAULT_SOURCE_SIZE
    if first >= len(lines):
        raise DatasetFormatError(first + 1, "missing header row")

    reader = csv.reader(lines[first:])
    header = [h.strip() for h in next(reader)]
    header_line = first + 1
    for col in ("usage", "pixels"):
        if col not in header:
            raise DatasetFormatError(header_line, f"header lacks required column {col!r}")
    missing = [e for e in emotion_set.names if e not in header]
    if missing:
        raise DatasetFormatError(header_line, f"header lacks vote columns {missing}")
    i_usage, i_pix = header.index("usage"), header.index("pixels")
    vote_cols = [header.index(e) for e in emotion_set.names]
    ignored = [h for h in header if h not in ("usage", "pixels") and h not in emotion_set.names]
    if ignored:
        log.info("ignoring %d non-emotion columns: %s", len(ignored), ", ".join(ignored))

    w, h = size
    images, votes, splits, extra_votes = [], [], [], 0
    ignored_idx = [header.index(c) for c in ignored]
    for offset, row in enumerate(reader):
        line = header_line + 1 + offset
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetFormatError(line, f"expected {len(header)} fields, got {len(row)}")
        token = row[i_usage].strip()
        if token not in SPLIT_TOKENS:
            raise DatasetFormatError(line, f"unknown split token {token!r}")
        try:
            pix = np.array(row[i_pix].split(), dtype=np.int64)
            v = np.array([int(row[c]) for c in vote_cols], dtype=np.int64)
        except ValueError as exc:
            raise DatasetFormatError(line, f"non-integer value ({exc})") from None
        if pix.size != w * h:
            raise DatasetFormatError(line, f"{pix.size} pixels but declared size is {w}x{h}")
        if pix.min() < 0 or pix.max() > 255:
            raise DatasetFormatError(line, "pixel values must lie in [0, 255]")
        if v.min() < 0:
            raise DatasetFormatError(line, "vote counts must be non-negative")
        for c in ignored_idx:
            try:
                extra_votes += int(row[c] or 0)
            except ValueError:
                pass
        images.append(pix.reshape(h, w))
        votes.append(v)
        splits.append(SPLIT_TOKENS[token])
    if not images:
        raise DatasetFormatError(header_line, "no data rows")
    if extra_votes:
        log.info("dropped %d votes in non-emotion columns", extra_votes)

    raw = np.stack(votes)
    cleaned = reject_outliers_batch(raw, outlier_threshold)
    usable = cleaned.sum(axis=1) > 0
    if keep_unusable:
        cleaned = np.where(usable[:, None], cleaned, raw)
        usable = cleaned.sum(axis=1) > 0
    n_drop = int((~usable).sum())
    if n_drop:
        log.info("dropped %d items with no votes left after outlier rejection", n_drop)
    keep = np.flatnonzero(usable)

    target = image_size or h
    imgs = np.stack([resize_bilinear(images[i] / 255.0, target) for i in keep]) if (h, w) != (target, target) \
        else np.stack([images[i] for i in keep]) / 255.0
    return Dataset(imgs, cleaned[keep], normalize_batch(cleaned[keep]), np.array(splits)[keep],
                   emotion_set, raw_votes=raw[keep])


def write_dataset_csv(path, images: np.ndarray, votes: np.ndarray, splits, emotion_set: EmotionSet = EmotionSet()):
    """Write uint8-range images and vote counts in the ingest layout."""
    images = np.asarray(images)
    n, h, w = images.shape
    pix = np.clip(np.rint(images), 0, 255).astype(np.int64)
    buf = io.StringIO()
    buf.write(f"# size={w}x{h}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["usage", "pixels", *emotion_set.names])
    for i in range(n):
        writer.writerow([SPLIT_NAMES[str(splits[i])], " ".join(map(str, pix[i].ravel())),
                         *map(int, votes[i])])
    _atomic_write(Path(path), buf.getvalue().encode())


# -- synthetic data --------------------------------------------------------

def pattern_images(labels, size: int, rng: np.random.Generator, K: int = 8,
                   noise_sd: float = 30.0) -> np.ndarray:
    """Oriented gratings, one orientation per class, random phase and contrast.

    Returns (N, size, size) floats in the 0..255 pixel range.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.pi * labels / K
    freq = 2.5 / size  # cycles per pixel
    phase = rng.uniform(0, 2 * np.pi, n)
    contrast = rng.uniform(60.0, 110.0, n)
    arg = 2 * np.pi * freq * (np.cos(theta)[:, None, None] * xs + np.sin(theta)[:, None, None] * ys)
    img = 128.0 + contrast[:, None, None] * np.sin(arg + phase[:, None, None])
    img += rng.normal(0.0, noise_sd, img.shape)
    return np.clip(np.rint(img), 0, 255)


def make_synthetic_dataset(n_items: int = 2000, size: int = 16, K: int = 8, noise: float = 0.2,
                           T: int = 10, seed: int = 0, split_fractions=(0.7, 0.1, 0.2),
                           outlier_threshold: int = DEFAULT_OUTLIER_THRESHOLD,
                           pixel_noise: float = 30.0) -> Dataset:
    """Class-patterned images tagged by T synthetic taggers with symmetric noise."""
    ss = np.random.SeedSequence(seed)
    r_label, r_img, r_tag, r_split = (np.random.default_rng(s) for s in ss.spawn(4))
    truth = r_label.integers(0, K, n_items)
    images = pattern_images(truth, size, r_img, K, pixel_noise)
    emotion_set = EmotionSet() if K == 8 else EmotionSet(tuple(f"class{k}" for k in range(K)))
    tags = synth_votes(truth, TaggerNoiseModel.symmetric(K, noise), T, r_tag)
    raw = tags_to_counts(tags, K)
    cleaned = reject_outliers_batch(raw, outlier_threshold)
    cleaned = np.where(cleaned.sum(axis=1, keepdims=True) > 0, cleaned, raw)
    n_train = int(round(split_fractions[0] * n_items))
    n_val = int(round(split_fractions[1] * n_items))
    split = np.array(["train"] * n_train + ["validation"] * n_val + ["test"] * (n_items - n_train - n_val))
    split = split[r_split.permutation(n_items)]
    return Dataset(images / 255.0, cleaned, normalize_batch(cleaned), split, emotion_set,
                   raw_votes=raw, tags=tags)


# -- checkpoints -----------------------------------------------------------
#
# b"CFNT" | u32 version | u64 header length | header JSON | payload | sha256(payload)
#
# The header lists layer specs, input shape, dtype, metadata and each
# parameter's (layer, name, shape, offset, nbytes) in the payload. Arrays
# are stored little-endian, C order.

CHECKPOINT_MAGIC = b"CFNT"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(model: Model, metadata: Optional[dict] = None) -> bytes:
    dt = model.dtype.newbyteorder("<")
    params, chunks, offset = [], [], 0
    for i, name, arr in model.parameters():
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        params.append({"layer": i, "name": name, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "name": model.name,
        "input_shape": list(model.input_shape),
        "dtype": dt.str,
        "K": model.K,
        "layers": [s.to_dict() for s in model.specs],
        "params": params,
        "payload_bytes": offset,
        "metadata": metadata or {},
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(chunks)
    return _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(hdr)) + hdr + payload \
        + hashlib.sha256(payload).digest()


def save_checkpoint(model: Model, metadata: Optional[dict], path):
    _atomic_write(Path(path), checkpoint_bytes(model, metadata))


def read_checkpoint(data: bytes):
    """Parse checkpoint bytes into (header, payload) with integrity checks."""
    if len(data) < _PREFIX.size:
        raise CheckpointTruncatedError("file shorter than the checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointTruncatedError("header cut short")
    header = json.loads(data[start:start + hlen])
    body = start + hlen
    need = body + header["payload_bytes"] + 32
    if len(data) < need:
        raise CheckpointTruncatedError(f"expected {need} bytes, file has {len(data)}")
    payload = data[body:body + header["payload_bytes"]]
    if hashlib.sha256(payload).digest() != data[body + header["payload_bytes"]:need]:
        raise CheckpointError("payload checksum mismatch")
    return header, payload


def load_checkpoint(path, K: Optional[int] = None, input_shape: Optional[tuple] = None):
    """Rebuild the model stored at ``path``; returns ``(model, metadata)``.

    ``K`` and ``input_shape``, when given, must match the stored network.
    """
    header, payload = read_checkpoint(Path(path).read_bytes())
    if K is not None and header["K"] != K:
        raise CheckpointShapeError(f"checkpoint has K={header['K']}, run expects K={K}")
    if input_shape is not None and tuple(header["input_shape"]) != tuple(input_shape):
        raise CheckpointShapeError(f"checkpoint input {tuple(header['input_shape'])} != {tuple(input_shape)}")
    dt = np.dtype(header["dtype"])
    specs = [LayerSpec.from_dict(d) for d in header["layers"]]
    model = Model(specs, header["input_shape"], seed=0, dtype=dt.newbyteorder("="), name=header["name"])
    _fill(model, header, payload, dt)
    return model, header["metadata"]


def load_into(model: Model, path) -> dict:
    """Copy stored parameters into an existing model of the same architecture."""
    header, payload = read_checkpoint(Path(path).read_bytes())
    stored = [LayerSpec.from_dict(d) for d in header["layers"]]
    if stored != model.specs or tuple(header["input_shape"]) != model.input_shape:
        raise CheckpointShapeError("checkpoint architecture differs from the target model")
    _fill(model, header, payload, np.dtype(header["dtype"]))
    return header["metadata"]


def _fill(model: Model, header, payload, dt):
    entries = {(p["layer"], p["name"]): p for p in header["params"]}
    for i, name, arr in model.parameters():
        p = entries.pop((i, name), None)
        if p is None or tuple(p["shape"]) != arr.shape:
            raise CheckpointShapeError(f"parameter {name} of layer {i} missing or mis-shaped")
        chunk = payload[p["offset"]:p["offset"] + p["nbytes"]]
        arr[...] = np.frombuffer(chunk, dtype=dt).reshape(arr.shape)
    if entries:
        raise CheckpointShapeError(f"unexpected parameters {sorted(entries)}")
    model.touch()


# -- metrics ---------------------------------------------------------------

def write_metrics(report, config: dict, out_dir, emotion_set: EmotionSet = EmotionSet(),
                  history: Optional[list] = None):
    """Write ``metrics.json`` and ``confusion.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    doc = {"config": config, "report": report.as_dict(emotion_set)}
    if history is not None:
        doc["history"] = history
    text = json.dumps(_plain(doc), sort_keys=True, indent=2) + "\n"
    json_path, csv_path = out_dir / "metrics.json", out_dir / "confusion.csv"
    _atomic_write(json_path, text.encode())
    _atomic_write(csv_path, confusion_csv(report.confusion, emotion_set).encode())
    return json_path, csv_path


def confusion_csv(confusion: np.ndarray, emotion_set: EmotionSet) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\predicted", *emotion_set.names])
    for name, row in zip(emotion_set.names, np.asarray(confusion)):
        writer.writerow([name, *map(int, row)])
    return buf.getvalue()


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
