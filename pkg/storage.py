"""On-disk formats: dataset container + manifest, checkpoint container, CSV exports.

All integers little-endian. Layouts:

  dataset     b"PINSAR01" | u32 count | u32 grid | u8 has_labels |
              count x (u64 seed | u8 label | grid*grid float32 row-major)
  checkpoint  b"PINSCKPT" | u32 version | u32 n + fingerprint hex |
              u32 n + metadata (key=value text) | u32 records |
              records x (u32 n + name | u32 rank | rank x u32 dim | float32 values)
"""

import csv
import logging
import os
import struct

import numpy as np

from errors import DataError
from syngen import SyntheticDataset

LOG = logging.getLogger(__name__)

DATASET_MAGIC = b"PINSAR01"
CHECKPOINT_MAGIC = b"PINSCKPT"
CHECKPOINT_VERSION = 1
MANIFEST_SUFFIX = ".manifest"

_DATASET_HEADER = struct.Struct("<IIB")
_U32 = struct.Struct("<I")


def _record_dtype(grid_size):
    return np.dtype([("seed", "<u8"), ("label", "u1"), ("phase", "<f4", (grid_size, grid_size))])


def manifest_path(path):
    return str(path) + MANIFEST_SUFFIX


def format_value(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


# ================================================================= #
# =========================== DATASET ============================= #
# ================================================================= #

def dataset_to_bytes(phases, labels, seeds):
    phases = np.asarray(phases, dtype=np.float32)
    count, grid = len(phases), (phases.shape[-1] if phases.ndim == 3 else 0)
    records = np.zeros(count, dtype=_record_dtype(grid))
    records["seed"] = np.asarray(seeds, dtype=np.uint64)
    if labels is not None:
        records["label"] = np.asarray(labels, dtype=np.uint8)
    records["phase"] = phases
    header = DATASET_MAGIC + _DATASET_HEADER.pack(count, grid, 0 if labels is None else 1)
    return header + records.tobytes()


def dataset_from_bytes(blob, source="<bytes>"):
    """Returns (phases, labels or None, seeds)."""
    head = len(DATASET_MAGIC) + _DATASET_HEADER.size
    if len(blob) < head or blob[:len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DataError(f"{source}: not a dataset file (bad magic)")
    count, grid, flag = _DATASET_HEADER.unpack_from(blob, len(DATASET_MAGIC))
    dtype = _record_dtype(grid)
    expected = head + count * dtype.itemsize
    if len(blob) != expected:
        raise DataError(f"{source}: expected {expected} bytes for {count} samples of {grid}x{grid}, "
                        f"found {len(blob)}")
    if flag not in (0, 1):
        raise DataError(f"{source}: invalid label flag {flag}")
    records = np.frombuffer(blob, dtype=dtype, count=count, offset=head)
    labels = records["label"].astype(np.int64) if flag else None
    if labels is not None and np.any(labels > 1):
        raise DataError(f"{source}: labels outside {{0, 1}}")
    return records["phase"].copy(), labels, records["seed"].copy()


def write_manifest(path, records, header=None):
    lines = [f"{k}={format_value(v)}" for k, v in (header or {}).items()]
    for record in records:
        if lines:
            lines.append("")
        lines.extend(f"{k}={format_value(v)}" for k, v in record.items())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    """Returns (header dict, list of per-sample dicts); a sample block starts at 'sample='."""
    header, records = {}, []
    current = header
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            if key == "sample":
                current = {}
                records.append(current)
            current[key] = value
    return header, records


def save_dataset(path, dataset, header=None):
    """Write the dataset container and its manifest next to it."""
    blob = dataset_to_bytes(dataset.phases, dataset.labels, dataset.seeds)
    with open(path, "wb") as fh:
        fh.write(blob)
    meta = {"profile": dataset.profile, "count": len(dataset), "labeled": int(dataset.has_labels)}
    meta.update(header or {})
    write_manifest(manifest_path(path), dataset.records, meta)
    LOG.info(">>> [EXPORT] %d samples -> %s (%d bytes)", len(dataset), path, len(blob))


def load_dataset(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from None
    phases, labels, seeds = dataset_from_bytes(blob, source=str(path))
    header, records = {}, []
    mpath = manifest_path(path)
    if os.path.exists(mpath):
        try:
            header, records = read_manifest(mpath)
        except (OSError, UnicodeDecodeError) as e:
            LOG.warning(">>> [DATA] manifest %s unreadable, ignored: %s", mpath, e)
    if records and len(records) != len(phases):
        LOG.warning(">>> [DATA] manifest lists %d samples, container has %d", len(records), len(phases))
        records = []
    return SyntheticDataset(phases, labels, seeds, records, header.get("profile", "source"))


# ================================================================= #
# ========================== CHECKPOINT =========================== #
# ================================================================= #

def _pack_text(text):
    raw = text.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def checkpoint_to_bytes(fingerprint, metadata, state):
    """state: ordered mapping name -> ndarray (stored as float32)."""
    parts = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _pack_text(fingerprint),
             _pack_text(metadata), _U32.pack(len(state))]
    for name, value in state.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(_pack_text(name))
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob, source):
        self.blob = blob
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise DataError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def text(self):
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise DataError(f"{self.source}: corrupt text field in checkpoint") from None


def checkpoint_from_bytes(blob, source="<bytes>"):
    """Returns (fingerprint, metadata text, dict name -> float32 array)."""
    reader = _Reader(blob, source)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise DataError(f"{source}: not a checkpoint file (bad magic)")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    fingerprint = reader.text()
    metadata = reader.text()
    state = {}
    for _ in range(reader.u32()):
        name = reader.text()
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if reader.pos != len(blob):
        raise DataError(f"{source}: {len(blob) - reader.pos} trailing bytes after checkpoint records")
    return fingerprint, metadata, state


# ================================================================= #
# ============================= CSV =============================== #
# ================================================================= #

def format_float(value):
    return format(float(value), ".9g")


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
