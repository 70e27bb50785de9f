"""MNIST / FashionMNIST ingestion from gzipped IDX files.

Mirror URLs and payload checksums come from ``datasets.json`` next to this
module (or a file named by ``IMSNN_DATASETS_CONFIG``). Files are cached as
``<cache>/<dataset>/<split>-{images,labels}.idx.gz``; the cache root is
``IMSNN_CACHE`` or ``~/.cache/imsnn``. Checksums are SHA-256 digests of the
decompressed IDX bytes, so any gzip encoder produces a valid cache entry.
"""

import gzip
import hashlib
import json
import logging
import os
import struct
import tempfile
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DATASETS = ("mnist", "fashion_mnist")
SPLITS = ("train", "test")
IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxParseError(ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class DatasetError(RuntimeError):
    pass


class CacheMissError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


def parse_idx(data):
    """Parse an IDX byte string into a uint8 numpy array.

    Only unsigned-byte payloads with magic 2049 (1-D) or 2051 (3-D) are
    accepted, which covers both datasets.
    """
    data = bytes(data)
    if len(data) < 4:
        raise IdxParseError("file shorter than the magic number", 0)
    magic = struct.unpack(">I", data[:4])[0]
    if magic not in (IMAGE_MAGIC, LABEL_MAGIC):
        raise IdxParseError(f"bad magic number {magic}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxParseError("truncated header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = 1
    for d in dims:
        size *= d
        if size > 2**34:
            raise IdxParseError("dimension product overflows", 4)
    if len(data) - header != size:
        raise IdxParseError(f"truncated payload: expected {size} bytes, found {len(data) - header}",
                            len(data))
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def to_idx(array):
    """Serialize a uint8 array back to IDX bytes (inverse of parse_idx)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


@dataclass
class Dataset:
    images: np.ndarray  # (n, 28, 28) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: str
    name: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError("image and label counts differ")

    def __len__(self):
        return len(self.labels)

    def subset(self, limit):
        if limit is None or limit >= len(self):
            return self
        return Dataset(self.images[:limit], self.labels[:limit], self.split, self.name)


def cache_root(cache_dir=None):
    if cache_dir:
        return Path(cache_dir)
    return Path(os.environ.get("IMSNN_CACHE", Path.home() / ".cache" / "imsnn"))


def load_config(path=None):
    path = path or os.environ.get("IMSNN_DATASETS_CONFIG") or Path(__file__).with_name("datasets.json")
    with open(path) as fh:
        return json.load(fh)


def _atomic_write(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _fetch(urls):
    errors = []
    for url in urls:
        try:
            with urllib.request.urlopen(url, timeout=60) as resp:
                return resp.read()
        except OSError as exc:
            errors.append(f"{url}: {exc}")
    raise DatasetError("download failed: " + "; ".join(errors) if errors else "no mirror configured")


def _verify(raw, expected, path):
    if expected and hashlib.sha256(raw).hexdigest() != expected:
        raise ChecksumError(f"checksum mismatch for {path}")


def _get_file(name, split, kind, root, config, offline, refresh):
    entry = config[name][split][kind]
    path = root / name / f"{split}-{kind}.idx.gz"
    if path.exists():
        raw = gzip.decompress(path.read_bytes())
        try:
            _verify(raw, entry.get("sha256"), path)
            return raw
        except ChecksumError:
            if not refresh:
                raise
            log.warning("refreshing corrupt cache file %s", path)
    if offline:
        raise CacheMissError(f"{path} is not cached and downloads are disabled")
    payload = _fetch(entry["urls"])
    raw = gzip.decompress(payload) if payload[:2] == b"\x1f\x8b" else payload
    _verify(raw, entry.get("sha256"), entry["urls"][0])
    _atomic_write(path, gzip.compress(raw, mtime=0))
    return raw


def load_dataset(name, split, cache_dir=None, offline=False, refresh=False, limit=None, config=None):
    """Load a normalized split, downloading into the cache when needed.

    Args:
        name: ``mnist`` or ``fashion_mnist``.
        split: ``train`` or ``test``.
        cache_dir: cache root (default ``IMSNN_CACHE`` or ``~/.cache/imsnn``).
        offline: never touch the network; a missing file raises CacheMissError.
        refresh: re-download a cached file whose checksum does not match
            instead of raising ChecksumError.
        limit: keep only the first ``limit`` samples.
    """
    if name not in DATASETS:
        raise DatasetError(f"unknown dataset {name!r}")
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}")
    config = config or load_config()
    root = cache_root(cache_dir)
    with ThreadPoolExecutor(max_workers=2) as pool:
        futures = [pool.submit(_get_file, name, split, kind, root, config, offline, refresh)
                   for kind in ("images", "labels")]
        raw_images, raw_labels = (f.result() for f in futures)
    images = parse_idx(raw_images)
    labels = parse_idx(raw_labels)
    if images.ndim != 3 or labels.ndim != 1:
        raise DatasetError("unexpected IDX dimensionality")
    ds = Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), split, name)
    return ds.subset(limit)
