"""Frame containers, model checkpoints, raw-dump import and dataset fetching.

Frame container layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"ZTRF"
    4       2     format version (uint16, currently 1)
    6       1     sample type tag (uint8): 1 = int16, 2 = float32, 3 = float64
    7       1     reserved (0)
    8       4     frame count (uint32)
    12      4     axial pixels (uint32)
    16      4     lateral pixels (uint32)
    20      8     pixels per cm (float64)
    28      8     depth cm (float64)
    36      8     sampling rate Hz (float64)
    44      8     focus depth cm (float64)
    52      2     label table length L (uint16)
    54      2*L   label table entries (int16 class ids)
    ...     per frame, in order:
            2     frame id length K (uint16)
            K     frame id, UTF-8
            2     label (int16, -1 = unlabelled)
            A*W*s samples, row-major (axial, lateral), little-endian

Checkpoints use magic b"ZTCK": version (uint16), a uint32 JSON header
length, a UTF-8 JSON header (config, seed, history, tensor index), then the
raw little-endian float32 tensors in index order.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import (BadMagic, DigestMismatch, LayoutMismatch, NetworkError, StorageError,
                     TruncatedPayload, VersionUnsupported)
from .geometry import FrameGeometry, UltrasoundFrame

log = logging.getLogger(__name__)

MAGIC = b"ZTRF"
VERSION = 1
SAMPLE_TYPES = {1: np.dtype("<i2"), 2: np.dtype("<f4"), 3: np.dtype("<f8")}
_TAG_OF = {np.dtype(v).str: k for k, v in SAMPLE_TYPES.items()}
_HEADER = struct.Struct("<4sHBBIIIdddd")


def sample_tag(dtype) -> int:
    key = np.dtype(dtype).newbyteorder("<").str
    if key not in _TAG_OF:
        raise ValueError(f"unsupported sample type {dtype}")
    return _TAG_OF[key]


@dataclass(frozen=True)
class ContainerHeader:
    version: int
    sample_tag: int
    frame_count: int
    geometry: FrameGeometry
    pixels_per_cm: float
    label_table: tuple

    @property
    def dtype(self) -> np.dtype:
        return SAMPLE_TYPES[self.sample_tag]

    @property
    def frame_bytes(self) -> int:
        return self.geometry.axial_pixels * self.geometry.lateral_pixels * self.dtype.itemsize


def _default_dtype(frames: Sequence[UltrasoundFrame]):
    return frames[0].samples.dtype if frames else np.float32


def write_container(frames: Sequence[UltrasoundFrame], path, dtype=None,
                    geometry: Optional[FrameGeometry] = None) -> Path:
    """Write frames to ``path``; the file is locked exclusively while writing."""
    import fcntl

    frames = list(frames)
    if not frames and geometry is None:
        raise ValueError("an empty container needs an explicit geometry")
    geometry = geometry or frames[0].geometry
    dtype = np.dtype(dtype or _default_dtype(frames)).newbyteorder("<")
    tag = sample_tag(dtype)
    for f in frames:
        if f.geometry != geometry:
            raise LayoutMismatch(f"frame {f.frame_id} geometry differs from the container's")
    labels = sorted({f.label for f in frames if f.label is not None})
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            fh.write(_HEADER.pack(MAGIC, VERSION, tag, 0, len(frames), geometry.axial_pixels,
                                  geometry.lateral_pixels, geometry.pixels_per_cm, geometry.depth_cm,
                                  geometry.sampling_rate_hz, geometry.focus_depth_cm))
            fh.write(struct.pack("<H", len(labels)))
            fh.write(struct.pack(f"<{len(labels)}h", *labels))
            for f in frames:
                fid = f.frame_id.encode()
                fh.write(struct.pack("<H", len(fid)) + fid)
                fh.write(struct.pack("<h", -1 if f.label is None else f.label))
                samples = np.asarray(f.samples)
                if np.issubdtype(dtype, np.integer):
                    info = np.iinfo(dtype)
                    if samples.min() < info.min or samples.max() > info.max:
                        raise ValueError(f"frame {f.frame_id} overflows {dtype}")
                fh.write(np.ascontiguousarray(samples, dtype=dtype).tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    return path


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedPayload(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def read_header(fh: BinaryIO) -> ContainerHeader:
    head = fh.read(_HEADER.size)
    if len(head) < 4 or head[:4] != MAGIC:
        raise BadMagic(f"not a frame container (magic {head[:4]!r})")
    if len(head) != _HEADER.size:
        raise TruncatedPayload("header truncated")
    magic, version, tag, _, count, axial, lateral, ppc, depth, fs, focus = _HEADER.unpack(head)
    if version != VERSION:
        raise VersionUnsupported(f"container version {version}, this reader supports {VERSION}")
    if tag not in SAMPLE_TYPES:
        raise VersionUnsupported(f"unknown sample type tag {tag}")
    (n_labels,) = struct.unpack("<H", _read_exact(fh, 2, "label table length"))
    labels = struct.unpack(f"<{n_labels}h", _read_exact(fh, 2 * n_labels, "label table"))
    geometry = FrameGeometry(axial, lateral, depth, fs, focus)
    return ContainerHeader(version, tag, count, geometry, ppc, tuple(labels))


def iter_container(path) -> Iterator[UltrasoundFrame]:
    """Stream frames one at a time; at most one frame is held in memory."""
    with open(path, "rb") as fh:
        header = read_header(fh)
        g = header.geometry
        for k in range(header.frame_count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2, f"frame {k} id length"))
            fid = _read_exact(fh, n, f"frame {k} id").decode()
            (label,) = struct.unpack("<h", _read_exact(fh, 2, f"frame {k} label"))
            raw = _read_exact(fh, header.frame_bytes, f"frame {k} ({fid}) samples")
            samples = np.frombuffer(raw, dtype=header.dtype).reshape(g.shape)
            yield UltrasoundFrame(g, samples.astype(samples.dtype.newbyteorder("=")), fid,
                                  None if label < 0 else int(label))
        if fh.read(1):
            raise TruncatedPayload(f"trailing bytes after {header.frame_count} frames")


def read_container(path) -> list[UltrasoundFrame]:
    """Read all frames. Truncation raises before anything is returned."""
    return list(iter_container(path))


def container_header(path) -> ContainerHeader:
    with open(path, "rb") as fh:
        return read_header(fh)


def file_digest(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"ZTCK"
CKPT_VERSION = 1


def write_checkpoint(path, params: dict, meta: dict) -> Path:
    """Deterministic byte layout: sorted tensor names, sorted JSON keys."""
    names = sorted(params)
    index = [{"name": n, "shape": list(np.shape(params[n])), "dtype": "<f4"} for n in names]
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(header)) + header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise BadMagic(f"{path} is not a checkpoint")
        version, hlen = struct.unpack("<HI", _read_exact(fh, 6, "checkpoint header"))
        if version != CKPT_VERSION:
            raise VersionUnsupported(f"checkpoint version {version}")
        header = json.loads(_read_exact(fh, hlen, "checkpoint header").decode())
        params = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            raw = _read_exact(fh, 4 * count, f"tensor {t['name']}")
            params[t["name"]] = np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).astype(np.float32)
    return params, header["meta"]


# ---------------------------------------------------------------- raw import

@dataclass(frozen=True)
class LayoutDescriptor:
    """How to read a third-party raw frame dump.

    ``order`` is ``"axial_major"`` (rows are axial samples) or
    ``"lateral_major"`` (the file stores one A-line after another).
    """

    axial_pixels: int
    lateral_pixels: int
    dtype: str = "<i2"
    order: str = "lateral_major"
    header_bytes: int = 0
    depth_cm: float = 4.0
    sampling_rate_hz: float = 40e6
    focus_depth_cm: float = 2.0

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutDescriptor":
        return cls(**d)

    def geometry(self) -> FrameGeometry:
        return FrameGeometry(self.axial_pixels, self.lateral_pixels, self.depth_cm,
                             self.sampling_rate_hz, self.focus_depth_cm)


def import_adapter(files: Sequence[tuple], layout: LayoutDescriptor, out_path,
                   container_dtype=None) -> ContainerHeader:
    """Convert raw dumps into a frame container.

    ``files`` holds ``(path, class_label)`` pairs; each file may contain any
    whole number of frames after ``layout.header_bytes``.
    """
    dtype = np.dtype(layout.dtype)
    frame_bytes = layout.axial_pixels * layout.lateral_pixels * dtype.itemsize
    geometry = layout.geometry()
    frames = []
    for path, label in files:
        size = os.path.getsize(path)
        payload = size - layout.header_bytes
        if payload <= 0 or payload % frame_bytes:
            raise LayoutMismatch(
                f"{path}: {size} bytes minus {layout.header_bytes} header is not a multiple of the "
                f"{frame_bytes}-byte frame; first bad byte offset {layout.header_bytes + payload - payload % frame_bytes}")
        data = np.fromfile(path, dtype=dtype, offset=layout.header_bytes)
        for k in range(payload // frame_bytes):
            chunk = data[k * layout.axial_pixels * layout.lateral_pixels:
                         (k + 1) * layout.axial_pixels * layout.lateral_pixels]
            if layout.order == "axial_major":
                samples = chunk.reshape(layout.axial_pixels, layout.lateral_pixels)
            elif layout.order == "lateral_major":
                samples = chunk.reshape(layout.lateral_pixels, layout.axial_pixels).T
            else:
                raise LayoutMismatch(f"unknown order {layout.order!r}")
            if not np.all(np.isfinite(samples)):
                raise LayoutMismatch(f"{path}: non-finite samples in frame {k} at byte offset "
                                     f"{layout.header_bytes + k * frame_bytes}")
            stem = Path(path).stem
            frames.append(UltrasoundFrame(geometry, np.ascontiguousarray(samples), f"{stem}-{k:04d}",
                                          int(label)))
    write_container(frames, out_path, dtype=container_dtype or dtype.newbyteorder("<"), geometry=geometry)
    return container_header(out_path)


# ---------------------------------------------------------------- fetching

OSF_PROJECT_URL = "https://osf.io/7ztg3/"


@dataclass
class ManifestEntry:
    name: str
    url: str
    size: int
    sha256: str


@dataclass
class DatasetManifest:
    source_url: str
    cache_dir: str
    files: list = field(default_factory=list)
    retrieved_at: str = ""

    def to_dict(self) -> dict:
        return {"source_url": self.source_url, "cache_dir": self.cache_dir,
                "retrieved_at": self.retrieved_at, "files": [vars(f) for f in self.files]}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(d["source_url"], d["cache_dir"], [ManifestEntry(**f) for f in d["files"]],
                   d.get("retrieved_at", ""))

    def entry(self, name: str) -> Optional[ManifestEntry]:
        return next((f for f in self.files if f.name == name), None)


MANIFEST_NAME = "manifest.json"


def _load_manifest(cache_dir: Path, url: str) -> DatasetManifest:
    p = cache_dir / MANIFEST_NAME
    if p.exists():
        return DatasetManifest.from_dict(json.loads(p.read_text()))
    return DatasetManifest(url, str(cache_dir))


def _download(url: str, dest: Path, retries: int, timeout: float) -> int:
    """Stream ``url`` to ``dest`` (via a .part file); returns bytes transferred."""
    import requests

    last = None
    for attempt in range(1, retries + 1):
        part = dest.with_name(dest.name + ".part")
        try:
            with requests.get(url, stream=True, timeout=timeout) as r:
                r.raise_for_status()
                n = 0
                with open(part, "wb") as fh:
                    for block in r.iter_content(1 << 16):
                        fh.write(block)
                        n += len(block)
            part.replace(dest)
            return n
        except requests.RequestException as exc:
            last = exc
            part.unlink(missing_ok=True)
            time.sleep(min(0.1 * attempt, 1.0))
        except OSError as exc:
            raise StorageError(f"cannot write {dest}: {exc}") from exc
    raise NetworkError(f"failed to fetch {url} after {retries} retries: {last}")


def fetch_dataset(url: str, cache_dir, files: Optional[Sequence[dict]] = None, retries: int = 3,
                  timeout: float = 30.0) -> tuple[DatasetManifest, int]:
    """Download files into ``cache_dir`` and verify them against the manifest.

    ``files`` lists ``{"name", "url"?, "sha256"?}`` entries; without it,
    ``<url>/index.json`` is fetched and must hold such a list. A cached file
    whose digest matches the manifest is not downloaded again; a corrupted one
    is re-downloaded. Digests already in the manifest never change silently:
    a re-download that disagrees raises :class:`DigestMismatch`.

    Returns the manifest and the number of bytes transferred.
    """
    import requests

    cache = Path(cache_dir)
    try:
        cache.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create cache {cache}: {exc}") from exc
    manifest = _load_manifest(cache, url)
    transferred = 0
    if files is None:
        index_url = url.rstrip("/") + "/index.json"
        last = None
        for attempt in range(1, retries + 1):
            try:
                r = requests.get(index_url, timeout=timeout)
                r.raise_for_status()
                files = r.json()
                break
            except requests.RequestException as exc:
                last = exc
        else:
            raise NetworkError(f"failed to fetch {index_url} after {retries} retries: {last}")
    for spec in files:
        name = spec["name"]
        file_url = spec.get("url") or url.rstrip("/") + "/" + name
        dest = cache / name
        known = manifest.entry(name)
        expected = spec.get("sha256") or (known.sha256 if known else None)
        if dest.exists() and expected and file_digest(dest) == expected:
            if known is None:
                manifest.files.append(ManifestEntry(name, file_url, dest.stat().st_size, expected))
            continue
        if dest.exists() and expected:
            log.warning("%s: cached copy fails its sha256 check, downloading again", name)
        transferred += _download(file_url, dest, retries, timeout)
        digest = file_digest(dest)
        if expected and digest != expected:
            raise DigestMismatch(f"{name}: downloaded sha256 {digest} != expected {expected}")
        if known is None:
            manifest.files.append(ManifestEntry(name, file_url, dest.stat().st_size, digest))
    manifest.retrieved_at = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    (cache / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return manifest, transferred
