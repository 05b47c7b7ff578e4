"""Dataset object model, on-disk formats and seeded randomness.

Images are plain ``numpy.ndarray`` of dtype ``uint8`` and shape ``(H, W)``.
Timestamps are float hours since incubation start.

Two file formats live here:

* the dataset manifest, a JSON document at the corpus root that lists
  classes, batches and image sequences with frame paths relative to the root;
* the embedding archive (``.clae``), a little-endian binary holding one
  :class:`EmbeddingSequence`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

ARCHIVE_MAGIC = b"CLAE"
ARCHIVE_VERSION = 1


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


class ArchiveError(ValueError):
    """Raised for malformed embedding archives."""


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------


class Rng:
    """Seeded random stream.

    Thin owner of a ``numpy.random.Generator`` (PCG64). Child streams derived
    with :meth:`spawn` depend only on the seed and the spawn path, never on how
    many draws the parent has made, so independent stages stay reproducible
    when one of them changes its consumption.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = tuple(_key)
        self._n_children = 0
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, n: int | None = None):
        """Return one child stream, or a list of ``n`` children."""
        count = 1 if n is None else n
        children = []
        for _ in range(count):
            children.append(Rng(self.seed, self._key + (self._n_children,)))
            self._n_children += 1
        return children[0] if n is None else children

    def child(self, *key: int) -> "Rng":
        """Child stream addressed by an explicit key (e.g. a frame index)."""
        return Rng(self.seed, self._key + tuple(int(k) for k in key))

    # convenience passthroughs
    def random(self, size=None):
        return self.generator.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, x):
        return self.generator.permutation(x)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self._key})"


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


def as_gray_image(pixels) -> np.ndarray:
    img = np.asarray(pixels)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a 2-D image with positive size, got shape {img.shape}")
    if img.dtype != np.uint8:
        if np.issubdtype(img.dtype, np.integer) and (img.min() < 0 or img.max() > 255):
            raise ValueError("integer image values must lie in [0, 255]")
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img


def read_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I", "P", "1"):
            im = im.convert("L")
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return arr.copy()


def write_image(path: str | Path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(as_gray_image(image), mode="L").save(path)


# --------------------------------------------------------------------------
# dataset model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    path: str  # relative to the manifest root
    hours: float


@dataclass(frozen=True)
class ImageSequence:
    sequence_id: str
    batch_id: str
    class_label: int
    frames: tuple[Frame, ...]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.hours for f in self.frames], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class Batch:
    batch_id: str
    class_label: int


@dataclass(frozen=True)
class DatasetManifest:
    classes: tuple[str, ...]
    batches: tuple[Batch, ...]
    sequences: tuple[ImageSequence, ...]
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        _validate_structure(self)

    @property
    def counts(self) -> tuple[int, int, int, int]:
        """(classes, batches, sequences, frames)."""
        return (
            len(self.classes),
            len(self.batches),
            len(self.sequences),
            sum(len(s) for s in self.sequences),
        )

    def batch_of(self, batch_id: str) -> Batch:
        for b in self.batches:
            if b.batch_id == batch_id:
                return b
        raise KeyError(batch_id)

    def sequences_in(self, batch_id: str) -> list[ImageSequence]:
        return [s for s in self.sequences if s.batch_id == batch_id]

    def sequence(self, sequence_id: str) -> ImageSequence:
        for s in self.sequences:
            if s.sequence_id == sequence_id:
                return s
        raise KeyError(sequence_id)

    def frame_path(self, frame: Frame) -> Path:
        if self.root is None:
            return Path(frame.path)
        return self.root / frame.path

    def subset(self, sequence_ids: Iterable[str]) -> "DatasetManifest":
        keep = set(sequence_ids)
        seqs = tuple(s for s in self.sequences if s.sequence_id in keep)
        used = {s.batch_id for s in seqs}
        batches = tuple(b for b in self.batches if b.batch_id in used)
        return DatasetManifest(self.classes, batches, seqs, self.root)


def _validate_structure(m: DatasetManifest, where: str = "manifest") -> None:
    n_classes = len(m.classes)
    if n_classes < 1:
        raise ManifestError(f"{where}: no classes")
    batch_ids: dict[str, int] = {}
    for i, b in enumerate(m.batches):
        if b.batch_id in batch_ids:
            raise ManifestError(f"{where}: batches[{i}]: duplicate batch_id {b.batch_id!r}")
        if not 0 <= b.class_label < n_classes:
            raise ManifestError(
                f"{where}: batches[{i}]: class index {b.class_label} out of range [0, {n_classes})"
            )
        batch_ids[b.batch_id] = b.class_label
    seen: set[str] = set()
    for i, s in enumerate(m.sequences):
        loc = f"{where}: sequences[{i}]"
        if s.sequence_id in seen:
            raise ManifestError(f"{loc}: duplicate sequence_id {s.sequence_id!r}")
        seen.add(s.sequence_id)
        if s.batch_id not in batch_ids:
            raise ManifestError(f"{loc}: unknown batch_id {s.batch_id!r}")
        if not 0 <= s.class_label < n_classes:
            raise ManifestError(
                f"{loc}: class index {s.class_label} out of range [0, {n_classes})"
            )
        if s.class_label != batch_ids[s.batch_id]:
            raise ManifestError(
                f"{loc}: class {s.class_label} disagrees with batch {s.batch_id!r} class {batch_ids[s.batch_id]}"
            )
        if len(s.frames) < 1:
            raise ManifestError(f"{loc}: sequence has no frames")
        prev = None
        for j, f in enumerate(s.frames):
            if not np.isfinite(f.hours) or f.hours < 0:
                raise ManifestError(f"{loc}.frames[{j}]: timestamp must be a non-negative number")
            if prev is not None and f.hours <= prev:
                raise ManifestError(f"{loc}.frames[{j}]: timestamps must be strictly increasing")
            prev = f.hours
    populated = {s.batch_id for s in m.sequences}
    for i, b in enumerate(m.batches):
        if b.batch_id not in populated:
            raise ManifestError(f"{where}: batches[{i}]: batch {b.batch_id!r} has no sequences")


def manifest_to_dict(m: DatasetManifest) -> dict:
    return {
        "format": "clanet-manifest",
        "version": MANIFEST_VERSION,
        "classes": list(m.classes),
        "batches": [{"batch_id": b.batch_id, "class": b.class_label} for b in m.batches],
        "sequences": [
            {
                "sequence_id": s.sequence_id,
                "batch_id": s.batch_id,
                "class": s.class_label,
                "frames": [{"path": f.path, "hours": f.hours} for f in s.frames],
            }
            for s in m.sequences
        ],
    }


def write_manifest(m: DatasetManifest, path: str | Path) -> Path:
    """Write ``m`` as JSON. A directory path receives ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    path.write_text(json.dumps(manifest_to_dict(m), indent=1) + "\n")
    return path


def _req(record: dict, key: str, loc: str, types):
    if key not in record:
        raise ManifestError(f"{loc}: missing field {key!r}")
    value = record[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise ManifestError(f"{loc}: field {key!r} has wrong type {type(value).__name__}")
    return value


def manifest_from_dict(doc: dict, root: Path | None = None, where: str = "manifest") -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ManifestError(f"{where}: top level must be an object")
    classes = _req(doc, "classes", where, list)
    if not all(isinstance(c, str) for c in classes):
        raise ManifestError(f"{where}: classes must be strings")
    batches = []
    for i, rec in enumerate(_req(doc, "batches", where, list)):
        loc = f"{where}: batches[{i}]"
        if not isinstance(rec, dict):
            raise ManifestError(f"{loc}: expected an object")
        batches.append(Batch(_req(rec, "batch_id", loc, str), _req(rec, "class", loc, int)))
    seqs = []
    for i, rec in enumerate(_req(doc, "sequences", where, list)):
        loc = f"{where}: sequences[{i}]"
        if not isinstance(rec, dict):
            raise ManifestError(f"{loc}: expected an object")
        frames = []
        for j, fr in enumerate(_req(rec, "frames", loc, list)):
            floc = f"{loc}.frames[{j}]"
            if not isinstance(fr, dict):
                raise ManifestError(f"{floc}: expected an object")
            frames.append(Frame(_req(fr, "path", floc, str), float(_req(fr, "hours", floc, (int, float)))))
        seqs.append(
            ImageSequence(
                _req(rec, "sequence_id", loc, str),
                _req(rec, "batch_id", loc, str),
                _req(rec, "class", loc, int),
                tuple(frames),
            )
        )
    try:
        return DatasetManifest(tuple(classes), tuple(batches), tuple(seqs), root)
    except ManifestError as exc:
        raise ManifestError(str(exc).replace("manifest:", f"{where}:", 1)) from None


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Load and validate a manifest; a directory path means ``<dir>/manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ManifestError(f"{path}: manifest file not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    m = manifest_from_dict(doc, root=path.parent.resolve(), where=str(path))
    if check_files:
        for i, s in enumerate(m.sequences):
            for j, f in enumerate(s.frames):
                p = m.frame_path(f)
                if not p.is_file():
                    raise ManifestError(f"{path}: sequences[{i}].frames[{j}]: missing image file {p}")
    return m


# --------------------------------------------------------------------------
# embeddings
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    """Per-frame patch embeddings of one image sequence.

    ``frames[n]`` is a ``(K_n, D)`` float32 array; ``timestamps[n]`` its hour stamp.
    """

    sequence_id: str
    frames: tuple[np.ndarray, ...]
    timestamps: np.ndarray

    def __post_init__(self):
        frames = tuple(np.ascontiguousarray(f, dtype=np.float32) for f in self.frames)
        ts = np.ascontiguousarray(self.timestamps, dtype=np.float64)
        if len(frames) != ts.shape[0]:
            raise ValueError("timestamp count must equal frame count")
        if len(frames) < 1:
            raise ValueError("embedding sequence needs at least one frame")
        dims = {f.shape[1] if f.ndim == 2 else -1 for f in frames}
        if len(dims) != 1 or -1 in dims:
            raise ValueError("every frame must be a (K_n, D) matrix with a shared D")
        if any(f.shape[0] < 1 for f in frames):
            raise ValueError("every frame needs at least one embedding")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps", ts)

    @property
    def dim(self) -> int:
        return self.frames[0].shape[1]

    def __len__(self) -> int:
        return len(self.frames)

    def instances(self) -> np.ndarray:
        return np.concatenate(self.frames, axis=0)

    def take(self, indices: Sequence[int]) -> "EmbeddingSequence":
        idx = list(indices)
        return EmbeddingSequence(self.sequence_id, tuple(self.frames[i] for i in idx), self.timestamps[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSequence):
            return NotImplemented
        return (
            self.sequence_id == other.sequence_id
            and len(self.frames) == len(other.frames)
            and self.timestamps.tobytes() == other.timestamps.tobytes()
            and all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.frames, other.frames))
        )

    __hash__ = None


_HEAD = struct.Struct("<4sHI")  # magic, version, id length


def encode_embedding_archive(seq: EmbeddingSequence) -> bytes:
    sid = seq.sequence_id.encode("utf-8")
    parts = [_HEAD.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, len(sid)), sid, struct.pack("<II", len(seq), seq.dim)]
    for ts, mat in zip(seq.timestamps, seq.frames):
        parts.append(struct.pack("<dI", float(ts), mat.shape[0]))
        parts.append(mat.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def decode_embedding_archive(buf: bytes, where: str = "archive") -> EmbeddingSequence:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveError(f"{where}: truncated while reading {what} (need {n} bytes at offset {pos}, have {len(view) - pos})")
        out = view[pos : pos + n]
        pos += n
        return out

    magic, version, id_len = _HEAD.unpack(take(_HEAD.size, "header"))
    if magic != ARCHIVE_MAGIC:
        raise ArchiveError(f"{where}: bad magic {bytes(magic)!r}, expected {ARCHIVE_MAGIC!r}")
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{where}: unsupported archive version {version}")
    sid = bytes(take(id_len, "sequence id")).decode("utf-8")
    n_frames, dim = struct.unpack("<II", take(8, "frame count"))
    if n_frames < 1 or dim < 1:
        raise ArchiveError(f"{where}: header declares {n_frames} frames of dimension {dim}")
    frames, stamps = [], []
    for n in range(n_frames):
        ts, k = struct.unpack("<dI", take(12, f"frame {n} header"))
        if k < 1:
            raise ArchiveError(f"{where}: frame {n} declares zero embeddings")
        payload = take(4 * k * dim, f"frame {n} payload ({k}x{dim})")
        frames.append(np.frombuffer(payload, dtype="<f4").reshape(k, dim).astype(np.float32))
        stamps.append(ts)
    if pos != len(view):
        raise ArchiveError(f"{where}: {len(view) - pos} trailing bytes after declared payload")
    return EmbeddingSequence(sid, tuple(frames), np.array(stamps, dtype=np.float64))


def write_embedding_archive(seq: EmbeddingSequence, path: str | Path) -> None:
    Path(path).write_bytes(encode_embedding_archive(seq))


def read_embedding_archive(path: str | Path) -> EmbeddingSequence:
    path = Path(path)
    return decode_embedding_archive(path.read_bytes(), where=str(path))


def archive_filename(sequence_id: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in sequence_id)
    return f"{safe}.clae"


def write_embedding_dir(seqs: Iterable[EmbeddingSequence], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in seqs:
        write_embedding_archive(s, out_dir / archive_filename(s.sequence_id))
    return out_dir


def read_embedding_dir(in_dir: str | Path) -> dict[str, EmbeddingSequence]:
    out = {}
    for p in sorted(Path(in_dir).glob("*.clae")):
        seq = read_embedding_archive(p)
        out[seq.sequence_id] = seq
    return out
