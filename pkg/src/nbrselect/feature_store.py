"""Prediction dumps, labels and manifests: binary formats, CSV import, validation.

All binary files are little-endian. Probabilities are stored as float32 on disk
and promoted to float64 in memory; the promotion is exact, so writing a loaded
matrix back reproduces the original payload byte for byte.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

PathLike = Union[str, Path]

PROB_MAGIC = b"PRB1"
LOGIT_MAGIC = b"LGT1"
LABEL_MAGIC = b"LBL1"
SEG_MAGIC = b"SEG1"

PROB_ROW_ATOL = 1e-4
SEG_ROW_ATOL = 1e-3

TASKS = ("classification", "segmentation", "source_selection")


class DumpFormatError(ValueError):
    """Malformed file: bad magic, truncated header or payload size mismatch."""


class DumpValidationError(ValueError):
    """Well-formed file whose contents violate an invariant."""


class ManifestError(ValueError):
    """Manifest is unreadable as a manifest or references bad dumps."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _check_prob_rows(rows: np.ndarray, atol: float, what: str) -> None:
    if not np.isfinite(rows).all():
        bad = int(np.argwhere(~np.isfinite(rows))[0, 0])
        raise DumpValidationError(f"{what}: non-finite value in row {bad}")
    if rows.min() < 0.0 or rows.max() > 1.0:
        bad = int(np.argwhere((rows < 0.0) | (rows > 1.0))[0, 0])
        raise DumpValidationError(f"{what}: entry outside [0, 1] in row {bad}")
    sums = rows.sum(axis=1)
    dev = np.abs(sums - 1.0)
    worst = int(np.argmax(dev))
    if dev[worst] > atol:
        raise DumpValidationError(
            f"{what}: row {worst} sums to {sums[worst]:.8g} (tolerance {atol:g})"
        )


@dataclass(frozen=True)
class ProbMatrix:
    """N x C per-sample class probabilities."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise DumpValidationError(f"probability matrix must be 2-D, got shape {rows.shape}")
        if rows.shape[0] < 1 or rows.shape[1] < 2:
            raise DumpValidationError(
                f"need n_samples >= 1 and n_classes >= 2, got {rows.shape}"
            )
        _check_prob_rows(rows, PROB_ROW_ATOL, "probability matrix")
        object.__setattr__(self, "rows", _frozen(rows))

    @property
    def n_samples(self) -> int:
        return self.rows.shape[0]

    @property
    def n_classes(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class LogitMatrix:
    """N x C raw classifier outputs (before softmax)."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise DumpValidationError(f"logit matrix must be non-empty 2-D, got shape {rows.shape}")
        if not np.isfinite(rows).all():
            bad = int(np.argwhere(~np.isfinite(rows))[0, 0])
            raise DumpValidationError(f"logit matrix: non-finite value in row {bad}")
        object.__setattr__(self, "rows", _frozen(rows))

    @property
    def n_samples(self) -> int:
        return self.rows.shape[0]

    @property
    def n_classes(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class LabelVector:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise DumpValidationError("labels must be 1-D")
        if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0):
            raise DumpValidationError("labels must be non-negative integers")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    def check_against(self, n_samples: int, n_classes: int) -> None:
        if self.n_samples != n_samples:
            raise DumpValidationError(
                f"label count {self.n_samples} does not match {n_samples} samples"
            )
        if self.n_samples and self.labels.max() >= n_classes:
            bad = int(np.argmax(self.labels >= n_classes))
            raise DumpValidationError(
                f"label {self.labels[bad]} at index {bad} out of range for {n_classes} classes"
            )


@dataclass(frozen=True)
class SegmentationDump:
    """Per-image pixel probabilities, each image stored as an (h, w, c) array."""

    images: tuple

    def __post_init__(self):
        images = []
        n_classes = None
        for k, img in enumerate(self.images):
            img = np.asarray(img, dtype=np.float64)
            if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1 or img.shape[2] < 2:
                raise DumpValidationError(f"image {k}: expected (h, w, c>=2), got {img.shape}")
            if n_classes is None:
                n_classes = img.shape[2]
            elif img.shape[2] != n_classes:
                raise DumpValidationError(
                    f"image {k}: {img.shape[2]} classes, expected {n_classes}"
                )
            _check_prob_rows(img.reshape(-1, img.shape[2]), SEG_ROW_ATOL, f"image {k}")
            images.append(_frozen(img))
        if not images:
            raise DumpValidationError("segmentation dump has no images")
        object.__setattr__(self, "images", tuple(images))

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return self.images[0].shape[2]

    def pixel_rows(self, index: int) -> np.ndarray:
        img = self.images[index]
        return img.reshape(-1, img.shape[2])


# --- binary I/O ---------------------------------------------------------------


def _read_matrix_payload(path: PathLike, magic: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise DumpFormatError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != magic:
        raise DumpFormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    n, c = struct.unpack_from("<II", data, 4)
    expected = 12 + 4 * n * c
    if len(data) != expected:
        raise DumpFormatError(
            f"{path}: header says {n}x{c} ({expected} bytes) but file has {len(data)} bytes"
        )
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(n, c)


def _write_matrix(path: PathLike, magic: bytes, rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    n, c = rows.shape
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<II", n, c))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def load_prob_matrix(path: PathLike) -> ProbMatrix:
    """Load and validate a probability dump (``PRB1`` binary, or ``.csv``)."""
    if Path(path).suffix.lower() == ".csv":
        return load_prob_matrix_csv(path)
    payload = _read_matrix_payload(path, PROB_MAGIC)
    try:
        return ProbMatrix(payload.astype(np.float64))
    except DumpValidationError as exc:
        raise DumpValidationError(f"{path}: {exc}") from None


def write_prob_matrix(path: PathLike, probs: ProbMatrix) -> None:
    _write_matrix(path, PROB_MAGIC, probs.rows)


def load_logit_matrix(path: PathLike) -> LogitMatrix:
    payload = _read_matrix_payload(path, LOGIT_MAGIC)
    try:
        return LogitMatrix(payload.astype(np.float64))
    except DumpValidationError as exc:
        raise DumpValidationError(f"{path}: {exc}") from None


def write_logit_matrix(path: PathLike, logits: LogitMatrix) -> None:
    _write_matrix(path, LOGIT_MAGIC, logits.rows)


def load_labels(path: PathLike) -> LabelVector:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != LABEL_MAGIC:
        raise DumpFormatError(f"{path}: not a label file (magic {data[:4]!r})")
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 4 * n:
        raise DumpFormatError(f"{path}: header says {n} labels but payload is {len(data) - 8} bytes")
    return LabelVector(np.frombuffer(data, dtype="<u4", offset=8).astype(np.int64))


def write_labels(path: PathLike, labels: LabelVector) -> None:
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC + struct.pack("<I", labels.n_samples))
        fh.write(labels.labels.astype("<u4").tobytes())


def load_segmentation(path: PathLike) -> SegmentationDump:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != SEG_MAGIC:
        raise DumpFormatError(f"{path}: not a segmentation dump (magic {data[:4]!r})")
    (n_images,) = struct.unpack_from("<I", data, 4)
    offset = 8
    images = []
    for k in range(n_images):
        if len(data) < offset + 12:
            raise DumpFormatError(f"{path}: truncated header for image {k}")
        h, w, c = struct.unpack_from("<III", data, offset)
        offset += 12
        size = 4 * h * w * c
        if len(data) < offset + size:
            raise DumpFormatError(f"{path}: truncated payload for image {k}")
        img = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=offset)
        images.append(img.reshape(h, w, c).astype(np.float64))
        offset += size
    if offset != len(data):
        raise DumpFormatError(f"{path}: {len(data) - offset} trailing bytes")
    try:
        return SegmentationDump(tuple(images))
    except DumpValidationError as exc:
        raise DumpValidationError(f"{path}: {exc}") from None


def write_segmentation(path: PathLike, dump: SegmentationDump) -> None:
    with open(path, "wb") as fh:
        fh.write(SEG_MAGIC + struct.pack("<I", dump.n_images))
        for img in dump.images:
            fh.write(struct.pack("<III", *img.shape))
            fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def load_prob_matrix_csv(path: PathLike) -> ProbMatrix:
    """Read a probability table with header ``c0,c1,...,c{C-1}``.

    Values are rounded to float32 on the way in so that a CSV and its binary
    conversion load to the same matrix.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DumpFormatError(f"{path}: empty CSV")
        header = [h.strip() for h in header]
        if header != [f"c{k}" for k in range(len(header))]:
            raise DumpFormatError(f"{path}: header must be c0..c{{C-1}}, got {header[:4]}...")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DumpFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                rows.append([float(v) for v in rec])
            except ValueError:
                raise DumpFormatError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise DumpFormatError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float32).astype(np.float64)
    try:
        return ProbMatrix(arr)
    except DumpValidationError as exc:
        raise DumpValidationError(f"{path}: {exc}") from None


def load_logit_matrix_csv(path: PathLike) -> LogitMatrix:
    """Logit table with the same ``c0..c{C-1}`` header as probability CSVs."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DumpFormatError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    if header != [f"c{k}" for k in range(len(header))]:
        raise DumpFormatError(f"{path}: header must be c0..c{{C-1}}, got {header[:4]}...")
    if len(rows) < 2:
        raise DumpFormatError(f"{path}: no data rows")
    if any(len(r) != len(header) for r in rows[1:]):
        raise DumpFormatError(f"{path}: ragged rows")
    try:
        arr = np.asarray(rows[1:], dtype=np.float64).astype(np.float32).astype(np.float64)
    except ValueError:
        raise DumpFormatError(f"{path}: non-numeric field") from None
    try:
        return LogitMatrix(arr)
    except DumpValidationError as exc:
        raise DumpValidationError(f"{path}: {exc}") from None


def write_prob_matrix_csv(path: PathLike, probs: ProbMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"c{k}" for k in range(probs.n_classes)])
        for row in probs.rows.astype(np.float32):
            writer.writerow([repr(float(v)) for v in row])


# --- manifests ----------------------------------------------------------------


@dataclass(frozen=True)
class CheckpointRecord:
    run_id: str
    iteration: int
    target_probs_path: Path
    hyperparams: dict = field(default_factory=dict)
    source_val_probs_path: Optional[Path] = None
    source_val_labels_path: Optional[Path] = None
    target_logits_path: Optional[Path] = None

    @property
    def key(self) -> tuple[str, int]:
        return (self.run_id, self.iteration)


@dataclass(frozen=True)
class Checkpoint:
    """A manifest entry with its dumps loaded."""

    record: CheckpointRecord
    target_probs: Union[ProbMatrix, SegmentationDump]  # SegmentationDump for segmentation manifests
    source_val_probs: Optional[ProbMatrix] = None
    source_val_labels: Optional[LabelVector] = None
    target_logits: Optional[LogitMatrix] = None


@dataclass(frozen=True)
class Manifest:
    task: str
    n_classes: int
    checkpoints: tuple

    def __len__(self) -> int:
        return len(self.checkpoints)


def _resolve(base: Path, value) -> Optional[Path]:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _load_checkpoint(rec: CheckpointRecord, n_classes: int, task: str) -> Checkpoint:
    where = f"checkpoint ({rec.run_id!r}, {rec.iteration})"

    def need(path: Path) -> Path:
        if not path.exists():
            raise ManifestError(f"{where}: missing file {path}")
        return path

    try:
        if task == "segmentation":
            if rec.target_logits_path is not None:
                raise ManifestError(f"{where}: target_logits are not supported for segmentation")
            probs = load_segmentation(need(rec.target_probs_path))
        else:
            probs = load_prob_matrix(need(rec.target_probs_path))
        src_probs = src_labels = logits = None
        if rec.source_val_probs_path is not None:
            src_probs = load_prob_matrix(need(rec.source_val_probs_path))
        if rec.source_val_labels_path is not None:
            src_labels = load_labels(need(rec.source_val_labels_path))
        if rec.target_logits_path is not None:
            logits = load_logit_matrix(need(rec.target_logits_path))
    except (DumpFormatError, DumpValidationError) as exc:
        raise ManifestError(f"{where}: {exc}") from None

    for name, m in (("target_probs", probs), ("source_val_probs", src_probs), ("target_logits", logits)):
        if m is not None and m.n_classes != n_classes:
            raise ManifestError(
                f"{where}: {name} has {m.n_classes} classes, manifest declares {n_classes}"
            )
    if logits is not None and logits.n_samples != probs.n_samples:
        raise ManifestError(f"{where}: target_logits rows differ from target_probs rows")
    if (src_probs is None) != (src_labels is None):
        raise ManifestError(f"{where}: source_val_probs and source_val_labels must be given together")
    if src_labels is not None:
        try:
            src_labels.check_against(src_probs.n_samples, n_classes)
        except DumpValidationError as exc:
            raise ManifestError(f"{where}: {exc}") from None
    return Checkpoint(rec, probs, src_probs, src_labels, logits)


def load_manifest(path: PathLike) -> Manifest:
    """Parse a JSON manifest and eagerly load every dump it references.

    Relative dump paths are resolved against the manifest's directory. For
    ``task: segmentation`` each ``target_probs`` is a SEG1 file.
    """
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be an object")
    for key in ("task", "n_classes", "checkpoints"):
        if key not in doc:
            raise ManifestError(f"{path}: missing field {key!r}")
    task = doc["task"]
    if task not in TASKS:
        raise ManifestError(f"{path}: unknown task {task!r}; expected one of {TASKS}")
    n_classes = doc["n_classes"]
    if not isinstance(n_classes, int) or n_classes < 2:
        raise ManifestError(f"{path}: n_classes must be an integer >= 2")
    entries = doc["checkpoints"]
    if not isinstance(entries, list) or not entries:
        raise ManifestError(f"{path}: checkpoints must be a non-empty list")

    base = path.parent
    seen = set()
    checkpoints = []
    for k, e in enumerate(entries):
        try:
            rec = CheckpointRecord(
                run_id=str(e["run_id"]),
                iteration=int(e["iteration"]),
                target_probs_path=_resolve(base, e["target_probs"]),
                hyperparams={str(h): float(v) for h, v in e.get("hyperparams", {}).items()},
                source_val_probs_path=_resolve(base, e.get("source_val_probs")),
                source_val_labels_path=_resolve(base, e.get("source_val_labels")),
                target_logits_path=_resolve(base, e.get("target_logits")),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ManifestError(f"{path}: checkpoint entry {k} malformed ({exc!r})") from None
        if rec.iteration < 0:
            raise ManifestError(f"{path}: checkpoint entry {k} has negative iteration")
        if rec.key in seen:
            raise ManifestError(
                f"{path}: duplicate checkpoint (run_id={rec.run_id!r}, iteration={rec.iteration})"
            )
        seen.add(rec.key)
        checkpoints.append(_load_checkpoint(rec, n_classes, task))
    return Manifest(task=task, n_classes=n_classes, checkpoints=tuple(checkpoints))


def write_manifest(path: PathLike, task: str, n_classes: int, entries: list[dict]) -> None:
    """Write a manifest document; ``entries`` use the on-disk field names."""
    doc = {"task": task, "n_classes": n_classes, "checkpoints": entries}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
