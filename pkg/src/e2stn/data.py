"""Trial containers, on-disk formats, the synthetic two-domain generator and the cross-dataset protocol.

Binary trial file (little-endian)::

    b"EEGF"  u16 version  u32 C  u32 B
    repeated: u32 subject_id  u16 label  C*B f64 (row-major, channel-major)

Each data file has a JSON sidecar manifest describing names, subjects and
the record index of every trial.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import make_rng

MAGIC = b"EEGF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")

CANONICAL_CLASSES = ("neutral", "sad", "happy", "fear")
ALIASES = {"joy": "happy", "happiness": "happy", "neutrality": "neutral", "sadness": "sad", "fearful": "fear"}
THREE_CLASS = ("neutral", "sad", "happy")
FOUR_CLASS = ("neutral", "sad", "happy", "fear")


class DataFormatError(ValueError):
    """A dataset file or manifest is malformed."""


class ProtocolError(ValueError):
    """Datasets cannot be aligned under the requested protocol."""


class LabelAccessError(AssertionError):
    """Target-domain labels were requested on a training code path."""


def canonical_name(name: str) -> str:
    key = name.strip().lower()
    return ALIASES.get(key, key)


@dataclass
class TrialSet:
    """Labelled trials of one dataset held in memory."""

    x: np.ndarray  # (N, C, B)
    labels: np.ndarray  # (N,) int
    subjects: np.ndarray  # (N,) int
    name: str = "dataset"
    channel_names: list[str] = field(default_factory=list)
    band_names: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        n, c, b = self.x.shape
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(c)]
        if not self.band_names:
            self.band_names = [f"band{i}" for i in range(b)]
        if len(self.labels) != n or len(self.subjects) != n:
            raise DataFormatError("labels/subjects length does not match trial count")
        if len(self.channel_names) != c or len(self.band_names) != b:
            raise DataFormatError("channel/band names do not match the trial shape")
        if not np.all(np.isfinite(self.x)):
            raise DataFormatError(f"{self.name}: non-finite trial values")
        if self.class_names and n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataFormatError(f"{self.name}: label outside [0, {len(self.class_names)})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape[1], self.x.shape[2]

    @property
    def subject_ids(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subjects))

    def subset(self, mask: np.ndarray) -> TrialSet:
        return TrialSet(self.x[mask], self.labels[mask], self.subjects[mask], self.name,
                        list(self.channel_names), list(self.band_names), list(self.class_names))


class UnlabeledPool:
    """Target-domain trials with labels withheld. Reading ``labels`` raises."""

    __slots__ = ("x", "subject")

    def __init__(self, x: np.ndarray, subject: int):
        self.x = np.asarray(x, dtype=np.float64)
        self.subject = int(subject)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def labels(self):
        raise LabelAccessError("target-domain labels are not available during training")


# ---------------------------------------------------------------------------
# binary format
# ---------------------------------------------------------------------------

def _record_dtype(c: int, b: int) -> np.dtype:
    return np.dtype([("subject", "<u4"), ("label", "<u2"), ("x", "<f8", (c, b))])


@dataclass
class DatasetManifest:
    name: str
    channel_names: list[str]
    band_names: list[str]
    class_names: list[str]
    subject_ids: list[int]
    trials: dict[str, list[int]]
    data_file: str
    format_version: int = FORMAT_VERSION

    @property
    def trial_count(self) -> int:
        return sum(len(v) for v in self.trials.values())

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_file(cls, path: Path) -> DatasetManifest:
        try:
            d = json.loads(Path(path).read_text())
            return cls(**d)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise DataFormatError(f"{path}: unreadable manifest ({exc})") from exc


def write_dataset(trials: TrialSet, directory: str | Path, stem: str | None = None) -> Path:
    """Write ``<stem>.eegf`` plus ``<stem>.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or trials.name
    c, b = trials.shape
    rec = np.zeros(len(trials), dtype=_record_dtype(c, b))
    rec["subject"] = trials.subjects
    rec["label"] = trials.labels
    rec["x"] = trials.x
    data_path = directory / f"{stem}.eegf"
    with open(data_path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, c, b))
        fh.write(rec.tobytes())
    index: dict[str, list[int]] = {}
    for i, s in enumerate(trials.subjects):
        index.setdefault(str(int(s)), []).append(i)
    manifest = DatasetManifest(trials.name, list(trials.channel_names), list(trials.band_names),
                               list(trials.class_names), trials.subject_ids, index, data_path.name)
    manifest_path = directory / f"{stem}.json"
    manifest_path.write_text(manifest.to_json())
    return manifest_path


class Dataset:
    """An opened dataset: manifest plus lazy access to the trial records."""

    def __init__(self, manifest: DatasetManifest, data_path: Path):
        self.manifest = manifest
        self.data_path = data_path
        c, b = len(manifest.channel_names), len(manifest.band_names)
        self.dtype = _record_dtype(c, b)
        self._count = self._check_header()

    def _check_header(self) -> int:
        path = self.data_path
        try:
            size = path.stat().st_size
            with open(path, "rb") as fh:
                head = fh.read(_HEADER.size)
        except OSError as exc:
            raise DataFormatError(f"{path}: cannot read data file ({exc})") from exc
        if len(head) < _HEADER.size:
            raise DataFormatError(f"{path}: truncated header")
        magic, version, c, b = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DataFormatError(f"{path}: bad magic bytes {magic!r}")
        if version != FORMAT_VERSION:
            raise DataFormatError(f"{path}: unsupported format version {version}")
        if (c, b) != (len(self.manifest.channel_names), len(self.manifest.band_names)):
            raise DataFormatError(f"{path}: header shape {(c, b)} disagrees with manifest")
        body = size - _HEADER.size
        if body % self.dtype.itemsize:
            raise DataFormatError(f"{path}: truncated record at trial {body // self.dtype.itemsize}")
        count = body // self.dtype.itemsize
        if count != self.manifest.trial_count:
            raise DataFormatError(f"{path}: {count} trials on disk, manifest lists {self.manifest.trial_count}")
        return count

    def __len__(self) -> int:
        return self._count

    def _validate(self, i: int, subject: int, label: int, x: np.ndarray) -> None:
        if label >= len(self.manifest.class_names):
            raise DataFormatError(f"{self.data_path}: trial {i} has unknown label {label}")
        if not np.all(np.isfinite(x)):
            raise DataFormatError(f"{self.data_path}: trial {i} contains non-finite values")

    def iter_trials(self) -> Iterator[tuple[np.ndarray, int, int]]:
        """Stream ``(x, label, subject)`` one record at a time."""
        with open(self.data_path, "rb") as fh:
            fh.seek(_HEADER.size)
            for i in range(self._count):
                buf = fh.read(self.dtype.itemsize)
                if len(buf) < self.dtype.itemsize:
                    raise DataFormatError(f"{self.data_path}: truncated record at trial {i}")
                rec = np.frombuffer(buf, dtype=self.dtype)[0]
                x = np.array(rec["x"], dtype=np.float64)
                self._validate(i, int(rec["subject"]), int(rec["label"]), x)
                yield x, int(rec["label"]), int(rec["subject"])

    def load(self) -> TrialSet:
        rec = np.fromfile(self.data_path, dtype=self.dtype, offset=_HEADER.size)
        x = rec["x"].astype(np.float64)
        labels = rec["label"].astype(np.int64)
        bad = np.flatnonzero(labels >= len(self.manifest.class_names))
        if bad.size:
            raise DataFormatError(f"{self.data_path}: trial {bad[0]} has unknown label {labels[bad[0]]}")
        nonfinite = np.flatnonzero(~np.isfinite(x).all(axis=(1, 2)))
        if nonfinite.size:
            raise DataFormatError(f"{self.data_path}: trial {nonfinite[0]} contains non-finite values")
        subjects = rec["subject"].astype(np.int64)
        for subj, idx in self.manifest.trials.items():
            if idx and not np.all(subjects[np.asarray(idx)] == int(subj)):
                raise DataFormatError(f"{self.data_path}: manifest index for subject {subj} is inconsistent")
        m = self.manifest
        return TrialSet(x, labels, subjects, m.name, list(m.channel_names), list(m.band_names), list(m.class_names))


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.from_file(manifest_path)
    return Dataset(manifest, manifest_path.parent / manifest.data_file)


def import_csv(path: str | Path, name: str, bands: int, class_names: Sequence[str],
               channel_names: Sequence[str] | None = None, band_names: Sequence[str] | None = None) -> TrialSet:
    """Read ``subject,label,c0b0,c0b1,...`` rows (channel-major feature columns)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty CSV") from None
        rows = [r for r in reader if r]
    if header[:2] != ["subject", "label"]:
        raise DataFormatError(f"{path}: header must start with 'subject,label'")
    feats = header[2:]
    if not feats or len(feats) % bands:
        raise DataFormatError(f"{path}: {len(feats)} feature columns is not a multiple of {bands} bands")
    channels = len(feats) // bands
    expected = [f"c{c}b{b}" for c in range(channels) for b in range(bands)]
    if feats != expected:
        raise DataFormatError(f"{path}: feature columns must be {expected[0]}..{expected[-1]} in channel-major order")
    try:
        arr = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(len(rows), len(header))
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric cell ({exc})") from exc
    return TrialSet(arr[:, 2:].reshape(-1, channels, bands), arr[:, 1].astype(np.int64), arr[:, 0].astype(np.int64),
                    name, list(channel_names or []), list(band_names or []), list(class_names))


# ---------------------------------------------------------------------------
# synthetic two-domain benchmark
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    channels: int = 16
    bands: int = 5
    classes: int = 3
    subjects: int = 5
    trials_per_class: int = 60
    baseline_scale: float = 1.0  # class-independent per-electrode profile shared by every class pattern
    pattern_scale: float = 0.05
    class_margin: float = 0.0
    noise: float = 0.2
    jitter: float = 0.04
    gain_range: tuple[float, float] = (0.5, 2.0)
    offset_range: tuple[float, float] = (-1.0, 1.0)
    shift: bool = True  # False gives two statistically identical domains

    def validate(self) -> None:
        if min(self.channels, self.bands, self.classes, self.subjects, self.trials_per_class) < 1:
            raise ValueError("synthetic dimensions must be positive")
        if self.shift and self.gain_range[0] <= 0:
            raise ValueError("channel gains must be positive")


def _class_patterns(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    base = rng.normal(0.0, spec.baseline_scale, size=(spec.channels, spec.bands))
    for _ in range(1000):
        m = base + rng.normal(0.0, spec.pattern_scale, size=(spec.classes, spec.channels, spec.bands))
        d = np.linalg.norm(m[:, None] - m[None, :], axis=(2, 3))
        if spec.classes == 1 or d[np.triu_indices(spec.classes, 1)].min() >= spec.class_margin:
            return m
    raise ValueError("could not draw class patterns satisfying the margin; lower class_margin")


def _domain(spec, patterns, gain, offset, rng, name, subject_base) -> TrialSet:
    xs, ys, ss = [], [], []
    styled = gain[None, :, None] * patterns + offset[None, :, None]
    for s in range(spec.subjects):
        jit = rng.normal(0.0, spec.jitter, size=(spec.channels, spec.bands))
        for k in range(spec.classes):
            noise = rng.normal(0.0, spec.noise, size=(spec.trials_per_class, spec.channels, spec.bands))
            xs.append(styled[k] + jit + noise)
            ys.append(np.full(spec.trials_per_class, k))
            ss.append(np.full(spec.trials_per_class, subject_base + s))
    names = list(THREE_CLASS if spec.classes == 3 else FOUR_CLASS[:spec.classes]) \
        if spec.classes <= 4 else [f"class{k}" for k in range(spec.classes)]
    return TrialSet(np.concatenate(xs), np.concatenate(ys), np.concatenate(ss), name,
                    [f"ch{c}" for c in range(spec.channels)], [f"band{b}" for b in range(spec.bands)], names)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[TrialSet, TrialSet]:
    """Source and target datasets sharing class patterns, the target with a per-channel affine style."""
    spec.validate()
    rng = make_rng(seed, "synthetic")
    patterns = _class_patterns(spec, rng)
    ones, zeros = np.ones(spec.channels), np.zeros(spec.channels)
    if spec.shift:
        gain = rng.uniform(*spec.gain_range, size=spec.channels)
        offset = rng.uniform(*spec.offset_range, size=spec.channels)
    else:
        gain, offset = ones, zeros
    source = _domain(spec, patterns, ones, zeros, rng, "synthetic-source", 0)
    target = _domain(spec, patterns, gain, offset, rng, "synthetic-target", 100)
    return source, target


# ---------------------------------------------------------------------------
# cross-dataset protocol
# ---------------------------------------------------------------------------

@dataclass
class ProtocolSpec:
    classes: tuple[str, ...] = THREE_CLASS
    target_subjects: list[int] | None = None  # None means every subject of the target dataset

    def validate(self) -> None:
        names = [canonical_name(c) for c in self.classes]
        if len(set(names)) != len(names):
            raise ProtocolError("duplicate classes in protocol")
        unknown = set(names) - set(CANONICAL_CLASSES)
        if unknown:
            raise ProtocolError(f"classes {sorted(unknown)} are not canonical emotion labels")


@dataclass
class Fold:
    target_subject: int
    source: TrialSet
    target_pool: UnlabeledPool
    target_eval: TrialSet


def align_classes(trials: TrialSet, classes: Sequence[str]) -> TrialSet:
    """Keep trials of ``classes`` and relabel them by position in ``classes``."""
    wanted = [canonical_name(c) for c in classes]
    names = [canonical_name(c) for c in trials.class_names]
    missing = [c for c in wanted if c not in names]
    if missing:
        raise ProtocolError(f"{trials.name}: classes {missing} missing (has {trials.class_names})")
    remap = np.full(len(names), -1, dtype=np.int64)
    for new, c in enumerate(wanted):
        remap[names.index(c)] = new
    new_labels = remap[trials.labels]
    keep = new_labels >= 0
    out = trials.subset(keep)
    out.labels = new_labels[keep]
    out.class_names = list(wanted)
    return out


def build_protocol(spec: ProtocolSpec, source: TrialSet, target: TrialSet) -> Iterator[Fold]:
    """One fold per target subject: all class-filtered source trials vs that subject's trials."""
    spec.validate()
    if source.shape != target.shape:
        raise ProtocolError(f"source shape {source.shape} differs from target shape {target.shape}")
    src = align_classes(source, spec.classes)
    tgt = align_classes(target, spec.classes)
    subjects = spec.target_subjects if spec.target_subjects is not None else tgt.subject_ids
    for subj in subjects:
        mask = tgt.subjects == subj
        if not mask.any():
            raise ProtocolError(f"target subject {subj} has no trials in the selected classes")
        held = tgt.subset(mask)
        yield Fold(int(subj), src, UnlabeledPool(held.x, subj), held)
