"""Time series with one static categorical attribute (the subject id).

Subject ids and labels are 1-based throughout, on disk as well as in memory.
Series are stored time-major (``T x C``); models consume channels-first
batches, see :meth:`Dataset.batch`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
SCENARIOS = ("shared", "subject_flip", "subject_shift")
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """Raised for malformed or inconsistent dataset files and records."""


@dataclass(frozen=True)
class SeriesRecord:
    subject: int
    series: np.ndarray
    label: int


@dataclass(frozen=True)
class ShapePreset:
    name: str
    S: int
    C: int
    T: int
    Y: int
    n_train: int
    n_val: int
    n_test: int

    def __post_init__(self):
        for key in ("S", "C", "T", "Y", "n_train", "n_val", "n_test"):
            if getattr(self, key) < 1:
                raise ValueError(f"preset {self.name!r}: {key} must be positive")

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


PRESETS = {
    "mi": ShapePreset("mi", S=9, C=22, T=438, Y=4, n_train=2268, n_val=324, n_test=2592),
    "ssvep": ShapePreset("ssvep", S=11, C=8, T=128, Y=5, n_train=3300, n_val=1100, n_test=1100),
    "ern": ShapePreset("ern", S=16, C=56, T=160, Y=2, n_train=2880, n_val=960, n_test=1600),
}


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable split: ``series[N,T,C]``, ``subjects[N]``, ``labels[N]``."""

    series: np.ndarray
    subjects: np.ndarray
    labels: np.ndarray
    num_subjects: int
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        series = np.array(self.series, dtype=np.float64)
        subjects = np.array(self.subjects, dtype=np.int64).reshape(-1)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if series.ndim != 3:
            raise DatasetFormatError(f"series must be [N, T, C], got shape {series.shape}")
        n = series.shape[0]
        if subjects.shape[0] != n or labels.shape[0] != n:
            raise DatasetFormatError("series, subjects and labels disagree on the number of records")
        if n and (subjects.min() < 1 or subjects.max() > self.num_subjects):
            raise DatasetFormatError(f"subject ids must lie in 1:{self.num_subjects}")
        if n and (labels.min() < 1 or labels.max() > self.num_classes):
            raise DatasetFormatError(f"labels must lie in 1:{self.num_classes}")
        if not np.isfinite(series).all():
            raise DatasetFormatError("series contain NaN or Inf")
        for arr in (series, subjects, labels):
            arr.setflags(write=False)
        object.__setattr__(self, "series", series)
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_records(cls, records: Sequence[SeriesRecord], num_subjects: int, num_classes: int,
                     split: str = "train", shape: tuple[int, int] | None = None) -> "Dataset":
        if records:
            first = np.asarray(records[0].series).shape
            for r in records:
                if np.asarray(r.series).shape != first:
                    raise DatasetFormatError("all records must share T and C")
            series = np.stack([np.asarray(r.series, dtype=np.float64) for r in records])
        else:
            if shape is None:
                raise DatasetFormatError("empty dataset needs an explicit (T, C) shape")
            series = np.zeros((0,) + tuple(shape))
        return cls(series, [r.subject for r in records], [r.label for r in records],
                   num_subjects, num_classes, split)

    @property
    def records(self) -> list[SeriesRecord]:
        return [SeriesRecord(int(s), x, int(y)) for s, x, y in zip(self.subjects, self.series, self.labels)]

    @property
    def num_timesteps(self) -> int:
        return self.series.shape[1]

    @property
    def num_channels(self) -> int:
        return self.series.shape[2]

    def __len__(self) -> int:
        return self.series.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_subjects == other.num_subjects
            and self.num_classes == other.num_classes
            and self.split == other.split
            and self.series.shape == other.series.shape
            and self.series.tobytes() == other.series.tobytes()
            and np.array_equal(self.subjects, other.subjects)
            and np.array_equal(self.labels, other.labels)
        )

    def batch(self, index) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(subjects, x[B,C,T], labels)`` for the given record indices."""
        x = np.ascontiguousarray(self.series[index].transpose(0, 2, 1))
        return self.subjects[index], x, self.labels[index]

    def select(self, mask) -> "Dataset":
        return Dataset(self.series[mask], self.subjects[mask], self.labels[mask],
                       self.num_subjects, self.num_classes, self.split)

    def for_subject(self, subject: int) -> "Dataset":
        return self.select(self.subjects == subject)

    def present_subjects(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subjects))


def check_compatible(splits: Iterable[Dataset]) -> None:
    splits = list(splits)
    ref = splits[0]
    for d in splits[1:]:
        if (d.num_subjects, d.num_channels, d.num_timesteps, d.num_classes) != (
            ref.num_subjects, ref.num_channels, ref.num_timesteps, ref.num_classes
        ):
            raise DatasetFormatError("splits disagree on S, C, T or Y")


# --------------------------------------------------------------------------
# static attribute encodings
# --------------------------------------------------------------------------

def encode_subject_alpha(i: int, S: int, alpha: float) -> np.ndarray:
    """Softened one-hot: 1 at position ``i`` (1-based), ``alpha`` everywhere else."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if not 1 <= i <= S:
        raise ValueError(f"subject id {i} outside 1:{S}")
    out = np.full(S, float(alpha))
    out[i - 1] = 1.0
    return out


def encode_subjects_alpha(subjects, S: int, alpha: float) -> np.ndarray:
    """Row-wise :func:`encode_subject_alpha` for an array of subject ids -> ``[B,S]``."""
    subjects = np.asarray(subjects, dtype=np.int64).reshape(-1)
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if subjects.size and (subjects.min() < 1 or subjects.max() > S):
        raise ValueError(f"subject ids must lie in 1:{S}")
    out = np.full((subjects.size, S), float(alpha))
    out[np.arange(subjects.size), subjects - 1] = 1.0
    return out


def broadcast_static(static, series) -> np.ndarray:
    """Append the static vector as ``k`` constant channels: ``T x C -> T x (C+k)``."""
    static = np.asarray(static, dtype=np.float64).reshape(-1)
    series = np.asarray(series, dtype=np.float64)
    if static.size < 1:
        raise ValueError("static vector must have at least one component")
    if series.ndim != 2:
        raise ValueError(f"series must be a T x C matrix, got shape {series.shape}")
    const = np.broadcast_to(static, (series.shape[0], static.size))
    return np.concatenate([series, const], axis=1)


# --------------------------------------------------------------------------
# on-disk format: <dir>/meta.json + <dir>/data.bin
# --------------------------------------------------------------------------

def _record_dtype(T: int, C: int) -> np.dtype:
    return np.dtype([("subject", "<u4"), ("label", "<u4"), ("series", "<f8", (T, C))])


def save_dataset(dataset: Dataset, path) -> None:
    os.makedirs(path, exist_ok=True)
    T, C = dataset.num_timesteps, dataset.num_channels
    meta = {
        "version": FORMAT_VERSION,
        "S": dataset.num_subjects,
        "C": C,
        "T": T,
        "Y": dataset.num_classes,
        "split": dataset.split,
        "count": len(dataset),
        "dtype": "f64",
        "byte_order": "little",
    }
    rec = np.empty(len(dataset), dtype=_record_dtype(T, C))
    rec["subject"] = dataset.subjects
    rec["label"] = dataset.labels
    rec["series"] = dataset.series
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(path, "data.bin"), "wb") as f:
        f.write(rec.tobytes())


def load_dataset(path) -> Dataset:
    meta_path = os.path.join(path, "meta.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise DatasetFormatError(f"no meta.json in {path}") from None
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"malformed meta.json in {path}: {e}") from None
    if not isinstance(meta, dict):
        raise DatasetFormatError("meta.json must hold an object")
    required = ("version", "S", "C", "T", "Y", "split", "count", "dtype", "byte_order")
    missing = [k for k in required if k not in meta]
    if missing:
        raise DatasetFormatError(f"meta.json missing keys: {', '.join(missing)}")
    if meta["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {meta['version']!r}")
    if meta["dtype"] != "f64" or meta["byte_order"] != "little":
        raise DatasetFormatError("only dtype f64 with little byte order is supported")
    for key in ("S", "C", "T", "Y"):
        if not isinstance(meta[key], int) or meta[key] < 1:
            raise DatasetFormatError(f"meta.json: {key} must be a positive integer")
    if not isinstance(meta["count"], int) or meta["count"] < 0:
        raise DatasetFormatError("meta.json: count must be a non-negative integer")
    dtype = _record_dtype(meta["T"], meta["C"])
    try:
        with open(os.path.join(path, "data.bin"), "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise DatasetFormatError(f"no data.bin in {path}") from None
    expected = meta["count"] * dtype.itemsize
    if len(raw) != expected:
        raise DatasetFormatError(
            f"data.bin holds {len(raw)} bytes, expected {expected} for {meta['count']} records of T={meta['T']}, C={meta['C']}"
        )
    rec = np.frombuffer(raw, dtype=dtype)
    return Dataset(rec["series"].astype(np.float64), rec["subject"].astype(np.int64),
                   rec["label"].astype(np.int64), meta["S"], meta["Y"], meta["split"])


def save_splits(splits: dict, root) -> None:
    for name, ds in splits.items():
        save_dataset(ds, os.path.join(root, name))


def load_splits(root) -> dict:
    out = {}
    for name in SPLITS:
        path = os.path.join(root, name)
        if not os.path.isdir(path):
            raise DatasetFormatError(f"missing split directory {path}")
        out[name] = load_dataset(path)
    check_compatible(out.values())
    return out


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDesign:
    """The fixed ingredients behind a synthetic bundle, kept for oracles."""

    templates: np.ndarray            # [Y, T, C]
    flipped_subjects: tuple          # subjects whose label->template map is shifted
    offsets: np.ndarray = field(repr=False)  # [S, C], zero unless subject_shift

    def template_index(self, subject: int, label: int) -> int:
        """1-based template used to render ``label`` for ``subject``."""
        Y = self.templates.shape[0]
        return label % Y + 1 if subject in self.flipped_subjects else label


def flipped_subjects(S: int) -> tuple:
    """Even-numbered subjects are flipped: ``floor(S/2)`` of them."""
    return tuple(range(2, S + 1, 2))


def synthetic_design(preset: ShapePreset, scenario: str, rng: np.random.Generator) -> SyntheticDesign:
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    S, C, T, Y = preset.S, preset.C, preset.T, preset.Y
    t = np.arange(T)
    templates = np.zeros((Y, T, C))
    n_active = max(1, C // 2)
    for k in range(Y):
        # class k: 2k+3 cycles per window on a fixed random half of the channels
        wave = np.sin(2.0 * np.pi * (2 * k + 3) * t / T)
        chans = rng.choice(C, size=n_active, replace=False)
        templates[k][:, chans] = wave[:, None]
    offsets = rng.normal(0.0, 1.0, size=(S, C))
    if scenario != "subject_shift":
        offsets = np.zeros((S, C))
    flipped = flipped_subjects(S) if scenario == "subject_flip" else ()
    return SyntheticDesign(templates, flipped, offsets)


def _render_split(preset, design, n, noise_sigma, split, rng) -> Dataset:
    S, Y = preset.S, preset.Y
    subjects = np.arange(n) % S + 1
    labels = (np.arange(n) // S) % Y + 1
    order = rng.permutation(n)
    subjects, labels = subjects[order], labels[order]
    tmpl = np.array([design.template_index(int(s), int(y)) for s, y in zip(subjects, labels)], dtype=np.int64)
    series = design.templates[tmpl - 1] + design.offsets[subjects - 1][:, None, :]
    series = series + noise_sigma * rng.standard_normal(series.shape)
    return Dataset(series, subjects, labels, S, Y, split)


def generate_synthetic(preset: ShapePreset, scenario: str = "shared", noise_sigma: float = 0.3,
                       seed: int = 0, return_design: bool = False):
    """Generate ``{"train", "val", "test"}`` datasets with the preset's split sizes.

    Records are assigned to subjects round-robin and labels are balanced
    within each subject, so for ``subject_flip`` each template carries each
    label equally often whenever the split size is a multiple of ``S * Y``.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    design = synthetic_design(preset, scenario, rng)
    splits = {name: _render_split(preset, design, preset.split_size(name), noise_sigma, name, rng)
              for name in SPLITS}
    return (splits, design) if return_design else splits
