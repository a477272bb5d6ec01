"""Writer/BMI bookkeeping, manifest CSVs and the stratified split.

Each writer is one class; the class carries that writer's BMI. Manifest
image paths are stored relative to the manifest file's directory.
"""
from __future__ import annotations

import csv
import os
import logging
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import VARIANTS
from .exceptions import (BMIMismatchWarning, ManifestError, RangeError, ShapeError,
                         StratificationWarning, ValidationError)
from .tensor import RngStream

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["image_path", "writer_id", "char_label", "repetition", "split"]
WRITER_HEADER = ["writer_id", "height_m", "weight_kg", "bmi"]
SPLITS = ("train", "val", "test", "unassigned")
BMI_TOLERANCE = 0.01
CROP_NAME = re.compile(r"^(?P<char>[a-z])_(?P<rep>[1-9]\d*)(?:_(?P<variant>[a-z]+))?\.ppm$")


def bmi(height_m: float, weight_kg: float) -> float:
    if not height_m > 0 or not weight_kg > 0:
        raise RangeError(f"height and weight must be positive, got {height_m} m, {weight_kg} kg")
    return weight_kg / (height_m * height_m)


@dataclass
class WriterRecord:
    writer_id: int
    height_m: float
    weight_kg: float
    bmi: float
    class_index: int = -1

    def bmi_error(self) -> float:
        return abs(self.bmi - bmi(self.height_m, self.weight_kg))


@dataclass(frozen=True)
class ManifestRow:
    image_path: str
    writer_id: int
    char_label: str
    repetition: int
    split: str = "unassigned"

    @property
    def variant(self) -> str:
        m = CROP_NAME.match(Path(self.image_path).name)
        return (m.group("variant") or "") if m else ""

    @property
    def source_key(self) -> tuple:
        return (self.writer_id, self.char_label, self.repetition)


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)
    writers: list[WriterRecord] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.rows)

    @property
    def num_classes(self) -> int:
        return len(self.writers)

    def writer_map(self) -> dict[int, WriterRecord]:
        return {w.writer_id: w for w in self.writers}

    def labels(self, rows=None) -> np.ndarray:
        wm = self.writer_map()
        return np.array([wm[r.writer_id].class_index for r in (self.rows if rows is None else rows)],
                        dtype=np.int64)

    def subset(self, split: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == split]

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in SPLITS}
        for r in self.rows:
            out[r.split] += 1
        return out

    def path_of(self, row: ManifestRow) -> Path:
        return self.root / row.image_path

    def validate(self, check_files: bool = True):
        ids = self.writer_map()
        if len(ids) != len(self.writers):
            raise ManifestError("duplicate writer ids in writer table")
        classes = [w.class_index for w in self.writers]
        if len(set(classes)) != len(classes):
            raise ManifestError("duplicate class index in writer table")
        seen = set()
        for r in self.rows:
            if r.writer_id not in ids:
                raise ManifestError(f"{r.image_path}: writer {r.writer_id} not in writer table")
            if r.image_path in seen:
                raise ManifestError(f"duplicate image path {r.image_path}")
            if r.split not in SPLITS:
                raise ManifestError(f"{r.image_path}: unknown split {r.split!r}")
            seen.add(r.image_path)
            if check_files and not self.path_of(r).is_file():
                raise ManifestError(f"missing image file {self.path_of(r)}")

    def save(self, path, writers_path=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for r in self.rows:
                rel = Path(r.image_path)
                if self.root.resolve() != path.parent.resolve():
                    rel = Path(_relpath(self.root / r.image_path, path.parent))
                w.writerow([rel.as_posix(), r.writer_id, r.char_label, r.repetition, r.split])
        write_writers(self.writers, writers_path or path.parent / "writers.csv")


def _relpath(target: Path, start: Path) -> str:
    return os.path.relpath(target.resolve(), start.resolve())


def read_writers(path) -> list[WriterRecord]:
    """Parse a writer CSV; class indices follow ascending writer id."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(WRITER_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ManifestError(f"{path}: missing columns {sorted(missing)}")
        records = []
        for line, rec in enumerate(reader, start=2):
            try:
                records.append(WriterRecord(int(rec["writer_id"]), float(rec["height_m"]),
                                            float(rec["weight_kg"]), float(rec["bmi"])))
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{line}: {exc}") from exc
    return assign_classes(records)


def assign_classes(records: list[WriterRecord]) -> list[WriterRecord]:
    ids = [r.writer_id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate writer ids")
    for i, r in enumerate(sorted(records, key=lambda r: r.writer_id)):
        r.class_index = i
    return sorted(records, key=lambda r: r.writer_id)


def write_writers(writers, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WRITER_HEADER)
        for r in writers:
            w.writerow([r.writer_id, repr(r.height_m), repr(r.weight_kg), repr(r.bmi)])


def check_bmi(writers, strict: bool = True):
    """Raise (strict) or warn when stored BMI disagrees with weight/height^2 by > 0.01."""
    bad = [w for w in writers if not w.bmi_error() <= BMI_TOLERANCE]
    if not bad:
        return
    detail = "; ".join(f"writer {w.writer_id}: stored {w.bmi:g}, computed "
                       f"{bmi(w.height_m, w.weight_kg):.4f}" for w in bad)
    if strict:
        raise ValidationError(f"BMI mismatch: {detail}", rows=[w.writer_id for w in bad])
    warnings.warn(f"BMI mismatch: {detail}", BMIMismatchWarning, stacklevel=3)


def build_manifest(crop_dir, writer_csv, strict: bool = True) -> Manifest:
    """Index ``<writer>/<char>_<rep>.ppm`` crops against the writer table."""
    crop_dir = Path(crop_dir)
    writers = read_writers(writer_csv)
    check_bmi(writers, strict=strict)
    known = {w.writer_id for w in writers}
    rows = []
    for path in sorted(crop_dir.glob("*/*.ppm")):
        m = CROP_NAME.match(path.name)
        if m is None:
            logger.warning("skipping %s: name is not <char>_<rep>[_variant].ppm", path)
            continue
        try:
            writer_id = int(path.parent.name)
        except ValueError:
            raise ManifestError(f"{path}: directory {path.parent.name!r} is not a writer id") from None
        if writer_id not in known:
            raise ManifestError(f"orphan image {path}: writer {writer_id} not in {writer_csv}")
        rows.append(ManifestRow(path.relative_to(crop_dir).as_posix(), writer_id,
                                m.group("char"), int(m.group("rep"))))
    if not rows:
        warnings.warn(f"no crops found under {crop_dir}", UserWarning, stacklevel=2)
    manifest = Manifest(rows, writers, crop_dir)
    manifest.validate()
    return manifest


def load_manifest(path, writers_path=None, check_files: bool = True, strict: bool = True) -> Manifest:
    path = Path(path)
    writers = read_writers(writers_path or path.parent / "writers.csv")
    check_bmi(writers, strict=strict)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for line, rec in enumerate(reader, start=2):
            try:
                rows.append(ManifestRow(rec["image_path"], int(rec["writer_id"]), rec["char_label"],
                                        int(rec["repetition"]), rec["split"] or "unassigned"))
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{line}: {exc}") from exc
    manifest = Manifest(rows, writers, path.parent)
    manifest.validate(check_files=check_files)
    return manifest


def split_counts(n: int, ratios) -> tuple[int, int, int]:
    """Per-class (train, val, test) sizes: val and test are floored, train takes the rest."""
    _, r_val, r_test = ratios
    n_val = math.floor(r_val * n + 1e-9)
    n_test = math.floor(r_test * n + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split(manifest: Manifest, ratios=(0.70, 0.15, 0.15), stream: RngStream | None = None,
          group_variants: bool = False) -> Manifest:
    """Stratified split by class.

    With ``group_variants`` all augmented variants of one source crop land in
    the same split, which is equivalent to splitting before augmentation.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise RangeError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    stream = stream or RngStream(42, "split")
    gen = stream.generator()
    labels = manifest.labels()
    assignment = ["unassigned"] * len(manifest.rows)
    for cls in range(manifest.num_classes):
        members = np.flatnonzero(labels == cls)
        if group_variants:
            groups: dict[tuple, list[int]] = {}
            for i in members:
                groups.setdefault(manifest.rows[i].source_key, []).append(int(i))
            units = list(groups.values())
        else:
            units = [[int(i)] for i in members]
        if not units:
            continue
        if len(units) < 3:
            warnings.warn(f"class {cls} has {len(units)} units; all assigned to train",
                          StratificationWarning, stacklevel=2)
            for unit in units:
                for i in unit:
                    assignment[i] = "train"
            continue
        n_train, n_val, _ = split_counts(len(units), ratios)
        for pos, u in enumerate(gen.permutation(len(units))):
            name = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
            for i in units[u]:
                assignment[i] = name
    rows = [replace(r, split=s) for r, s in zip(manifest.rows, assignment)]
    return Manifest(rows, manifest.writers, manifest.root)


def class_bmi_table(manifest_or_writers) -> np.ndarray:
    writers = getattr(manifest_or_writers, "writers", manifest_or_writers)
    classes = [w.class_index for w in writers]
    if len(set(classes)) != len(classes):
        raise ManifestError("duplicate class index in writer table")
    if sorted(classes) != list(range(len(classes))):
        raise ManifestError(f"class indices must be 0..{len(classes) - 1}")
    table = np.empty(len(writers))
    for w in writers:
        table[w.class_index] = w.bmi
    return table


def predict_bmi(probs, table) -> tuple[int, float, float]:
    """(class, bmi, confidence) for one probability vector; ties go to the lowest index."""
    probs = np.asarray(probs, dtype=np.float64).ravel()
    table = np.asarray(table, dtype=np.float64)
    if probs.shape != table.shape:
        raise ShapeError(f"{probs.size} probabilities for a {table.size}-class table")
    cls = int(np.argmax(probs))
    return cls, float(table[cls]), float(probs[cls])


def variant_name(char: str, rep: int, variant: str = "") -> str:
    if variant and variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return f"{char}_{rep}{'_' + variant if variant else ''}.ppm"
