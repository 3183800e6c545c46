"""Phantom datasets on disk: PGM images plus a CSV manifest."""
from __future__ import annotations

import csv
import hashlib
import io
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import Box
from .backbone import get_profile
from .errors import ConfigurationError, FormatError
from .pgm import read_pgm, write_pgm
from .phantom import AGE_MAX, AGE_MIN, AGE_STREAM, VIEWS, SplitMix64, generate_phantom, view_index

MANIFEST_NAME = "manifest.csv"
COLUMNS = ("sample_id", "view", "age_days", "split", "image_path", "box_r0", "box_c0", "box_r1", "box_c1")
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)
SPLIT_STREAM = 0x5E11


@dataclass(frozen=True)
class Sample:
    sample_id: int
    view: str
    age_days: float
    split: str
    image_path: str
    gt_box: Box


@dataclass
class Manifest:
    samples: list[Sample]
    root: Path | None = None

    def __len__(self):
        return len(self.samples)

    def select(self, view: str | None = None, split: str | None = None) -> list[Sample]:
        return [s for s in self.samples
                if (view is None or s.view == view) and (split is None or s.split == split)]

    def subjects(self) -> list[int]:
        return sorted({s.sample_id for s in self.samples})

    def image(self, sample: Sample) -> np.ndarray:
        path = Path(sample.image_path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return read_pgm(path)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for s in self.samples:
            b = s.gt_box
            writer.writerow([s.sample_id, s.view, f"{s.age_days:.2f}", s.split, s.image_path,
                             b.r0, b.c0, b.r1, b.c1])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_csv().encode("utf-8"))

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != COLUMNS:
                raise FormatError(f"{path}: manifest header {header} does not match {list(COLUMNS)}")
            samples = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(COLUMNS):
                    raise FormatError(f"{path}:{lineno}: expected {len(COLUMNS)} fields, got {len(row)}")
                sid, view, age, split, img, r0, c0, r1, c1 = row
                samples.append(Sample(int(sid), view, float(age), split, img,
                                      Box(int(r0), int(c0), int(r1), int(c1), "image")))
        return cls(samples, path.parent)


def split_counts(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """Floor the train and val shares; the remainder goes to test."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = math.floor(n * fractions[0] + 1e-9)
    n_val = math.floor(n * fractions[1] + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_dataset(manifest: Manifest, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0) -> Manifest:
    """Assign train/val/test by subject so all views of a subject share a split."""
    subjects = manifest.subjects()
    n_train, n_val, _ = split_counts(len(subjects), fractions)
    order = SplitMix64.stream(seed, SPLIT_STREAM).shuffle(list(subjects))
    assign = {}
    for rank, sid in enumerate(order):
        assign[sid] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return Manifest([replace(s, split=assign[s.sample_id]) for s in manifest.samples], manifest.root)


def subject_age(seed: int, subject_id: int) -> float:
    rng = SplitMix64.stream(seed, subject_id, AGE_STREAM)
    return round(rng.uniform_range(AGE_MIN, AGE_MAX), 2)


def generate_dataset(n_subjects: int, seed: int, out_dir, profile: str = "desk",
                     fractions: Sequence[float] = DEFAULT_FRACTIONS) -> Manifest:
    """Render every view of ``n_subjects`` phantoms and write the manifest."""
    if n_subjects < 1:
        raise ConfigurationError(f"n_subjects must be positive, got {n_subjects}")
    size = get_profile(profile).input_size
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = []
    for sid in range(n_subjects):
        age = subject_age(seed, sid)
        for view in VIEWS:
            rng = SplitMix64.stream(seed, sid, view_index(view))
            image, box = generate_phantom(age, view, rng, size)
            rel = f"images/{view}_{sid:05d}.pgm"
            write_pgm(image, out / rel)
            samples.append(Sample(sid, view, age, "", rel, box))
    manifest = split_dataset(Manifest(samples, out), fractions, seed)
    manifest.write(out / MANIFEST_NAME)
    return manifest


def dataset_digest(root) -> str:
    """SHA-256 over the manifest bytes followed by every referenced image file."""
    root = Path(root)
    manifest = Manifest.read(root)
    h = hashlib.sha256()
    h.update((root / MANIFEST_NAME).read_bytes())
    for s in manifest.samples:
        h.update(os.fsencode(s.image_path))
        h.update((root / s.image_path).read_bytes())
    return h.hexdigest()
