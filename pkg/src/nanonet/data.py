"""CK+ ingestion, augmentation, subject-independent folds and a synthetic surrogate."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

CLASSES = ("anger", "contempt", "disgust", "fear", "happiness", "sadness", "surprise")
NUM_CLASSES = len(CLASSES)
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DataError(ValueError):
    pass


class SubjectLeakError(AssertionError):
    """A subject appears in both the training and the test side of a split."""


@dataclass
class Sample:
    image: np.ndarray  # (1, 1, H, W) float32 in [0, 1]
    label: int
    subject_id: str
    sequence_id: str = ""

    def __post_init__(self):
        if not 0 <= int(self.label) < NUM_CLASSES:
            raise DataError(f"label {self.label} outside [0, {NUM_CLASSES})")
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 1):
            raise DataError(f"sample image must be (1, 1, H, W), got {self.image.shape}")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise DataError("sample pixels must lie in [0, 1]")


@dataclass
class AugmentConfig:
    rotation_deg: float = 10.0
    shift: float = 0.1
    zoom: float = 0.1
    flip_prob: float = 0.5

    def __post_init__(self):
        if min(self.rotation_deg, self.shift, self.zoom, self.flip_prob) < 0:
            raise ValueError("augmentation ranges must be non-negative")

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class IngestStats:
    sequences: int = 0
    labeled_sequences: int = 0
    unlabeled_skipped: int = 0
    bad_label_skipped: int = 0
    short_sequences: int = 0
    samples: int = 0
    subjects: int = 0


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.concatenate([s.image for s in samples], axis=0)


def labels_of(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.int64)


# --------------------------------------------------------------------------
# CK+

def load_frame(path, size: int) -> np.ndarray:
    """Grayscale, center-crop to square, bilinear resize, scale to [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("L")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.reshape(1, 1, size, size)


def _parse_label(path: Path) -> int | None:
    try:
        value = float(path.read_text().split()[0])
    except (OSError, ValueError, IndexError):
        return None
    if value != int(value) or not 1 <= int(value) <= NUM_CLASSES:
        return None
    return int(value) - 1


def ingest_ckplus(root, size: int = 48, frames_per_sequence: int = 3,
                  stats: IngestStats | None = None) -> list[Sample]:
    """Read the last frames of every labeled CK+ sequence.

    Expects ``root/cohn-kanade-images/<subject>/<sequence>/*.png`` and
    ``root/Emotion/<subject>/<sequence>/*_emotion.txt``. Sequences without a
    label file are skipped.
    """
    root = Path(root)
    images_dir, emotion_dir = root / "cohn-kanade-images", root / "Emotion"
    if not root.is_dir():
        raise DataError(f"CK+ root {str(root)!r} does not exist")
    if not images_dir.is_dir():
        raise DataError(f"missing {str(images_dir)!r}")
    stats = stats if stats is not None else IngestStats()
    samples: list[Sample] = []
    subjects = set()
    for subject_dir in sorted(p for p in images_dir.iterdir() if p.is_dir()):
        for seq_dir in sorted(p for p in subject_dir.iterdir() if p.is_dir()):
            stats.sequences += 1
            label_files = sorted((emotion_dir / subject_dir.name / seq_dir.name).glob("*_emotion.txt"))
            if not label_files:
                stats.unlabeled_skipped += 1
                continue
            label = _parse_label(label_files[0])
            if label is None:
                stats.bad_label_skipped += 1
                logger.warning("unparseable label file %s, sequence skipped", label_files[0])
                continue
            frames = sorted(p for p in seq_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
            if not frames:
                stats.bad_label_skipped += 1
                logger.warning("labeled sequence %s has no frames, skipped", seq_dir)
                continue
            if len(frames) < frames_per_sequence:
                stats.short_sequences += 1
                logger.warning("sequence %s has only %d frames, using all of them",
                               seq_dir, len(frames))
            stats.labeled_sequences += 1
            subjects.add(subject_dir.name)
            seq_id = f"{subject_dir.name}/{seq_dir.name}"
            for frame in frames[-frames_per_sequence:]:
                samples.append(Sample(load_frame(frame, size), label, subject_dir.name, seq_id))
    stats.samples = len(samples)
    stats.subjects = len(subjects)
    if stats.bad_label_skipped:
        logger.warning("%d sequences skipped for bad labels", stats.bad_label_skipped)
    return samples


# --------------------------------------------------------------------------
# dataset cache: little-endian f32 blob plus a JSON sidecar index

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_cache(samples: Sequence[Sample], path) -> Path:
    path = Path(path)
    if not samples:
        raise DataError("refusing to write an empty dataset cache")
    _, _, h, w = samples[0].image.shape
    index = []
    with open(path, "wb") as fh:
        for s in samples:
            if s.image.shape != (1, 1, h, w):
                raise DataError(f"inconsistent image shape {s.image.shape}")
            index.append({"subject": s.subject_id, "sequence": s.sequence_id,
                          "label": int(s.label), "offset": fh.tell()})
            fh.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
    with open(_sidecar(path), "w", encoding="utf-8") as fh:
        json.dump({"height": h, "width": w, "samples": index}, fh, indent=1)
    return _sidecar(path)


def read_cache(path) -> list[Sample]:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
        blob = path.read_bytes()
        h, w = int(meta["height"]), int(meta["width"])
        out = []
        for rec in meta["samples"]:
            arr = np.frombuffer(blob, dtype="<f4", count=h * w, offset=int(rec["offset"]))
            out.append(Sample(arr.astype(np.float32).reshape(1, 1, h, w), int(rec["label"]),
                              str(rec["subject"]), str(rec["sequence"])))
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DataError(f"cannot read dataset cache {str(path)!r}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# folds

@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int] = field(default_factory=dict)

    def test_subjects(self, fold: int) -> set[str]:
        return {s for s, f in self.assignments.items() if f == fold}

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.assignments.values():
            sizes[f] += 1
        return sizes

    def split(self, samples: Sequence[Sample], fold: int):
        """Return ``(train, test)`` sample lists for ``fold``."""
        test_subjects = self.test_subjects(fold)
        train = [s for s in samples if s.subject_id not in test_subjects]
        test = [s for s in samples if s.subject_id in test_subjects]
        return train, test


def make_folds(samples: Sequence[Sample], k: int = 10, seed: int = 0) -> FoldPlan:
    subjects = sorted({s.subject_id for s in samples})
    if k < 1:
        raise DataError("k must be positive")
    if k > len(subjects):
        raise DataError(f"k={k} exceeds the number of distinct subjects ({len(subjects)})")
    order = np.random.default_rng(seed).permutation(len(subjects))
    return FoldPlan(k, {subjects[j]: pos % k for pos, j in enumerate(order)})


def check_disjoint_subjects(train: Sequence[Sample], test: Sequence[Sample]) -> None:
    leaked = {s.subject_id for s in train} & {s.subject_id for s in test}
    if leaked:
        raise SubjectLeakError(f"subjects in both train and test: {sorted(leaked)}")


# --------------------------------------------------------------------------
# augmentation

def augment(sample: Sample, rng: np.random.Generator, cfg: AugmentConfig) -> Sample:
    """Random rotation, shift, zoom (one bilinear resample) then horizontal flip."""
    img = sample.image[0, 0]
    h, w = img.shape
    theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)) if cfg.rotation_deg else 0.0
    ty = rng.uniform(-cfg.shift, cfg.shift) * h if cfg.shift else 0.0
    tx = rng.uniform(-cfg.shift, cfg.shift) * w if cfg.shift else 0.0
    z = rng.uniform(1 - cfg.zoom, 1 + cfg.zoom) if cfg.zoom else 1.0
    flip = bool(cfg.flip_prob) and rng.random() < cfg.flip_prob
    out = img
    if theta or ty or tx or z != 1.0:
        out = affine_resample(img, theta, (ty, tx), z)
    if flip:
        out = out[:, ::-1]
    if out is img:
        out = img.copy()
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return Sample(np.ascontiguousarray(out).reshape(1, 1, h, w), sample.label,
                  sample.subject_id, sample.sequence_id)


def affine_resample(img: np.ndarray, theta: float, shift=(0.0, 0.0), zoom: float = 1.0) -> np.ndarray:
    """Rotate counter-clockwise by ``theta`` radians about the center, translate by
    ``shift`` (rows, cols) pixels, then scale by ``zoom`` about the center.

    Bilinear interpolation with edge replication.
    """
    h, w = img.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])  # (row, col) displacement, row axis points down
    rot_inv = rot.T
    matrix = rot_inv / zoom
    offset = center - matrix @ center - rot_inv @ np.asarray(shift, dtype=float)
    return ndimage.affine_transform(img.astype(np.float64), matrix, offset=offset, order=1,
                                    mode="nearest")


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


# --------------------------------------------------------------------------
# synthetic surrogate

def _render(label: int, size: int, style: dict, jitter: np.ndarray, noise: np.ndarray) -> np.ndarray:
    lin = np.linspace(-1.0, 1.0, size)
    y, x = np.meshgrid(lin, lin, indexing="ij")
    x = x - style["ox"] - jitter[0]
    y = y - style["oy"] - jitter[1]
    c, s = math.cos(style["rot"]), math.sin(style["rot"])
    x, y = (c * x + s * y) / style["scale"], (-s * x + c * y) / style["scale"]
    r = np.hypot(x, y)
    th, f = style["thickness"], style["freq"]
    if label == 0:
        pat = np.sin(f * math.pi * y) > 0
    elif label == 1:
        pat = np.sin(f * math.pi * x) > 0
    elif label == 2:
        pat = np.abs(r - 0.55) < th
    elif label == 3:
        pat = r < 0.5
    elif label == 4:
        pat = ((np.abs(x) < th) | (np.abs(y) < th)) & (r < 0.8)
    elif label == 5:
        pat = np.sin(f * math.pi * x) * np.sin(f * math.pi * y) > 0
    else:
        pat = ((np.abs(x - y) < th * 1.4) | (np.abs(x + y) < th * 1.4)) & (r < 0.8)
    img = style["bg"] + style["contrast"] * pat + noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(n_subjects: int = 20, per_subject: int = 21, seed: int = 0,
                  size: int = 48) -> list[Sample]:
    """Seven parametric geometric pattern classes with per-subject style.

    Sample ``i`` belongs to subject ``i % n_subjects`` and class ``i % 7``.
    Each subject draws its own offset, scale, tilt, stroke width, stripe
    frequency, background and contrast.
    """
    rng = np.random.default_rng(seed)
    styles = [{"ox": rng.uniform(-0.08, 0.08), "oy": rng.uniform(-0.08, 0.08),
               "scale": rng.uniform(0.9, 1.1), "rot": math.radians(rng.uniform(-8, 8)),
               "thickness": rng.uniform(0.12, 0.2), "freq": rng.uniform(2.5, 3.5),
               "bg": rng.uniform(0.05, 0.25), "contrast": rng.uniform(0.5, 0.75)}
              for _ in range(n_subjects)]
    out = []
    for i in range(n_subjects * per_subject):
        subj, label = i % n_subjects, i % NUM_CLASSES
        srng = sample_rng(seed, i)
        jitter = srng.uniform(-0.03, 0.03, size=2)
        noise = srng.normal(0.0, 0.04, size=(size, size))
        img = _render(label, size, styles[subj], jitter, noise)
        out.append(Sample(img.reshape(1, 1, size, size), label, f"S{subj:03d}",
                          f"S{subj:03d}/{i:05d}"))
    return out
