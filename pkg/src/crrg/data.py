"""Corpus data model and preprocessing: ID joins of the three source
datasets, FINDINGS extraction, deterministic splitting, and the image/text
augmentation pipeline.

Images are single-channel float grids in [0,1]; ingestion reads 8-bit
binary PGM (P5) so fixtures stay dependency-free. All randomness flows
through explicit numpy Generators so batch preprocessing is reproducible.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detect import Box
from .errors import (AugmentationError, InputError, IntegrityError,
                     MissingSectionError)

IdTriple = tuple[str, str, str]

SPLITS = ("train", "val", "test", "unassigned")


@dataclass
class RegionAnnotation:
    label_id: int
    box: Box
    has_sentence: bool
    sentence: str = ""

    def __post_init__(self):
        if not 0 <= self.label_id < 29:
            raise InputError(f"label_id {self.label_id} outside [0,28]")
        if self.has_sentence != bool(self.sentence):
            raise InputError("has_sentence must match sentence nonemptiness")

    def to_dict(self) -> dict:
        return {"label_id": self.label_id, "box": self.box.to_list(),
                "has_sentence": self.has_sentence, "sentence": self.sentence}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionAnnotation":
        return cls(label_id=int(d["label_id"]), box=Box(*d["box"]),
                   has_sentence=bool(d["has_sentence"]), sentence=d.get("sentence", ""))


@dataclass
class StudyRecord:
    subject_id: str
    study_id: str
    image_id: str
    findings: str | None = None
    regions: list[RegionAnnotation] = field(default_factory=list)
    split: str = "unassigned"
    image_path: str | None = None
    label: int | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InputError(f"unknown split {self.split!r}")

    @property
    def ids(self) -> IdTriple:
        return (self.subject_id, self.study_id, self.image_id)

    def to_dict(self) -> dict:
        d = {"subject_id": self.subject_id, "study_id": self.study_id,
             "image_id": self.image_id, "findings": self.findings,
             "regions": [r.to_dict() for r in self.regions], "split": self.split}
        if self.image_path is not None:
            d["image_path"] = self.image_path
        if self.label is not None:
            d["label"] = self.label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyRecord":
        return cls(subject_id=d["subject_id"], study_id=d["study_id"],
                   image_id=d["image_id"], findings=d.get("findings"),
                   regions=[RegionAnnotation.from_dict(r) for r in d.get("regions", [])],
                   split=d.get("split", "unassigned"),
                   image_path=d.get("image_path"),
                   label=d.get("label"))


@dataclass
class ImageGrid:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) float32 in [0,1]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InputError("image must have positive dimensions")
        if self.pixels.shape != (self.height, self.width):
            raise InputError("pixel buffer does not match width/height")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageGrid":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)


@dataclass
class SplitRatios:
    train: float = 7.0
    val: float = 1.5
    test: float = 1.5

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise InputError("split ratios must be nonnegative")
        if abs(self.train + self.val + self.test - 10.0) > 1e-9:
            raise InputError("split ratios must sum to 10")


@dataclass
class JoinReport:
    dropped_reports: int = 0
    dropped_images: int = 0
    dropped_graphs: int = 0


def _check_unique(entries, source: str) -> dict:
    out = {}
    for ids, payload in entries:
        key = tuple(ids)
        if key in out:
            raise IntegrityError(f"duplicate id triple {key} in {source}")
        out[key] = payload
    return out


def join_records(reports, images, scene_graphs):
    """Inner-joins the three sources on (subject, study, image) id triples.

    Each argument is a list of (id_triple, payload): raw report text,
    image path, and region list respectively. Returns (records, JoinReport)
    with records in ascending id order and drop counts per source.
    """
    rep = _check_unique(reports, "reports")
    img = _check_unique(images, "images")
    sg = _check_unique(scene_graphs, "scene graphs")
    common = sorted(set(rep) & set(img) & set(sg))
    records = [StudyRecord(subject_id=k[0], study_id=k[1], image_id=k[2],
                           findings=rep[k], regions=list(sg[k]), image_path=img[k])
               for k in common]
    report = JoinReport(dropped_reports=len(rep) - len(common),
                        dropped_images=len(img) - len(common),
                        dropped_graphs=len(sg) - len(common))
    return records, report


_HEADER_RE = re.compile(r"^\s*([A-Z][A-Z ]*):")


def extract_findings(raw_report: str) -> str:
    """Text between the FINDINGS: header and the next all-caps header.

    Newlines become single spaces and whitespace runs collapse.
    """
    if not raw_report:
        raise InputError("empty report")
    lines = raw_report.splitlines()
    start = None
    collected: list[str] = []
    for idx, line in enumerate(lines):
        m = _HEADER_RE.match(line)
        if start is None:
            if m and m.group(1) == "FINDINGS":
                start = idx
                collected.append(line[m.end():])
        else:
            if m and m.group(1) != "FINDINGS":
                break
            collected.append(line)
    if start is None:
        raise MissingSectionError("report has no FINDINGS section")
    return " ".join(" ".join(collected).split())


def _largest_remainder(n: int, ratios: SplitRatios) -> tuple[int, int, int]:
    quotas = [n * ratios.train / 10.0, n * ratios.val / 10.0, n * ratios.test / 10.0]
    counts = [int(math.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    # ties broken in order train, val, test: stable sort on -remainder
    order = sorted(range(3), key=lambda i: (-remainders[i], i))
    for i in range(n - sum(counts)):
        counts[order[i % 3]] += 1
    return counts[0], counts[1], counts[2]


def split_dataset(records: list[StudyRecord], ratios: SplitRatios,
                  seed: int) -> list[StudyRecord]:
    """Assigns splits by a seeded shuffle and largest-remainder counts."""
    n = len(records)
    n_train, n_val, n_test = _largest_remainder(n, ratios)
    perm = np.random.default_rng(seed).permutation(n)
    out = list(records)
    for rank, idx in enumerate(perm):
        if rank < n_train:
            out[idx].split = "train"
        elif rank < n_train + n_val:
            out[idx].split = "val"
        else:
            out[idx].split = "test"
    return out


def split_counts(records: list[StudyRecord]) -> dict[str, int]:
    counts = {s: 0 for s in SPLITS}
    for r in records:
        counts[r.split] += 1
    return counts


# ---------------------------------------------------------------------------
# Image ops
# ---------------------------------------------------------------------------

def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear resampling (identity for equal sizes)."""
    in_h, in_w = pixels.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0, in_h - 1)
    xs = np.clip(xs, 0, in_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    p = pixels.astype(np.float64)
    top = p[np.ix_(y0, x0)] * (1 - wx) + p[np.ix_(y0, x1)] * wx
    bot = p[np.ix_(y1, x0)] * (1 - wx) + p[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def _rotate_bilinear(pixels: np.ndarray, degrees: float) -> np.ndarray:
    """Rotates about the center, bilinear sampling, zero fill outside."""
    if degrees == 0.0:
        return pixels.copy()
    h, w = pixels.shape
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    sx = c * xx + s * yy + cx
    sy = -s * xx + c * yy + cy
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros_like(pixels, dtype=np.float64)
    valid = (x0 >= -1) & (x0 <= w - 1) & (y0 >= -1) & (y0 <= h - 1)

    def fetch(yi, xi):
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = np.zeros_like(out)
        vals[ok] = pixels[yi[ok], xi[ok]]
        return vals

    p00 = fetch(y0, x0)
    p01 = fetch(y0, x0 + 1)
    p10 = fetch(y0 + 1, x0)
    p11 = fetch(y0 + 1, x0 + 1)
    out = (p00 * (1 - fx) * (1 - fy) + p01 * fx * (1 - fy)
           + p10 * (1 - fx) * fy + p11 * fx * fy)
    out[~valid] = 0.0
    return out


def _translate(pixels: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(pixels)
    h, w = pixels.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = pixels[ys_src, xs_src]
    return out


@dataclass
class PreprocessConfig:
    dither: float = 0.02
    noise_std: float = 0.01
    max_shift: int = 8
    max_deg: float = 5.0
    norm_mean: float | None = None  # None -> per-image statistics
    norm_std: float | None = None

    @classmethod
    def disabled(cls) -> "PreprocessConfig":
        return cls(dither=0.0, noise_std=0.0, max_shift=0, max_deg=0.0)


def resize_pad_512(img: ImageGrid) -> tuple[np.ndarray, float, int, int]:
    """Long side to 512 with centered black padding; returns (grid, scale, off_x, off_y)."""
    if img.width < 1 or img.height < 1:
        raise InputError("zero-sized image")
    scale = 512.0 / max(img.width, img.height)
    new_w = max(1, int(round(img.width * scale)))
    new_h = max(1, int(round(img.height * scale)))
    resized = bilinear_resize(img.pixels, new_h, new_w)
    off_x = (512 - new_w) // 2
    off_y = (512 - new_h) // 2
    canvas = np.zeros((512, 512), dtype=np.float64)
    canvas[off_y:off_y + new_h, off_x:off_x + new_w] = resized
    return canvas, scale, off_x, off_y


def transform_box_to_512(box: Box, img: ImageGrid) -> Box:
    """Maps a source-pixel box through the resize+pad geometry."""
    scale = 512.0 / max(img.width, img.height)
    off_x = (512 - int(round(img.width * scale))) // 2
    off_y = (512 - int(round(img.height * scale))) // 2
    return Box(box.x1 * scale + off_x, box.y1 * scale + off_y,
               box.x2 * scale + off_x, box.y2 * scale + off_y)


def preprocess_mimic_image(img: ImageGrid, cfg: PreprocessConfig,
                           rng: np.random.Generator) -> ImageGrid:
    """512x512 training view: resize+pad, dither, noise, shift, rotate,
    clamp, then zero-mean/unit-variance normalization."""
    canvas, _, _, _ = resize_pad_512(img)
    if cfg.dither > 0:
        canvas = canvas + rng.uniform(-cfg.dither, cfg.dither)
    if cfg.noise_std > 0:
        canvas = canvas + rng.normal(0.0, cfg.noise_std, size=canvas.shape)
    if cfg.max_shift > 0:
        dy = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
        dx = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1))
        canvas = _translate(canvas, dy, dx)
    if cfg.max_deg > 0:
        canvas = _rotate_bilinear(canvas, float(rng.uniform(-cfg.max_deg, cfg.max_deg)))
    canvas = np.clip(canvas, 0.0, 1.0)
    if cfg.norm_mean is not None and cfg.norm_std is not None:
        canvas = (canvas - cfg.norm_mean) / cfg.norm_std
    else:
        std = canvas.std()
        canvas = (canvas - canvas.mean()) / std if std > 0 else np.zeros_like(canvas)
    return ImageGrid(512, 512, canvas.astype(np.float32))


@dataclass
class RsnaAugmentConfig:
    center_jitter: int = 8
    brightness: float = 0.1  # multiplicative factor in [1-b, 1+b]
    contrast: float = 0.2    # spread about the crop mean in [1-c, 1+c]


def augment_rsna_image(img: ImageGrid, cfg: RsnaAugmentConfig,
                       rng: np.random.Generator) -> ImageGrid:
    """Jittered 224 center crop with brightness/contrast jitter.

    Saturation/hue jitter are identity on single-channel grids.
    """
    if img.width < 224 or img.height < 224:
        raise InputError("image smaller than 224 in at least one dimension")
    cy, cx = img.height // 2, img.width // 2
    if cfg.center_jitter > 0:
        cy += int(rng.integers(-cfg.center_jitter, cfg.center_jitter + 1))
        cx += int(rng.integers(-cfg.center_jitter, cfg.center_jitter + 1))
    y0 = min(max(cy - 112, 0), img.height - 224)
    x0 = min(max(cx - 112, 0), img.width - 224)
    crop = img.pixels[y0:y0 + 224, x0:x0 + 224].astype(np.float64)
    if cfg.brightness > 0:
        crop = crop * float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness))
    if cfg.contrast > 0:
        mean = crop.mean()
        crop = mean + (crop - mean) * float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast))
    crop = np.clip(crop, 0.0, 1.0)
    return ImageGrid(224, 224, crop.astype(np.float32))


# ---------------------------------------------------------------------------
# Text augmentation
# ---------------------------------------------------------------------------

class IdentityAugmenter:
    def augment(self, text: str) -> str:
        return text


class SynonymTableAugmenter:
    """Deterministic word-for-word substitution; stands in for back translation."""

    def __init__(self, table: dict[str, str]):
        self.table = dict(table)

    def augment(self, text: str) -> str:
        return " ".join(self.table.get(w, w) for w in text.split())


def augment_text(findings: str, augmenter=None) -> str:
    if augmenter is None:
        augmenter = IdentityAugmenter()
    try:
        return augmenter.augment(findings)
    except Exception as exc:
        raise AugmentationError(f"text augmenter failed: {exc}", findings) from exc


# ---------------------------------------------------------------------------
# File I/O: PGM images, JSONL records
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, img: ImageGrid) -> None:
    data = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> ImageGrid:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise InputError(f"{path}: not a binary PGM (P5) file")
        fields: list[int] = []
        while len(fields) < 3:
            line = fh.readline()
            if not line:
                raise InputError(f"{path}: truncated PGM header")
            text = line.split(b"#", 1)[0]
            fields.extend(int(t) for t in text.split())
        width, height, maxval = fields[:3]
        raw = fh.read(width * height)
        if len(raw) != width * height:
            raise InputError(f"{path}: truncated PGM payload")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width)
    return ImageGrid(width, height, (arr / float(maxval)).astype(np.float32))


def write_records(path: str | Path, records: list[StudyRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[StudyRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(StudyRecord.from_dict(json.loads(line)))
    return out


def read_split_file(path: str | Path) -> dict[IdTriple, str]:
    """Optional predefined split assignments keyed by id triple."""
    out: dict[IdTriple, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            split = d["split"]
            if split not in SPLITS:
                raise InputError(f"unknown split {split!r} in split file")
            out[(d["subject_id"], d["study_id"], d["image_id"])] = split
    return out


def apply_split_file(records: list[StudyRecord], assignment: dict[IdTriple, str]) -> None:
    for r in records:
        if r.ids in assignment:
            r.split = assignment[r.ids]
