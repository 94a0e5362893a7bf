"""Samples, on-disk dataset layout, preprocessing, augmentation and synthetic data.

Layout of one split directory::

    <split_dir>/
        images/<id>.png     8-bit RGB
        masks/<id>.png      8-bit single channel, raw class index per pixel
        labels.csv          header "filename,class_1,...,class_n"; one 0/1 row per image
        manifest.json       {"split": ..., "n_classes": n, "entries": [
                               {"image": "images/<id>.png", "mask": "masks/<id>.png",
                                "labels": [0/1, ...]}, ...]}
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Dataset validation failure; ``problems`` lists one message per entry."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("dataset validation failed:\n  " + "\n  ".join(self.problems))


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    mask: np.ndarray  # (H, W) int, 0 = background, 1..n lesion classes
    labels: np.ndarray  # (n,) int 0/1
    name: str = ""

    @property
    def n_classes(self) -> int:
        return len(self.labels)


def labels_from_mask(mask: np.ndarray, n_classes: int) -> np.ndarray:
    present = np.zeros(n_classes, dtype=np.int64)
    for c in np.unique(mask):
        if 1 <= c <= n_classes:
            present[c - 1] = 1
    return present


def check_consistency(sample: Sample) -> List[str]:
    problems = []
    n = sample.n_classes
    if sample.mask.min(initial=0) < 0 or sample.mask.max(initial=0) > n:
        problems.append(f"{sample.name}: mask labels outside 0..{n}")
    derived = labels_from_mask(sample.mask, n)
    for c in np.flatnonzero(derived != sample.labels):
        problems.append(
            f"{sample.name}: class {c + 1} label is {int(sample.labels[c])} "
            f"but mask says {int(derived[c])}"
        )
    return problems


def stack_batch(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    labels = np.stack([s.labels for s in samples]).astype(np.float64)
    return images, masks, labels


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image: str
    mask: str
    labels: List[int]


@dataclass
class DatasetManifest:
    root: Path
    split: str
    n_classes: int
    entries: List[ManifestEntry] = field(default_factory=list)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise DatasetError([f"{path}: manifest not found"])
        try:
            doc = json.loads(path.read_text())
            entries = [ManifestEntry(e["image"], e["mask"], list(e["labels"])) for e in doc["entries"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError([f"{path}: malformed manifest ({exc})"]) from exc
        return cls(path.parent, doc["split"], int(doc["n_classes"]), entries)

    def write(self) -> None:
        doc = {
            "split": self.split,
            "n_classes": self.n_classes,
            "entries": [
                {"image": e.image, "mask": e.mask, "labels": [int(v) for v in e.labels]}
                for e in self.entries
            ],
        }
        (self.root / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def check_disjoint(manifests: Sequence[DatasetManifest]) -> None:
    """Raise :class:`DatasetError` if any image file is listed by two splits."""
    seen, problems = {}, []
    for m in manifests:
        for e in m.entries:
            key = (m.root / e.image).resolve()
            if key in seen and seen[key] != m.split:
                problems.append(f"{key}: listed in both {seen[key]} and {m.split}")
            seen.setdefault(key, m.split)
    if problems:
        raise DatasetError(problems)


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DatasetError([f"{path}: cannot decode image ({exc})"]) from exc
    return arr.transpose(2, 0, 1)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64)


def write_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8)).save(path)


def write_dataset(samples: Sequence[Sample], split_dir, split: str = "train", n_classes: int = None) -> DatasetManifest:
    """Write samples in the documented layout and return the manifest."""
    root = Path(split_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    if n_classes is None:
        if not samples:
            raise ValueError("n_classes is required for an empty dataset")
        n_classes = samples[0].n_classes
    manifest = DatasetManifest(root, split, n_classes)
    rows = []
    for i, s in enumerate(samples):
        stem = s.name or f"{i:05d}"
        img_rel, mask_rel = f"images/{stem}.png", f"masks/{stem}.png"
        write_image(s.image, root / img_rel)
        write_mask(s.mask, root / mask_rel)
        labels = [int(v) for v in s.labels]
        manifest.entries.append(ManifestEntry(img_rel, mask_rel, labels))
        rows.append([f"{stem}.png"] + labels)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename"] + [f"class_{c + 1}" for c in range(n_classes)])
        writer.writerows(rows)
    manifest.write()
    return manifest


def read_labels_csv(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {row[0]: [int(v) for v in row[1:]] for row in reader}


def load_dataset(manifest) -> List[Sample]:
    """Decode every manifest entry; raises :class:`DatasetError` listing all problems."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    csv_path = manifest.root / "labels.csv"
    csv_labels = read_labels_csv(csv_path) if csv_path.exists() else {}
    samples, problems = [], []
    for entry in manifest.entries:
        img_path, mask_path = manifest.root / entry.image, manifest.root / entry.mask
        missing = [str(p) for p in (img_path, mask_path) if not p.exists()]
        if missing:
            problems.extend(f"{p}: file not found" for p in missing)
            continue
        labels = csv_labels.get(Path(entry.image).name, entry.labels)
        if list(labels) != list(entry.labels):
            problems.append(f"{entry.image}: labels.csv row {labels} != manifest {entry.labels}")
        try:
            image = read_image(img_path)
        except DatasetError as exc:
            problems.extend(exc.problems)
            continue
        sample = Sample(
            image, read_mask(mask_path), np.asarray(entry.labels, dtype=np.int64), Path(entry.image).stem
        )
        if sample.n_classes != manifest.n_classes:
            problems.append(f"{entry.image}: {sample.n_classes} labels, expected {manifest.n_classes}")
            continue
        if sample.image.shape[1:] != sample.mask.shape:
            problems.append(f"{entry.image}: image and mask sizes differ")
            continue
        problems.extend(check_consistency(sample))
        samples.append(sample)
    if problems:
        raise DatasetError(problems)
    return samples


# ---------------------------------------------------------------------------
# preprocessing and augmentation
# ---------------------------------------------------------------------------

def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    channels = [
        np.asarray(Image.fromarray(ch.astype(np.float32)).resize((w, h), Image.BILINEAR))
        for ch in image
    ]
    return np.clip(np.stack(channels).astype(np.float64), 0.0, 1.0)


def resize_mask(mask: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    im = Image.fromarray(np.asarray(mask, dtype=np.uint8))
    return np.asarray(im.resize((w, h), Image.NEAREST), dtype=np.int64)


def preprocess(sample: Sample, target_size) -> Sample:
    """Bilinear image resize and nearest-neighbour mask resize to ``target_size``."""
    if isinstance(target_size, int):
        target_size = (target_size, target_size)
    target_size = tuple(target_size)
    if target_size[0] % 16 or target_size[1] % 16:
        raise ValueError(f"target size {target_size} must be divisible by 16")
    if sample.mask.shape == target_size:
        return sample
    mask = resize_mask(sample.mask, target_size)
    return Sample(
        resize_image(sample.image, target_size), mask, labels_from_mask(mask, sample.n_classes), sample.name
    )


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, :, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.labels.copy(), sample.name)


def vflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, ::-1, :].copy(), sample.mask[::-1, :].copy(), sample.labels.copy(), sample.name)


def rotate(sample: Sample, angle: float) -> Sample:
    """Rotate about the centre; images replicate borders, masks fill with background."""
    image = ndimage.rotate(sample.image, angle, axes=(2, 1), reshape=False, order=1, mode="nearest")
    mask = ndimage.rotate(sample.mask, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
    return Sample(np.clip(image, 0.0, 1.0), mask, labels_from_mask(mask, sample.n_classes), sample.name)


def augment(
    sample: Sample,
    rng,
    p_hflip: float = 0.5,
    p_vflip: float = 0.5,
    p_rotate: float = 0.5,
    max_angle: float = 15.0,
) -> Sample:
    """Random horizontal/vertical flips and a small rotation, applied to image and mask alike."""
    u = rng.random(3)
    angle = rng.uniform(-max_angle, max_angle)
    out = sample
    if u[0] < p_hflip:
        out = hflip(out)
    if u[1] < p_vflip:
        out = vflip(out)
    if u[2] < p_rotate:
        out = rotate(out, angle)
    if out is not sample:
        out.labels = labels_from_mask(out.mask, sample.n_classes)
    return out


# ---------------------------------------------------------------------------
# synthetic lesions
# ---------------------------------------------------------------------------

def ellipse_mask(shape: Tuple[int, int], center, axes, angle: float = 0.0) -> np.ndarray:
    """Boolean raster of the ellipse interior; pixel centres are tested."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = center
    a, b = axes
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _texture(cls: int, shape, rng: np.random.Generator) -> np.ndarray:
    """RGB appearance of lesion class ``cls`` (1-based)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    tex = np.zeros((3, h, w))
    if cls == 1:
        tex[:] = np.array([0.95, 0.25, 0.2])[:, None, None]
    elif cls == 2:
        stripes = 0.5 + 0.25 * np.sign(np.sin(xx * 1.3))
        tex[0], tex[1], tex[2] = 0.1, stripes, 0.2
    else:
        checker = ((yy // 2 + xx // 2) % 2).astype(np.float64)
        tex[0], tex[1], tex[2] = 0.15, 0.15, 0.6 + 0.35 * checker
    return np.clip(tex + 0.03 * rng.standard_normal((3, h, w)), 0.0, 1.0)


def synth_sample(
    rng: np.random.Generator,
    image_size,
    n_classes: int,
    classes: Iterable[int] = None,
    name: str = "",
) -> Sample:
    """One synthetic image: smooth noise background plus an ellipse per present class.

    ``classes`` fixes which classes appear; by default each is present with
    probability 0.5. Later classes are painted over earlier ones.
    """
    if not 1 <= n_classes <= 3:
        raise ValueError("synthetic data supports 1..3 lesion classes")
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    h, w = image_size
    noise = ndimage.gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, h / 8, w / 8))
    noise /= np.abs(noise).max() + 1e-12
    image = np.clip(0.45 + 0.15 * noise, 0.0, 1.0)
    mask = np.zeros((h, w), dtype=np.int64)
    present = rng.random(n_classes) < 0.5
    if classes is not None:
        present = np.zeros(n_classes, dtype=bool)
        present[[c - 1 for c in classes]] = True
    short = min(h, w)
    for c in range(1, n_classes + 1):
        a, b = rng.uniform(0.12 * short, 0.28 * short, size=2)
        cy = rng.uniform(0.25 * h, 0.75 * h)
        cx = rng.uniform(0.25 * w, 0.75 * w)
        angle = rng.uniform(0, math.pi)
        if not present[c - 1]:
            continue
        region = ellipse_mask((h, w), (cy, cx), (a, b), angle)
        mask[region] = c
        image[:, region] = _texture(c, (h, w), rng)[:, region]
    return Sample(image, mask, labels_from_mask(mask, n_classes), name)


def synth_generate(rng: np.random.Generator, count: int, image_size, n_classes: int) -> List[Sample]:
    """``count`` synthetic samples; each draws from its own stream seeded by ``rng``."""
    seeds = rng.integers(0, 2**63, size=count)
    return [
        synth_sample(np.random.Generator(np.random.PCG64(int(s))), image_size, n_classes, name=f"{i:05d}")
        for i, s in enumerate(seeds)
    ]
