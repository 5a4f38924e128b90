"""Manifest ingestion, class balancing, augmentation, preprocessing and
a procedural stand-in dataset.

The synthetic images are NOT biometric data: they are radial textures that
only mimic the coarse layout of a near-infrared eye capture (dark pupil,
streaked iris annulus, brighter surround) so the pipeline can be exercised
without the license-restricted databases.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .backbone import IMAGENET_MEAN, IMAGENET_STD
from .errors import ConfigError, IngestionError, ManifestError

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("image_path", "label", "attack_type", "database", "sensor", "split", "subject_id")
OPTIONAL_COLUMNS = ("known_unknown",)
SPLITS = ("train", "test")
BONA_FIDE, ATTACK = 0, 1


@dataclass(frozen=True)
class ImageSample:
    image_path: str
    label: int
    attack_type: str = "none"
    database: str = ""
    sensor: str = ""
    split: str = "train"
    subject_id: str = ""
    known_unknown: str = ""

    def validate(self) -> None:
        if self.label not in (BONA_FIDE, ATTACK):
            raise ManifestError(f"label must be 0 or 1, got {self.label!r}")
        if (self.attack_type == "none") != (self.label == BONA_FIDE):
            raise ManifestError(
                f"label {self.label} inconsistent with attack_type {self.attack_type!r} "
                "(attack_type 'none' must pair with label 0)"
            )
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.known_unknown not in ("", "known", "unknown"):
            raise ManifestError(f"known_unknown must be empty, 'known' or 'unknown', got {self.known_unknown!r}")


@dataclass
class Manifest:
    entries: list[ImageSample]
    name: str = "manifest"
    root: Path = field(default_factory=Path.cwd)
    missing: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, sample: ImageSample) -> Path:
        p = Path(sample.image_path)
        return p if p.is_absolute() else self.root / p

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def subset(self, entries, name: str | None = None) -> "Manifest":
        return Manifest(list(entries), name=name or self.name, root=self.root)

    def split(self, split: str) -> "Manifest":
        return self.subset([e for e in self.entries if e.split == split], name=f"{self.name}-{split}")

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            e.validate()
            if e.image_path in seen:
                raise ManifestError(f"duplicate image_path {e.image_path!r} in manifest {self.name!r}")
            seen.add(e.image_path)
        check_subject_disjoint(self.entries)


def check_subject_disjoint(entries) -> None:
    """Raise if any subject appears in both the train and the test split."""
    by_split: dict[str, set[str]] = {s: set() for s in SPLITS}
    for e in entries:
        if e.subject_id:
            by_split[e.split].add(e.subject_id)
    leaked = by_split["train"] & by_split["test"]
    if leaked:
        raise ManifestError(f"subject(s) present in both train and test splits: {sorted(leaked)[:5]}")


def _parse_row(row: dict, lineno: int) -> ImageSample:
    try:
        label = int(row["label"])
    except (TypeError, ValueError):
        raise ManifestError(f"line {lineno}: label {row.get('label')!r} is not an integer") from None
    values = {c: (row.get(c) or "").strip() for c in MANIFEST_COLUMNS[2:] + OPTIONAL_COLUMNS}
    if not row.get("image_path"):
        raise ManifestError(f"line {lineno}: empty image_path")
    sample = ImageSample(image_path=row["image_path"].strip(), label=label, **values)
    try:
        sample.validate()
    except ManifestError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from None
    return sample


def load_manifest(path, check_files: bool = True) -> Manifest:
    """Read and validate a manifest CSV.

    Relative image paths are resolved against the manifest's directory.
    Rows whose file does not exist are kept but listed in ``missing``.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        absent = [c for c in MANIFEST_COLUMNS if c not in header]
        if absent:
            raise ManifestError(f"line 1: manifest header lacks column(s) {absent}")
        seen = {}
        for row in reader:
            lineno = reader.line_num
            if None in row:
                raise ManifestError(f"line {lineno}: too many fields")
            sample = _parse_row(row, lineno)
            if sample.image_path in seen:
                raise ManifestError(
                    f"line {lineno}: duplicate image_path {sample.image_path!r} (first on line {seen[sample.image_path]})"
                )
            seen[sample.image_path] = lineno
            entries.append(sample)
    manifest = Manifest(entries, name=path.stem, root=path.parent.resolve())
    check_subject_disjoint(entries)
    if check_files:
        manifest.missing = [e.image_path for e in entries if not manifest.resolve(e).is_file()]
        if manifest.missing:
            log.warning("%s: %d listed image(s) not found", path, len(manifest.missing))
    return manifest


def write_manifest(manifest: Manifest, path) -> Path:
    """Write ``manifest`` as CSV; paths under the target directory are stored relative."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    extra = [c for c in OPTIONAL_COLUMNS if any(getattr(e, c) for e in manifest.entries)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS + tuple(extra))
        for e in manifest.entries:
            p = manifest.resolve(e).resolve()
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            writer.writerow([p.as_posix()] + [getattr(e, c) for c in MANIFEST_COLUMNS[1:]] + [getattr(e, c) for c in extra])
    return path


def balance(entries, seed: int):
    """Under-sample the majority class to the minority count.

    The original order of the surviving entries is kept.
    """
    entries = list(entries)
    labels = np.array([e.label for e in entries])
    idx = {c: np.flatnonzero(labels == c) for c in (BONA_FIDE, ATTACK)}
    if len(idx[BONA_FIDE]) == 0 or len(idx[ATTACK]) == 0:
        absent = "bona fide" if len(idx[BONA_FIDE]) == 0 else "attack"
        raise ConfigError(f"cannot balance: no {absent} samples")
    n = min(len(idx[BONA_FIDE]), len(idx[ATTACK]))
    major = BONA_FIDE if len(idx[BONA_FIDE]) > len(idx[ATTACK]) else ATTACK
    if len(idx[major]) == n:
        return entries
    rng = np.random.default_rng(seed)
    kept = rng.choice(idx[major], size=n, replace=False)
    keep = np.sort(np.concatenate([idx[1 - major], kept]))
    return [entries[i] for i in keep]


def augment(image, rng: np.random.Generator):
    """Mirror horizontally with probability 0.5 (last axis is width)."""
    if rng.random() < 0.5:
        if isinstance(image, torch.Tensor):
            return image.flip(-1)
        return np.ascontiguousarray(np.flip(image, axis=-1))
    return image


@dataclass(frozen=True)
class PreprocessConfig:
    resolution: int = 224
    channels: int = 3
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD

    @classmethod
    def from_backbone(cls, cfg) -> "PreprocessConfig":
        return cls(cfg.input_resolution, cfg.in_channels, tuple(cfg.mean), tuple(cfg.std))


def read_image(path) -> Image.Image:
    try:
        with Image.open(path) as img:
            img.load()
            return img
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc


def preprocess(image, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Image (path, PIL image or uint8 array) -> float32 (channels, R, R).

    Grayscale input is replicated across channels; values are scaled to
    [0, 1] then standardized per channel.
    """
    if isinstance(image, (str, Path)):
        image = read_image(image)
    if isinstance(image, np.ndarray):
        image = Image.fromarray(image)
    gray = image.mode in ("L", "I;16", "I", "F", "1", "LA")
    image = image.convert("L" if gray else "RGB")
    r = config.resolution
    if image.size != (r, r):
        image = image.resize((r, r), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[None], config.channels, axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
        if arr.shape[0] != config.channels:
            if config.channels == 1:
                arr = arr.mean(axis=0, keepdims=True)
            else:
                raise ConfigError(f"cannot map a {arr.shape[0]}-channel image to {config.channels} channels")
    mean = np.asarray(config.mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(config.std, dtype=np.float32).reshape(-1, 1, 1)
    return (arr - mean) / std


class ManifestDataset(torch.utils.data.Dataset):
    """Preprocessed tensors for a list of samples, optionally cached in memory."""

    def __init__(self, manifest: Manifest, entries, config: PreprocessConfig, cache: bool = True):
        self.manifest = manifest
        self.entries = list(entries)
        self.config = config
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        if self._cache is not None and i in self._cache:
            x = self._cache[i]
        else:
            x = torch.from_numpy(preprocess(self.manifest.resolve(self.entries[i]), self.config))
            if self._cache is not None:
                self._cache[i] = x
        return x, self.entries[i].label


def assign_folds(manifest: Manifest, k: int = 5, seed: int = 0) -> list[tuple[Manifest, Manifest]]:
    """Subject-disjoint k-fold partition by hashing ``subject_id``.

    Returns ``k`` (train, test) manifest pairs with ``split`` rewritten.
    """
    if k < 2:
        raise ConfigError("k must be at least 2")

    def fold_of(subject: str) -> int:
        h = hashlib.sha256(f"{seed}:{subject}".encode()).digest()
        return int.from_bytes(h[:8], "big") % k

    folds = [fold_of(e.subject_id or e.image_path) for e in manifest.entries]
    out = []
    for f in range(k):
        train = [replace(e, split="train") for e, g in zip(manifest.entries, folds) if g != f]
        test = [replace(e, split="test") for e, g in zip(manifest.entries, folds) if g == f]
        out.append(
            (
                Manifest(train, name=f"{manifest.name}-fold{f}-train", root=manifest.root),
                Manifest(test, name=f"{manifest.name}-fold{f}-test", root=manifest.root),
            )
        )
    return out


# --- synthetic stand-in data ------------------------------------------------

ATTACK_STYLES = ("textured_lens", "printout")


def _smooth(a: np.ndarray, passes: int = 2) -> np.ndarray:
    for _ in range(passes):
        a = (np.roll(a, 1, 0) + np.roll(a, -1, 0) + np.roll(a, 1, 1) + np.roll(a, -1, 1) + 4 * a) / 8.0
    return a


def _base_eye(rng: np.random.Generator, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = size / 2 + rng.uniform(-0.05, 0.05, 2) * size
    r = np.hypot(xx - cx, yy - cy) / size
    theta = np.arctan2(yy - cy, xx - cx)
    r_pupil = rng.uniform(0.10, 0.15)
    r_iris = rng.uniform(0.34, 0.40)

    streaks = np.zeros_like(r)
    for _ in range(4):
        k = rng.integers(5, 18)
        streaks += rng.uniform(4, 9) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    radial = np.cos(2 * np.pi * r / rng.uniform(0.08, 0.14) + rng.uniform(0, 2 * np.pi))
    iris = rng.uniform(95, 125) + streaks + 6 * radial
    surround = rng.uniform(160, 190) - 30 * (r - 0.4) + 8 * np.sin(yy / size * np.pi * rng.uniform(0.5, 1.5))

    img = np.where(r < r_iris, iris, surround)
    img = np.where(r < r_pupil, rng.uniform(20, 40), img)
    img = _smooth(img, passes=3)
    geom = dict(r=r, theta=theta, r_pupil=r_pupil, r_iris=r_iris, xx=xx, yy=yy)
    return img, geom


def _overlay(rng: np.random.Generator, size: int, geom: dict, style: str) -> np.ndarray:
    xx, yy, r = geom["xx"], geom["yy"], geom["r"]
    if style == "textured_lens":
        # fine dot lattice confined to the lens annulus
        period = rng.uniform(2.6, 3.6)
        ang = rng.uniform(0, np.pi)
        u = xx * np.cos(ang) + yy * np.sin(ang)
        v = -xx * np.sin(ang) + yy * np.cos(ang)
        phase = rng.uniform(0, 2 * np.pi, 2)
        dots = np.cos(2 * np.pi * u / period + phase[0]) * np.cos(2 * np.pi * v / period + phase[1])
        ring = ((r > geom["r_pupil"] * 1.1) & (r < geom["r_iris"] * 1.08)).astype(np.float64)
        return rng.uniform(40, 55) * dots * _smooth(ring, 1)
    if style == "printout":
        # faint horizontal halftone banding plus binary dither over the whole frame
        period = rng.uniform(3.5, 5.0)
        bands = np.sign(np.sin(2 * np.pi * yy / period + rng.uniform(0, 2 * np.pi)))
        dither = rng.choice([-1.0, 1.0], size=(size, size))
        return rng.uniform(3, 6) * bands + rng.uniform(2, 4) * dither
    raise ConfigError(f"unknown attack style {style!r}; expected one of {ATTACK_STYLES}")


def synth_image(rng: np.random.Generator, size: int = 224, attack_type: str = "none") -> np.ndarray:
    """One uint8 grayscale image; ``attack_type`` 'none' gives a bona fide sample."""
    img, geom = _base_eye(rng, size)
    if attack_type != "none":
        img = img + _overlay(rng, size, geom, attack_type)
    img = img + rng.normal(0, 2.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_dataset(
    seed: int,
    n_per_class: int,
    out_dir,
    size: int = 224,
    attack_types=("textured_lens",),
    split: str = "train",
    database: str = "synthetic",
    sensor: str = "synthetic-nir",
    subject_prefix: str = "s",
    manifest_name: str = "manifest.csv",
) -> Manifest:
    """Write ``n_per_class`` bona fide and attack PNGs plus a manifest CSV.

    Attack styles cycle through ``attack_types``. Subject ``i`` contributes
    bona fide image ``i`` and attack image ``i``. Output is a pure function
    of the arguments.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    if n_per_class < 1:
        raise ConfigError("n_per_class must be positive")
    attack_types = tuple(attack_types)
    for a in attack_types:
        if a not in ATTACK_STYLES:
            raise ConfigError(f"unknown attack style {a!r}; expected one of {ATTACK_STYLES}")

    streams = np.random.SeedSequence(seed).spawn(2 * n_per_class)
    entries = []
    for i in range(n_per_class):
        subject = f"{subject_prefix}{i:04d}"
        for label, kind in ((BONA_FIDE, "none"), (ATTACK, attack_types[i % len(attack_types)])):
            rng = np.random.default_rng(streams[2 * i + label])
            img = synth_image(rng, size, kind)
            name = f"{'bf' if label == BONA_FIDE else 'pa'}_{subject}.png"
            Image.fromarray(img, mode="L").save(img_dir / name, optimize=False)
            entries.append(
                ImageSample(
                    image_path=f"images/{name}",
                    label=label,
                    attack_type=kind,
                    database=database,
                    sensor=sensor,
                    split=split,
                    subject_id=subject,
                )
            )
    manifest = Manifest(entries, name=Path(manifest_name).stem, root=out_dir.resolve())
    manifest.validate()
    write_manifest(manifest, out_dir / manifest_name)
    return manifest


def bandpass_energy(img: np.ndarray) -> float:
    """Mean squared difference-of-smoothings response; high for fine texture."""
    a = img.astype(np.float64)
    fine = _smooth(a, 1)
    coarse = _smooth(a, 4)
    return float(np.mean((fine - coarse) ** 2))
