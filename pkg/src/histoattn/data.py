"""BreakHis-style dataset trees: scanning, stratified splitting, batching,
and a synthetic two-class generator.

Expected layout::

    root/{benign,malignant}/{40X,100X,200X,400X}/<patient_id>/<image files>
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, IoError, SplitError
from .formats import IMAGE_SUFFIXES, read_image, write_image
from .preprocess import PreprocessConfig, augment, normalize, prepare

MAGNIFICATIONS = ("40X", "100X", "200X", "400X")
CLASS_DIRS = ("benign", "malignant")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: int
    magnification: str
    patient_id: str
    split: Optional[str] = None


@dataclass
class Manifest:
    records: list[SampleRecord] = field(default_factory=list)
    root: Optional[str] = None
    fingerprint: str = ""
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise DataError("manifest lists a path more than once")

    def __len__(self) -> int:
        return len(self.records)

    def counts(self) -> Counter:
        """Record counts keyed by (label, magnification, split)."""
        return Counter((r.label, r.magnification, r.split) for r in self.records)

    def select(self, split: Optional[str] = None, magnification: Optional[str] = None) -> list[SampleRecord]:
        return [r for r in self.records
                if (split is None or r.split == split)
                and (magnification is None or r.magnification == magnification)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        header = {"root": self.root, "fingerprint": self.fingerprint, "n": len(self.records),
                  "warnings": self.warnings}
        buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "label", "magnification", "patient_id", "split"])
        for r in self.records:
            w.writerow([r.path, r.label, r.magnification, r.patient_id, r.split or ""])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Manifest":
        first, _, rest = text.partition("\n")
        if not first.startswith("# "):
            raise DataError("manifest CSV lacks its JSON header line")
        header = json.loads(first[2:])
        rows = list(csv.DictReader(io.StringIO(rest)))
        recs = [SampleRecord(r["path"], int(r["label"]), r["magnification"], r["patient_id"],
                             r["split"] or None) for r in rows]
        return cls(recs, header.get("root"), header.get("fingerprint", ""), header.get("warnings", []))

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "Manifest":
        try:
            return cls.from_csv(Path(path).read_text())
        except OSError as exc:
            raise IoError(f"cannot read manifest {path}: {exc}") from exc


def _fingerprint(root: Path, records: Sequence[SampleRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        rel = Path(r.path).relative_to(root).as_posix()
        h.update(f"{rel}|{r.label}|{r.magnification}|{r.patient_id}\n".encode())
        h.update(hashlib.sha256(Path(r.path).read_bytes()).digest())
    return h.hexdigest()


def scan_dataset(root) -> Manifest:
    """One record per decodable image under ``root``, sorted by path."""
    root = Path(root)
    if not root.is_dir():
        raise IoError(f"dataset root {root} is not a readable directory")
    records, warnings = [], []
    candidates = []
    for label, cls_dir in enumerate(CLASS_DIRS):
        for mag in MAGNIFICATIONS:
            mag_dir = root / cls_dir / mag
            if not mag_dir.is_dir():
                continue
            for patient_dir in mag_dir.iterdir():
                if not patient_dir.is_dir():
                    continue
                for f in patient_dir.iterdir():
                    if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                        candidates.append((str(f), label, mag, patient_dir.name))
    for path, label, mag, pid in sorted(candidates):
        try:
            read_image(path)
        except (DataError, IoError) as exc:
            warnings.append(f"{path}: {exc}")
            continue
        records.append(SampleRecord(path, label, mag, pid))
    return Manifest(records, str(root), _fingerprint(root, records), warnings)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _check_fractions(fractions) -> np.ndarray:
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    return f


def _largest_remainder(n: int, fractions: np.ndarray) -> np.ndarray:
    exact = n * fractions
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts


def split_stratified(m: Manifest, fractions=(0.7, 0.15, 0.15), seed: int = 0,
                     by_patient: bool = True) -> Manifest:
    """Assign train/val/test, stratified by (label, magnification).

    With ``by_patient`` whole patients are allocated, grouped by label and the
    set of magnifications they cover, so split membership is a function of
    patient id.
    """
    f = _check_fractions(fractions)
    bounds = np.cumsum(f)
    assign: dict[str, str] = {}
    if by_patient:
        images: dict = defaultdict(Counter)
        labels_of, mags_of = defaultdict(set), defaultdict(set)
        for r in m.records:
            labels_of[r.patient_id].add(r.label)
            mags_of[r.patient_id].add(MAGNIFICATIONS.index(r.magnification))
        mixed = [p for p, ls in labels_of.items() if len(ls) > 1]
        if mixed:
            raise SplitError(f"patients carry both labels: {sorted(mixed)[:5]}")
        # patients are stratified by label and by which magnifications they cover
        for r in m.records:
            images[(r.label, *sorted(mags_of[r.patient_id]))][r.patient_id] += 1
        for key in sorted(images):
            patients = sorted(images[key])
            rng = np.random.default_rng([seed, *key])
            patients = [patients[i] for i in rng.permutation(len(patients))]
            total = sum(images[key].values())
            done = 0
            for pid in patients:
                n = images[key][pid]
                mid = (done + n / 2) / total
                # the first bound strictly above mid never belongs to a zero-width split
                k = min(int(np.searchsorted(bounds, mid, side="right")), 2)
                assign[pid] = SPLITS[k]
                done += n
        out = [replace(r, split=assign[r.patient_id]) for r in m.records]
    else:
        strata = defaultdict(list)
        for r in m.records:
            strata[(r.label, r.magnification)].append(r)
        path_split = {}
        for key in sorted(strata):
            recs = sorted(strata[key], key=lambda r: r.path)
            rng = np.random.default_rng([seed, key[0], MAGNIFICATIONS.index(key[1])])
            perm = rng.permutation(len(recs))
            counts = _largest_remainder(len(recs), f)
            start = 0
            for k, c in enumerate(counts):
                for i in perm[start:start + c]:
                    path_split[recs[i].path] = SPLITS[k]
                start += c
        out = [replace(r, split=path_split[r.path]) for r in m.records]

    populated = Counter((r.label, r.magnification, r.split) for r in out)
    for label, mag in sorted({(r.label, r.magnification) for r in out}):
        for k, name in enumerate(SPLITS):
            if f[k] > 0 and populated[(label, mag, name)] == 0:
                raise SplitError(f"stratum ({CLASS_DIRS[label]}, {mag}) too small to populate "
                                 f"the {name} split")
    return Manifest(out, m.root, m.fingerprint, list(m.warnings))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def _sample_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


class ImageSet:
    """Records of one split, decoded and run through the deterministic
    preprocessing stages once; augmentation happens per epoch."""

    def __init__(self, records: Sequence[SampleRecord], cfg: PreprocessConfig, augment_train: bool = True):
        if not records:
            raise DataError("empty selection")
        self.records = list(records)
        self.cfg = cfg
        self.augment_train = augment_train
        self.labels = np.array([r.label for r in self.records], dtype=np.float64)
        self.images = [prepare(read_image(r.path), cfg) for r in self.records]

    @classmethod
    def from_manifest(cls, m: Manifest, split: Optional[str], cfg: PreprocessConfig,
                      magnification: Optional[str] = None) -> "ImageSet":
        return cls(m.select(split, magnification), cfg, augment_train=(split == "train"))

    def __len__(self) -> int:
        return len(self.records)

    def tensor(self, i: int, training: bool = False, epoch: int = 0) -> np.ndarray:
        img = self.images[i]
        if training and self.augment_train:
            img = augment(img, self.cfg.augment, _sample_seed(self.cfg.seed, epoch, i))
        return normalize(img).data

    def batches(self, batch_size: int, seed: Optional[int] = None, epoch: int = 0,
                training: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        if batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        order = np.arange(len(self))
        if seed is not None:
            order = np.random.default_rng([seed, epoch]).permutation(len(self))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            x = np.stack([self.tensor(int(i), training, epoch) for i in idx])
            yield x, self.labels[idx]


def batches(m: Manifest, split: Optional[str], magnification: Optional[str], batch_size: int,
            seed: Optional[int], cfg: PreprocessConfig, epoch: int = 0
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded minibatch stream; train-split images are augmented."""
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    recs = m.select(split, magnification)
    if not recs:
        raise DataError(f"no records for split={split!r}, magnification={magnification!r}")
    ds = ImageSet(recs, cfg, augment_train=(split == "train"))
    yield from ds.batches(batch_size, seed, epoch, training=(split == "train"))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

# blur sigma and feature scale per magnification
_MAG_STYLE = {"40X": (1.0, 0.6), "100X": (0.7, 0.8), "200X": (0.4, 1.0), "400X": (0.0, 1.3)}


def render_patch(rng: np.random.Generator, label: int, size: tuple[int, int], mag: str) -> np.ndarray:
    """One synthetic uint8 grey patch of class ``label`` at magnification ``mag``."""
    H, W = size
    blur, scale = _MAG_STYLE[mag]
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    if label == 0:
        # smooth low-frequency blobs
        img = np.full((H, W), 205.0)
        for _ in range(int(rng.integers(4, 8))):
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            s = rng.uniform(0.12, 0.25) * min(H, W) * scale
            img += rng.uniform(-70, -30) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += rng.normal(0.0, 1.5, (H, W))
    else:
        # speckled texture with elongated dark nuclei
        img = 190.0 + rng.normal(0.0, 28.0, (H, W))
        n_nuclei = max(3, int(H * W / 400))
        for _ in range(int(rng.integers(n_nuclei, 2 * n_nuclei))):
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            a = rng.uniform(3.0, 6.0) * scale
            b = a * rng.uniform(0.3, 0.6)
            t = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
            v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
            mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
            img[mask] = rng.uniform(50, 90) + rng.normal(0.0, 10.0, int(mask.sum()))
    if blur > 0:
        img = gaussian_filter(img, blur, mode="nearest")
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def synthetic_patient_id(label: int, k: int) -> str:
    return f"SYN-{'BM'[label]}-{k:03d}"


def generate_synthetic(out, n_per_class: int, size: tuple[int, int] = (96, 96), seed: int = 0) -> list[Path]:
    """Write a BreakHis-style tree of PGM files: ``n_per_class`` images per
    (class, magnification). Patient ``k`` of each class owns image ``k`` at
    every magnification."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be at least 1")
    out = Path(out)
    written = []
    for label, cls_dir in enumerate(CLASS_DIRS):
        for mi, mag in enumerate(MAGNIFICATIONS):
            for k in range(n_per_class):
                rng = np.random.default_rng([seed, label, mi, k])
                pid = synthetic_patient_id(label, k)
                path = out / cls_dir / mag / pid / f"{pid}-{mag}-{k:03d}.pgm"
                write_image(path, render_patch(rng, label, tuple(size), mag))
                written.append(path)
    return written


def laplacian_variance(img: np.ndarray) -> float:
    """Variance of the 4-neighbour Laplacian over the interior."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=2)
    lap = a[1:-1, :-2] + a[1:-1, 2:] + a[:-2, 1:-1] + a[2:, 1:-1] - 4 * a[1:-1, 1:-1]
    return float(lap.var())
