"""Dataset manifests, image preprocessing, stratified splits, synthetic data."""

from __future__ import annotations

import colorsys
import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import ContractViolation

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

MANIFEST_HEADER = "dpc-manifest v1"
SPLITS = ("train", "test")
SYNTHETIC_PREFIX = "synthetic:"
SYNTHETIC_LABELS = ("amusement", "anger", "awe", "contentment",
                    "disgust", "excitement", "fear", "sadness")
CERTIFICATE_THRESHOLD = 0.99


class ManifestError(ContractViolation):
    pass


class ImageReadError(OSError):
    pass


class SeparabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    label: str
    split: str


@dataclass
class DatasetManifest:
    records: tuple[Record, ...]
    labels: tuple[str, ...]
    images: dict[str, np.ndarray] | None = None  # in-memory pixels for synthetic data
    certificate: float | None = None
    root: Path | None = None

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ManifestError(f"need at least 2 labels, got {list(self.labels)}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def targets(self) -> np.ndarray:
        index = {label: i for i, label in enumerate(self.labels)}
        return np.array([index[r.label] for r in self.records], dtype=np.int64)

    def class_counts(self) -> list[int]:
        return np.bincount(self.targets(), minlength=self.n_classes).tolist()

    def subset(self, records: Sequence[Record]) -> "DatasetManifest":
        return replace(self, records=tuple(records))

    def by_split(self, tag: str) -> "DatasetManifest":
        return self.subset([r for r in self.records if r.split == tag])


def _validate_records(records: Sequence[Record], labels: Sequence[str]) -> list[str]:
    problems = []
    seen: set[str] = set()
    dupes = sorted({r.path for r in records if r.path in seen or seen.add(r.path)})
    if dupes:
        problems.append(f"duplicate paths: {dupes}")
    bad_split = sorted({r.split for r in records if r.split not in SPLITS})
    if bad_split:
        problems.append(f"unknown split tags: {bad_split} (allowed: {list(SPLITS)})")
    unknown = sorted({r.label for r in records if r.label not in labels})
    if unknown:
        problems.append(f"labels not in declared set: {unknown}")
    present = {r.label for r in records}
    empty = [label for label in labels if label not in present]
    if empty:
        problems.append(f"empty classes: {empty}")
    return problems


def load_manifest(file: str | Path) -> DatasetManifest:
    """Parse a ``dpc-manifest v1`` file.

    An optional ``labels=a,b,c`` line after the header fixes the label order;
    otherwise labels are ordered by first appearance.
    """
    path = Path(file)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"{path}: first line must be {MANIFEST_HEADER!r}")
    body = [line for line in lines[1:] if line.strip() and not line.lstrip().startswith("#")]
    declared: list[str] | None = None
    if body and body[0].startswith("labels="):
        declared = [x.strip() for x in body[0][len("labels="):].split(",") if x.strip()]
        body = body[1:]
    records = []
    problems = []
    for lineno, row in enumerate(csv.reader(body), start=1):
        if len(row) != 3:
            problems.append(f"record {lineno}: expected path,label,split, got {row}")
            continue
        records.append(Record(*(x.strip() for x in row)))
    labels = declared if declared is not None else list(dict.fromkeys(r.label for r in records))
    problems += _validate_records(records, labels)
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems))
    return DatasetManifest(tuple(records), tuple(labels), root=path.parent)


def write_manifest(manifest: DatasetManifest, file: str | Path) -> None:
    buf = io.StringIO()
    buf.write(MANIFEST_HEADER + "\n")
    buf.write("labels=" + ",".join(manifest.labels) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    for r in manifest.records:
        writer.writerow([r.path, r.label, r.split])
    Path(file).write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    size: int = 224

    @classmethod
    def load(cls, name_or_path: str = "clip") -> "PreprocessConfig":
        """``"clip"``/``"tiny"`` load the shipped constants; anything else is a path."""
        if name_or_path in ("clip", "tiny"):
            text = resources.files("dpc.configs").joinpath(f"preprocess_{name_or_path}.toml").read_text()
        else:
            text = Path(name_or_path).read_text(encoding="utf-8")
        data = tomllib.loads(text)
        return cls(tuple(data["mean"]), tuple(data["std"]), int(data.get("size", 224)))


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "LA", "RGB", "RGBA"):
                img = img.convert("RGBA" if "A" in img.getbands() else "RGB")
            return np.asarray(img).copy()
    except Exception as exc:  # PIL raises a zoo of types
        raise ImageReadError(f"cannot read image {str(path)!r}: {exc}") from exc


def to_rgb(image: np.ndarray) -> np.ndarray:
    """HxW / HxWxC (C in 1..4) -> HxWx3 float in [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1 or not 1 <= img.shape[2] <= 4:
        raise ContractViolation(f"preprocess: unsupported image shape {np.asarray(image).shape}")
    if np.issubdtype(img.dtype, np.integer):
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64)
    channels = img.shape[2]
    if channels in (1, 2):  # grey (+ alpha)
        img = np.repeat(img[:, :, :1], 3, axis=2)
    elif channels == 4:
        img = img[:, :, :3]
    return img


def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel centres (corner-aligned = false): src = (dst + 0.5) * n_in / n_out - 0.5,
    # clamped to [0, n_in - 1].
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    y0, y1, wy = _bilinear_axis(img.shape[0], height)
    x0, x1, wx = _bilinear_axis(img.shape[1], width)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resized_shape(height: int, width: int, size: int) -> tuple[int, int]:
    """Shorter side becomes ``size``; the longer side scales and truncates."""
    if height <= width:
        return size, max(size, int(width * size / height))
    return max(size, int(height * size / width)), size


def preprocess(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Resize shorter side to S (bilinear), centre-crop SxS, CHW, normalise.

    The crop's top-left corner is ``((h - S) // 2, (w - S) // 2)``.
    """
    img = to_rgb(image)
    s = config.size
    h, w = resized_shape(img.shape[0], img.shape[1], s)
    if (h, w) != img.shape[:2]:
        img = resize_bilinear(img, h, w)
    top, left = (h - s) // 2, (w - s) // 2
    img = img[top:top + s, left:left + s]
    mean = np.asarray(config.mean, dtype=np.float64)
    std = np.asarray(config.std, dtype=np.float64)
    out = ((img - mean) / std).transpose(2, 0, 1)
    return np.ascontiguousarray(out, dtype=np.float32)


def load_pixels(manifest: DatasetManifest, config: PreprocessConfig, threads: int = 1) -> np.ndarray:
    """Preprocessed (N, 3, S, S) pixels in manifest order."""

    def one(record: Record) -> np.ndarray:
        if record.path.startswith(SYNTHETIC_PREFIX):
            if manifest.images is None or record.path not in manifest.images:
                raise ManifestError(f"no in-memory pixels for {record.path!r}")
            return preprocess(manifest.images[record.path], config)
        path = Path(record.path)
        if not path.is_absolute() and manifest.root is not None:
            path = manifest.root / path
        return preprocess(load_image(path), config)

    if not manifest.records:
        return np.zeros((0, 3, config.size, config.size), dtype=np.float32)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        # map() yields in submission order whatever the completion order.
        return np.stack(list(pool.map(one, manifest.records)))


# ---------------------------------------------------------------------------
# splitting


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [f * n for f in fractions]
    counts = [int(np.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def split(manifest: DatasetManifest, fractions: Sequence[float] = (0.8, 0.2),
          seed: int = 0) -> tuple[DatasetManifest, ...]:
    """Stratified, seeded split; parts are tagged train, test (in that order)."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != len(SPLITS) or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ContractViolation(f"split fractions must be {len(SPLITS)} non-negative values summing to 1, got {fractions}")
    targets = manifest.targets()
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in fractions]
    small = [manifest.labels[c] for c in range(manifest.n_classes) if (targets == c).sum() < len(fractions)]
    if small:
        raise ContractViolation(f"classes with fewer records than split parts: {small}")
    for c in range(manifest.n_classes):
        members = np.flatnonzero(targets == c)
        members = members[rng.permutation(len(members))]
        start = 0
        for k, count in enumerate(_allocate(len(members), fractions)):
            parts[k].extend(members[start:start + count].tolist())
            start += count
    out = []
    for tag, idx in zip(SPLITS, parts):
        out.append(manifest.subset([replace(manifest.records[i], split=tag) for i in sorted(idx)]))
    return tuple(out)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 3
    per_class: int = 60
    image_size: int = 32
    seed: int = 0
    noise: float = 0.1
    jitter: float = 0.1
    labels: tuple[str, ...] | None = None
    class_means: tuple[tuple[float, float, float], ...] | None = None

    def label_names(self) -> tuple[str, ...]:
        if self.labels is not None:
            return tuple(self.labels)
        if self.classes <= len(SYNTHETIC_LABELS):
            return SYNTHETIC_LABELS[: self.classes]
        return tuple(f"class{k}" for k in range(self.classes))

    def means(self) -> np.ndarray:
        if self.class_means is not None:
            return np.asarray(self.class_means, dtype=np.float64)
        # evenly spaced hues
        return np.array([colorsys.hsv_to_rgb(k / self.classes, 0.6, 0.7) for k in range(self.classes)])


def synthetic_pixels(spec: SyntheticSpec, seed: int) -> dict[str, np.ndarray]:
    """Class colour + per-image brightness jitter + per-pixel Gaussian noise."""
    rng = np.random.default_rng(seed)
    means = spec.means()
    s = spec.image_size
    images = {}
    k = 0
    for c in range(spec.classes):
        for _ in range(spec.per_class):
            shift = rng.uniform(-spec.jitter, spec.jitter)
            img = means[c] + shift + rng.standard_normal((s, s, 3)) * spec.noise
            images[f"{SYNTHETIC_PREFIX}{k:05d}"] = np.clip(img, 0, 1).astype(np.float32)
            k += 1
    return images


def linear_probe_accuracy(features: np.ndarray, targets: np.ndarray) -> float:
    """Training accuracy of a multinomial logistic-regression probe."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    x = StandardScaler().fit_transform(np.asarray(features, dtype=np.float64))
    probe = LogisticRegression(C=100.0, max_iter=5000)
    probe.fit(x, targets)
    return float((probe.predict(x) == targets).mean())


def make_synthetic(spec: SyntheticSpec, image_encoder, config: PreprocessConfig,
                   max_attempts: int = 5) -> DatasetManifest:
    """Generate a dataset whose frozen-encoder features are linearly separable.

    If the probe certificate falls below 0.99 the generation seed is bumped by
    one and generation retried, up to ``max_attempts`` times.
    """
    if spec.classes < 2 or spec.per_class < 1:
        raise ContractViolation(f"synthetic spec needs >= 2 classes and >= 1 instance per class: {spec}")
    labels = spec.label_names()
    if len(labels) != spec.classes:
        raise ContractViolation(f"{len(labels)} label names for {spec.classes} classes")
    attempts = []
    for attempt in range(max_attempts):
        seed = spec.seed + attempt
        images = synthetic_pixels(spec, seed)
        records = tuple(Record(path, labels[i // spec.per_class], "train")
                        for i, path in enumerate(images))
        manifest = DatasetManifest(records, labels, images=images)
        pixels = load_pixels(manifest, config)
        features = image_encoder.encode(pixels).data
        cert = linear_probe_accuracy(features, manifest.targets())
        attempts.append((seed, cert))
        if cert >= CERTIFICATE_THRESHOLD:
            manifest.certificate = cert
            return manifest
    raise SeparabilityError(
        f"synthetic data not separable after {max_attempts} attempts (seed, probe accuracy): {attempts}")
