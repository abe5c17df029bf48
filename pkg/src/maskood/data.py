"""Dataset ingestion, splits, batching and pseudo-labelling.

Images are kept as float32 arrays in [0, 1], channel-first (3, H, W). Two
on-disk formats are supported:

* a PNG directory tree ``root/<class_name>/<file>.png`` where class ids follow
  the lexicographic order of the class directory names;
* a single binary record file (``MDC1``), see :func:`write_records`.
"""
from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, StateError, ValidationError
from .seeding import substream

log = logging.getLogger(__name__)

UNLABELED = -1
CANONICAL_SIZE = 32
RECORD_MAGIC = b"MDC1"
_HEADER = struct.Struct("<4sIIIII")
_LABEL = struct.Struct("<I")
_UNLABELED_U32 = 0xFFFFFFFF


class Source(str, enum.Enum):
    IN_D_TRAIN = "in_d_train"
    IN_D_VAL = "in_d_val"
    IN_D_TEST = "in_d_test"
    OOD_TEST = "ood_test"
    EXTERNAL_UNLABELED = "external_unlabeled"


_MAY_BE_UNLABELED = (Source.OOD_TEST, Source.EXTERNAL_UNLABELED)


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int
    source: Source


@dataclass
class DatasetManifest:
    name: str
    root: str
    image_count: int
    class_count: int
    split: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.image_count <= 0:
            raise ValidationError(f"manifest {self.name!r}: image_count must be > 0")
        if self.class_count <= 0:
            raise ValidationError(f"manifest {self.name!r}: class_count must be > 0")
        self.split = tuple(float(f) for f in self.split)
        _check_fractions(self.split)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "root": str(self.root),
            "image_count": self.image_count,
            "class_count": self.class_count,
            "split": list(self.split),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        unknown = set(d) - {"name", "root", "image_count", "class_count", "split"}
        if unknown:
            raise ValidationError(f"manifest: unknown fields {sorted(unknown)}")
        try:
            return cls(
                name=str(d["name"]),
                root=str(d["root"]),
                image_count=int(d["image_count"]),
                class_count=int(d["class_count"]),
                split=tuple(d.get("split", (0.8, 0.1, 0.1))),
            )
        except KeyError as exc:
            raise ValidationError(f"manifest: missing field {exc.args[0]!r}") from None


@dataclass
class ImageSet:
    """Immutable-by-convention collection of images sharing one source tag.

    Behaves as a sequence of :class:`LabeledImage`; the arrays are exposed for
    vectorised model code.
    """

    pixels: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int64, UNLABELED where unknown
    source: Source
    num_classes: int
    name: str = ""
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ValidationError(f"pixels must be (N, 3, H, W), got {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise ValidationError("pixels and labels differ in length")
        if self.ids is None:
            self.ids = np.arange(len(self.pixels), dtype=np.int64)
        self.source = Source(self.source)
        if len(self.pixels) and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValidationError("pixel values must lie in [0, 1]")
        labelled = self.labels != UNLABELED
        if np.any(labelled & ((self.labels < 0) | (self.labels >= self.num_classes))):
            raise ValidationError(f"labels must be in [0, {self.num_classes})")
        if self.source not in _MAY_BE_UNLABELED and not labelled.all():
            raise ValidationError(f"{self.source.value} images must all be labelled")

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.pixels[i], int(self.labels[i]), self.source)

    def __iter__(self) -> Iterator[LabeledImage]:
        return (self[i] for i in range(len(self)))

    def subset(self, index, source: Source | None = None) -> "ImageSet":
        index = np.asarray(index, dtype=np.int64)
        return ImageSet(
            self.pixels[index],
            self.labels[index],
            source or self.source,
            self.num_classes,
            self.name,
            self.ids[index],
        )

    def with_source(self, source: Source) -> "ImageSet":
        return ImageSet(self.pixels, self.labels, source, self.num_classes, self.name, self.ids)

    def with_labels(self, labels) -> "ImageSet":
        return ImageSet(self.pixels, labels, self.source, self.num_classes, self.name, self.ids)


def _check_fractions(fractions: Sequence[float]) -> None:
    if len(fractions) == 0 or any(not (0.0 < f <= 1.0) for f in fractions):
        raise ValidationError(f"split fractions must each lie in (0, 1]: {list(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must sum to 1: {list(fractions)}")


# -- binary record file -------------------------------------------------------


def write_records(path, pixels_hwc: np.ndarray, labels: Sequence[int], num_classes: int) -> None:
    """Write ``MDC1``: little-endian header then ``u32 label`` + ``H*W*C`` u8 per record.

    ``pixels_hwc`` is uint8 (N, H, W, C); an UNLABELED label is stored as 0xFFFFFFFF.
    """
    pixels_hwc = np.asarray(pixels_hwc)
    if pixels_hwc.dtype != np.uint8 or pixels_hwc.ndim != 4:
        raise ValidationError("records need uint8 pixels shaped (N, H, W, C)")
    n, h, w, c = pixels_hwc.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValidationError("one label per record required")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RECORD_MAGIC, n, h, w, c, num_classes))
        for img, lab in zip(pixels_hwc, labels):
            fh.write(_LABEL.pack(_UNLABELED_U32 if lab == UNLABELED else int(lab)))
            fh.write(np.ascontiguousarray(img).tobytes())


def read_records(path):
    """Return ``(pixels uint8 (N,H,W,C), labels int64, num_classes)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise
    if len(raw) < _HEADER.size:
        raise DataError("truncated record header", path)
    magic, n, h, w, c, k = _HEADER.unpack_from(raw, 0)
    if magic != RECORD_MAGIC:
        raise DataError(f"bad magic {magic!r}", path)
    rec = _LABEL.size + h * w * c
    if len(raw) != _HEADER.size + n * rec:
        raise DataError(f"expected {n} records of {rec} bytes", path)
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec)
    labels = body[:, : _LABEL.size].copy().view("<u4").reshape(n).astype(np.int64)
    labels[labels == _UNLABELED_U32] = UNLABELED
    pixels = body[:, _LABEL.size :].reshape(n, h, w, c).copy()
    return pixels, labels, int(k)


# -- loading ------------------------------------------------------------------


def _to_canonical(img_hwc: np.ndarray) -> np.ndarray:
    """uint8 (H, W, C) -> float32 (3, 32, 32) in [0, 1], bilinear resize if needed."""
    from PIL import Image

    if img_hwc.shape[2] == 1:
        img_hwc = np.repeat(img_hwc, 3, axis=2)
    if img_hwc.shape[:2] != (CANONICAL_SIZE, CANONICAL_SIZE):
        pil = Image.fromarray(img_hwc[:, :, :3])
        pil = pil.resize((CANONICAL_SIZE, CANONICAL_SIZE), Image.BILINEAR)
        img_hwc = np.asarray(pil)
    return (img_hwc[:, :, :3].astype(np.float32) / 255.0).transpose(2, 0, 1)


def _load_png_tree(root: Path, strict: bool):
    from PIL import Image

    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    pixels, labels = [], []
    for cls_id, cls_name in enumerate(classes):
        for f in sorted((root / cls_name).glob("*.png")):
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"))
            except Exception as exc:  # PIL raises a zoo of exception types
                err = DataError(f"cannot decode image ({exc.__class__.__name__})", f)
                if strict:
                    raise err from exc
                log.warning("skipping %s", err)
                continue
            pixels.append(_to_canonical(arr))
            labels.append(cls_id)
    return pixels, labels, len(classes)


def load_dataset(manifest: DatasetManifest, source: Source = Source.IN_D_TRAIN, strict: bool = True) -> ImageSet:
    """Load every image named by ``manifest`` as an :class:`ImageSet`.

    With ``strict=False`` undecodable PNGs are skipped with a warning instead of
    aborting the load.
    """
    root = Path(manifest.root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    if root.is_dir():
        pixels, labels, k = _load_png_tree(root, strict)
        if k != manifest.class_count and source not in _MAY_BE_UNLABELED:
            raise ValidationError(f"{manifest.name}: found {k} classes, manifest says {manifest.class_count}")
        arr = np.stack(pixels) if pixels else np.zeros((0, 3, CANONICAL_SIZE, CANONICAL_SIZE), np.float32)
        labels = np.asarray(labels, dtype=np.int64)
    else:
        raw, labels, k = read_records(root)
        if k != manifest.class_count:
            raise ValidationError(f"{manifest.name}: record file has K={k}, manifest says {manifest.class_count}")
        arr = np.stack([_to_canonical(img) for img in raw]) if len(raw) else np.zeros((0, 3, 32, 32), np.float32)
    if strict and len(arr) != manifest.image_count:
        raise ValidationError(f"{manifest.name}: found {len(arr)} images, manifest says {manifest.image_count}")
    if source == Source.EXTERNAL_UNLABELED:
        labels = np.full(len(arr), UNLABELED, dtype=np.int64)
    return ImageSet(arr, labels, source, manifest.class_count, manifest.name)


def split(dataset: ImageSet, fractions: Sequence[float], seed: int):
    """Seeded disjoint partition into ``len(fractions)`` parts (train, val, test).

    Part sizes are ``round(n * f)`` for all but the last part, which takes the
    remainder.
    """
    fractions = [float(f) for f in fractions]
    _check_fractions(fractions)
    n = len(dataset)
    order = substream(seed, "data-split").permutation(n)
    sizes = [int(round(n * f)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        raise ValidationError("split fractions overflow the dataset")
    sources = [Source.IN_D_TRAIN, Source.IN_D_VAL, Source.IN_D_TEST]
    parts, start = [], 0
    for i, size in enumerate(sizes):
        idx = np.sort(order[start : start + size])
        src = sources[i] if dataset.source in sources and i < len(sources) else dataset.source
        parts.append(dataset.subset(idx, src))
        start += size
    return tuple(parts)


def batches(dataset: ImageSet, batch_size: int, seed: int, epoch: int = 0) -> Iterator[ImageSet]:
    """One epoch of seeded-shuffled batches; the final partial batch is kept."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    order = substream(seed, "data-batches", epoch).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield dataset.subset(order[start : start + batch_size])


def endless_batches(dataset: ImageSet, batch_size: int, seed: int) -> Iterator[ImageSet]:
    epoch = 0
    while True:
        yield from batches(dataset, batch_size, seed, epoch)
        epoch += 1


def sample_mismatched_labels(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from ``{0..K-1} \\ {label}`` for each entry."""
    if num_classes < 2:
        raise ValidationError("mismatched labels need at least 2 classes")
    labels = np.asarray(labels, dtype=np.int64)
    offset = rng.integers(1, num_classes, size=labels.shape)
    return (labels + offset) % num_classes


def pseudo_label(classifier, items: ImageSet) -> ImageSet:
    """Replace sentinel labels by the classifier's argmax prediction; source unchanged."""
    if classifier is None or not getattr(classifier, "trained", False):
        raise StateError("pseudo-labelling needs a trained classifier")
    if len(items) == 0:
        return items
    from .classifier import predict

    labels, _ = predict(classifier, items.pixels)
    log.info("pseudo-labelled %d external images (%s)", len(items), np.bincount(labels, minlength=items.num_classes).tolist())
    return items.with_labels(labels)
