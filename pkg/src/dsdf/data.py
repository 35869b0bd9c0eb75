"""Datasets: IDX (MNIST-style), CSV, and synthetic Gaussian blobs with superclasses."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    input_shape: tuple
    category_names: list | None = None
    superclasses: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise ValidationError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = self.labels[(self.labels < 0) | (self.labels >= self.num_classes)]
            raise ValidationError(f"labels out of range 0..{self.num_classes - 1}: {bad[:5].tolist()}")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes, self.input_shape,
                       self.category_names, self.superclasses, dict(self.meta))


def split_dataset(ds, test_fraction=0.2, seed=0):
    """Stratified deterministic train/test split."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        k = int(round(test_fraction * len(idx)))
        test.append(idx[:k])
        train.append(idx[k:])
    return ds.subset(np.sort(np.concatenate(train))), ds.subset(np.sort(np.concatenate(test)))


# ---------------------------------------------------------------------------
# IDX


def read_idx(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ParseError("IDX file shorter than its magic number", position="byte 0")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in IDX_DTYPES:
        raise ParseError(f"bad IDX magic 0x{raw[:4].hex()}", position="byte 0")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ParseError("truncated IDX dimension header", position=f"byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dt = IDX_DTYPES[code]
    need = head + int(np.prod(dims)) * dt.itemsize
    if len(raw) < need:
        raise ParseError(f"IDX payload needs {need} bytes, file has {len(raw)}", position=f"byte {len(raw)}")
    return np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=head).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    code = next(k for k, v in IDX_DTYPES.items()
                if v.kind == array.dtype.kind and v.itemsize == array.dtype.itemsize)
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(IDX_DTYPES[code]).tobytes())


def load_idx(images_path, labels_path, num_classes=None):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise ParseError("label file must be one-dimensional", position="byte 3")
    if images.ndim == 3:
        images = images[:, None]
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    samples = images.astype(np.float64) / scale
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(samples, labels.astype(np.int64), C, tuple(samples.shape[1:]))


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, num_classes=None):
    """Rows of ``label,feature,...``; a non-numeric first line is taken as a header."""
    labels, rows = [], []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                label = int(parts[0])
                feats = [float(p) for p in parts[1:]]
            except ValueError as exc:
                if lineno == 1 and not rows:
                    continue
                raise ParseError(f"malformed CSV row: {exc}", position=f"line {lineno}") from exc
            if width is None:
                width = len(feats)
            elif len(feats) != width:
                raise ParseError(f"expected {width} features, got {len(feats)}", position=f"line {lineno}")
            if num_classes is not None and not 0 <= label < num_classes:
                raise ValidationError(f"label {label} out of range 0..{num_classes - 1} at line {lineno}")
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise ParseError("CSV file has no data rows", position="line 1")
    labels = np.asarray(labels, dtype=np.int64)
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(np.asarray(rows, dtype=np.float64), labels, C, (width,))


# ---------------------------------------------------------------------------
# synthetic


@dataclass
class SyntheticSpec:
    """Gaussian blobs: members of a superclass share a mean direction.

    Superclass centres sit at ``separation`` along random orthogonal unit
    directions; each class is offset from its superclass centre by
    ``class_spread`` along another random direction; noise is unit variance.
    """

    blobs: int = 4
    superclasses: list | None = None
    dim: int = 16
    n_per_class: int = 500
    separation: float = 4.0
    class_spread: float = 2.0
    noise: float = 1.0
    seed: int = 0
    image_size: list | None = None

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValidationError(f"unknown synthetic spec keys {sorted(unknown)}")
        return cls(**known)

    def groups(self):
        if self.superclasses is None:
            half = self.blobs // 2
            return [list(range(half)), list(range(half, self.blobs))]
        return [list(g) for g in self.superclasses]


def make_synthetic(spec):
    if isinstance(spec, dict):
        spec = SyntheticSpec.from_dict(spec)
    groups = spec.groups()
    members = sorted(c for g in groups for c in g)
    if members != list(range(spec.blobs)):
        raise ValidationError("superclasses must partition 0..blobs-1")
    rng = np.random.default_rng(spec.seed)
    k = len(groups)
    if spec.dim < k + 1:
        raise ValidationError(f"dim must exceed the number of superclasses ({k})")
    basis, _ = np.linalg.qr(rng.normal(size=(spec.dim, k)))
    centres = np.zeros((spec.blobs, spec.dim))
    for gi, g in enumerate(groups):
        for c in g:
            offset = rng.normal(size=spec.dim)
            offset -= basis[:, :k] @ (basis[:, :k].T @ offset)
            offset /= np.linalg.norm(offset)
            centres[c] = spec.separation * basis[:, gi] + spec.class_spread * offset
    X = np.concatenate([centres[c] + spec.noise * rng.normal(size=(spec.n_per_class, spec.dim))
                        for c in range(spec.blobs)])
    y = np.repeat(np.arange(spec.blobs), spec.n_per_class)
    shape = (spec.dim,)
    if spec.image_size is not None:
        h, w = spec.image_size
        if h * w != spec.dim:
            raise ValidationError(f"image_size {h}x{w} does not match dim {spec.dim}")
        X = X.reshape(-1, 1, h, w)
        shape = (1, h, w)
    return Dataset(X, y, spec.blobs, shape, superclasses=groups,
                   meta={"synthetic": spec.__dict__.copy()})


def load_dataset(path, fmt=None, labels_path=None, num_classes=None):
    """Load a dataset; ``fmt`` is ``idx``, ``csv`` or ``synthetic`` (a JSON spec file or dict)."""
    if isinstance(path, dict):
        return make_synthetic(path)
    p = Path(path)
    if fmt is None:
        fmt = {".csv": "csv", ".json": "synthetic"}.get(p.suffix, "idx")
    if fmt == "csv":
        return load_csv(p, num_classes)
    if fmt == "synthetic":
        try:
            spec = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"synthetic spec is not JSON: {exc.msg}",
                             position=f"line {exc.lineno}") from exc
        return make_synthetic(spec)
    if fmt == "idx":
        if labels_path is None:
            raise ValidationError("IDX datasets need a labels file")
        return load_idx(p, labels_path, num_classes)
    raise ValidationError(f"unknown dataset format {fmt!r}")
