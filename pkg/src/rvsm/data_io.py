"""Labeled point clouds: CSV/PLY ingestion, writing, and synthetic scenes."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CloudFormatError, InvalidInputError

CSV_HEADER = ["x", "y", "z", "label"]

_PLY_FLOAT = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
_PLY_INT = {
    "char": "<i1", "int8": "<i1", "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}
_PLY_TYPES = {**_PLY_FLOAT, **_PLY_INT}


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    color: tuple = (128, 128, 128)


@dataclass(frozen=True)
class ClassDictionary:
    """Ordered semantic classes.  Order is significant: it fixes the column
    order of map posteriors and the argmax tie-break."""

    classes: tuple

    def __post_init__(self):
        classes = tuple(
            c if isinstance(c, ClassInfo) else ClassInfo(int(c[0]), str(c[1]), tuple(c[2]))
            for c in self.classes
        )
        ids = [c.id for c in classes]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("class ids must be unique")
        if len(classes) < 2:
            raise InvalidInputError("at least two classes are required")
        for c in classes:
            if len(c.color) != 3 or not all(0 <= int(v) <= 255 for v in c.color):
                raise InvalidInputError(f"class {c.id}: color must be an RGB triple in 0..255")
        object.__setattr__(self, "classes", classes)

    @property
    def ids(self) -> list:
        return [c.id for c in self.classes]

    def __len__(self):
        return len(self.classes)

    def index(self, class_id) -> int:
        return self.ids.index(class_id)

    @classmethod
    def default(cls, ids) -> "ClassDictionary":
        palette = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
                   (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
                   (188, 189, 34), (23, 190, 207)]
        return cls(tuple(ClassInfo(int(i), f"class_{i}", palette[n % len(palette)])
                         for n, i in enumerate(ids)))

    def to_list(self) -> list:
        return [{"id": c.id, "name": c.name, "color": [int(v) for v in c.color]} for c in self.classes]

    @classmethod
    def from_list(cls, items) -> "ClassDictionary":
        return cls(tuple(ClassInfo(int(d["id"]), str(d["name"]), tuple(int(v) for v in d["color"]))
                         for d in items))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_list(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ClassDictionary":
        return cls.from_list(json.loads(Path(path).read_text()))


@dataclass
class LabeledPointCloud:
    """Points ``(n, 3)`` in meters with integer class labels."""

    points: np.ndarray
    labels: np.ndarray
    weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if len(self.points) != len(self.labels):
            raise InvalidInputError("points and labels differ in length")
        bad = ~np.all(np.isfinite(self.points), axis=1)
        if np.any(bad):
            raise InvalidInputError(f"non-finite coordinate at index {int(np.flatnonzero(bad)[0])}")
        if self.weights is None:
            self.weights = np.ones(len(self.labels))

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> list:
        return sorted(int(c) for c in np.unique(self.labels))

    def subset(self, idx) -> "LabeledPointCloud":
        return LabeledPointCloud(self.points[idx], self.labels[idx], self.weights[idx])

    def __eq__(self, other):
        return (
            isinstance(other, LabeledPointCloud)
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.labels, other.labels)
        )


def sidecar_path(cloud_path) -> Path:
    """``scene.csv`` -> ``scene.classes.json``."""
    p = Path(cloud_path)
    return p.with_name(p.stem + ".classes.json")


def _infer_format(path, fmt):
    if fmt:
        return fmt.lower()
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix not in ("csv", "ply"):
        raise CloudFormatError(f"cannot infer format from {path!r}; pass csv or ply")
    return suffix


def _check_labels(cloud, dictionary, allow_new_classes):
    if dictionary is None or allow_new_classes:
        return
    unknown = sorted(set(cloud.classes) - set(dictionary.ids))
    if unknown:
        raise CloudFormatError(f"labels {unknown} not in class dictionary")


def _read_csv(path, require_label=True):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CloudFormatError(f"{path}: line 1: missing header") from None
        if header[:3] != ["x", "y", "z"] or (require_label and header != CSV_HEADER):
            expected = ",".join(CSV_HEADER if require_label else ["x", "y", "z"])
            raise CloudFormatError(f"{path}: line 1: expected header {expected!r}, got {','.join(header)!r}")
        has_label = len(header) == 4
        if has_label and header[3] != "label" or len(header) > 4:
            raise CloudFormatError(f"{path}: line 1: unexpected columns {header}")
        pts, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CloudFormatError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
            try:
                xyz = [float(v) for v in row[:3]]
                lab = int(row[3]) if has_label else 0
            except ValueError as exc:
                raise CloudFormatError(f"{path}: line {line}: {exc}") from None
            if not all(math.isfinite(v) for v in xyz):
                raise CloudFormatError(f"{path}: line {line}: non-finite coordinate")
            pts.append(xyz)
            labels.append(lab)
    return np.array(pts, dtype=float).reshape(-1, 3), np.array(labels, dtype=np.int64)


def _read_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise CloudFormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n"):]
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for n, line in enumerate(header[1:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                raise CloudFormatError(f"{path}: header line {n}: list properties are not supported")
            if tok[1] not in _PLY_TYPES:
                raise CloudFormatError(f"{path}: header line {n}: unknown type {tok[1]!r}")
            if not elements:
                raise CloudFormatError(f"{path}: header line {n}: property before element")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise CloudFormatError(f"{path}: only binary_little_endian PLY is supported (got {fmt})")
    offset = 0
    for name, count, props in elements:
        dtype = np.dtype(props)
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(body):
            raise CloudFormatError(f"{path}: element {name!r} truncated")
        if name == "vertex":
            arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            names = dtype.names
            for p in ("x", "y", "z"):
                if p not in names or dtype[p].kind != "f":
                    raise CloudFormatError(f"{path}: vertex needs float property {p!r}")
            if "label" not in names or dtype["label"].kind not in "iu":
                raise CloudFormatError(f"{path}: vertex needs integer property 'label'")
            pts = np.column_stack([arr["x"], arr["y"], arr["z"]]).astype(float)
            bad = ~np.all(np.isfinite(pts), axis=1)
            if np.any(bad):
                raise CloudFormatError(f"{path}: vertex {int(np.flatnonzero(bad)[0])}: non-finite coordinate")
            return pts, arr["label"].astype(np.int64)
        offset += nbytes
    raise CloudFormatError(f"{path}: no vertex element")


def load_cloud(path, fmt=None, dictionary=None, allow_new_classes=False) -> LabeledPointCloud:
    """Read a labeled cloud.

    CSV needs the header ``x,y,z,label``; PLY must be binary little-endian
    with float ``x``, ``y``, ``z`` and an integer ``label`` on ``vertex``.
    Labels are validated against ``dictionary`` (or the sidecar
    ``<name>.classes.json`` when present) unless ``allow_new_classes``.
    """
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        pts, labels = _read_csv(path)
    elif fmt == "ply":
        pts, labels = _read_ply(path)
    else:
        raise CloudFormatError(f"unknown format {fmt!r}")
    cloud = LabeledPointCloud(pts, labels)
    if dictionary is None and sidecar_path(path).exists():
        dictionary = ClassDictionary.load(sidecar_path(path))
    _check_labels(cloud, dictionary, allow_new_classes)
    return cloud


def load_points(path, fmt=None) -> np.ndarray:
    """Query locations from CSV (``x,y,z`` with optional ``label``) or PLY."""
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        return _read_csv(path, require_label=False)[0]
    return _read_ply(path)[0]


def _fmt(v: float) -> str:
    return repr(float(v))


def save_cloud(cloud: LabeledPointCloud, path, fmt=None, dictionary=None):
    """Write a cloud; output bytes depend only on the cloud contents."""
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(",".join(CSV_HEADER) + "\n")
        for (x, y, z), lab in zip(cloud.points.tolist(), cloud.labels.tolist()):
            buf.write(f"{_fmt(x)},{_fmt(y)},{_fmt(z)},{lab}\n")
        Path(path).write_text(buf.getvalue())
    elif fmt == "ply":
        write_ply(path, cloud.points, {"label": cloud.labels.astype("<i4")})
    else:
        raise CloudFormatError(f"unknown format {fmt!r}")
    if dictionary is not None:
        dictionary.save(sidecar_path(path))


def write_ply(path, points, extra: dict):
    """Binary little-endian PLY with double ``x,y,z`` plus scalar columns."""
    type_names = {"<f8": "double", "<f4": "float", "<i4": "int", "<u1": "uchar", "<i1": "char",
                  "<i2": "short", "<u2": "ushort", "<u4": "uint"}
    points = np.asarray(points, dtype="<f8").reshape(-1, 3)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    for name, col in extra.items():
        kind = np.asarray(col).dtype
        dt = f"<{kind.kind}{kind.itemsize}"
        if type_names.get(dt) is None:
            raise InvalidInputError(f"unsupported PLY column dtype {dt} for {name!r}")
        fields.append((name, dt))
    arr = np.empty(len(points), dtype=fields)
    arr["x"], arr["y"], arr["z"] = points.T
    for name, col in extra.items():
        arr[name] = col
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}"]
    header += [f"property {type_names[dt]} {name}" for name, dt in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class Blob:
    class_id: int
    center: tuple
    radius: float
    count: int


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Spherical class blobs with uniform sampling and symmetric label noise."""

    class_blobs: tuple
    label_noise_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        blobs = tuple(b if isinstance(b, Blob) else Blob(*b) for b in self.class_blobs)
        for b in blobs:
            if not b.radius > 0:
                raise InvalidInputError("blob radius must be positive")
            if not b.count > 0:
                raise InvalidInputError("blob count must be positive")
        if not 0 <= self.label_noise_rate < 0.5:
            raise InvalidInputError("label_noise_rate must lie in [0, 0.5)")
        object.__setattr__(self, "class_blobs", blobs)

    @classmethod
    def standard(cls, noise=0.1, seed=0, count=300) -> "SyntheticSceneSpec":
        """Three separated blobs of radius 0.5 m, 1.5 m apart."""
        return cls(
            (Blob(0, (0.0, 0.0, 0.0), 0.5, count),
             Blob(1, (1.5, 0.0, 0.0), 0.5, count),
             Blob(2, (0.0, 1.5, 0.0), 0.5, count)),
            label_noise_rate=noise,
            rng_seed=seed,
        )


def _sample_ball(rng, center, radius, n):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return np.asarray(center, dtype=float) + d * r[:, None]


def generate_scene(spec: SyntheticSceneSpec):
    """Sample a scene.

    Returns ``(train, test, truth)``: ``train`` carries noisy labels,
    ``truth`` the same locations with clean labels, and ``test`` an
    independent clean sample of the same size.
    """
    rng = np.random.default_rng(spec.rng_seed)
    ids = sorted({b.class_id for b in spec.class_blobs})

    def sample():
        pts = [_sample_ball(rng, b.center, b.radius, b.count) for b in spec.class_blobs]
        labs = [np.full(b.count, b.class_id) for b in spec.class_blobs]
        return np.vstack(pts), np.concatenate(labs)

    x_train, clean = sample()
    noisy = clean.copy()
    flip = rng.random(len(clean)) < spec.label_noise_rate
    if len(ids) > 1:
        for i in np.flatnonzero(flip):
            others = [c for c in ids if c != clean[i]]
            noisy[i] = others[rng.integers(len(others))]
    x_test, test_labels = sample()
    return (
        LabeledPointCloud(x_train, noisy),
        LabeledPointCloud(x_test, test_labels),
        LabeledPointCloud(x_train, clean),
    )
