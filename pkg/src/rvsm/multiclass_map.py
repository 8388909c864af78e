"""One-vs-rest semantic map built from binary relevance vector machines."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import log_expit, logsumexp

from .data_io import ClassDictionary, LabeledPointCloud, write_ply
from .errors import ClassNotPresentError, InvalidInputError, RvsmError, TwoClassRequiredError
from .kernel import KernelSpec
from .sparse_bayes import BinaryRvmModel, TrainConfig, TrainingSet, train_binary

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
# unnormalized membership probability assigned to classes without a model
UNTRAINABLE_FLOOR = 1e-6
QUERY_CHUNK = 1000


@dataclass(frozen=True)
class SemanticMapModel:
    binary_models: tuple
    dictionary: ClassDictionary
    kernel: KernelSpec
    provenance: dict = field(default_factory=dict)
    reports: tuple = ()

    def __post_init__(self):
        if len(self.binary_models) != len(self.dictionary):
            raise InvalidInputError("need one binary model per class")
        for m, cid in zip(self.binary_models, self.dictionary.ids):
            if m.class_id != cid:
                raise InvalidInputError("binary models must follow dictionary order")
            if m.kernel != self.kernel:
                raise InvalidInputError(f"class {cid}: kernel differs from the map kernel")

    @property
    def n_relevance_vectors(self) -> list:
        return [len(m.relevance_vectors) for m in self.binary_models]

    def to_dict(self) -> dict:
        return {
            "version": BUNDLE_VERSION,
            "kernel": self.kernel.to_dict(),
            "dictionary": self.dictionary.to_list(),
            "provenance": self.provenance,
            "training": list(self.reports),
            "models": [m.to_dict() for m in self.binary_models],
        }

    @classmethod
    def from_dict(cls, d) -> "SemanticMapModel":
        if d.get("version") != BUNDLE_VERSION:
            raise InvalidInputError(f"unsupported map bundle version {d.get('version')!r}")
        return cls(
            binary_models=tuple(BinaryRvmModel.from_dict(m) for m in d["models"]),
            dictionary=ClassDictionary.from_list(d["dictionary"]),
            kernel=KernelSpec.from_dict(d["kernel"]),
            provenance=d.get("provenance", {}),
            reports=tuple(d.get("training", ())),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "SemanticMapModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class MapPosterior:
    """Normalized class probabilities at query points.

    Columns of ``class_probs`` follow ``class_ids``.
    """

    points: np.ndarray
    class_probs: np.ndarray
    hard_labels: np.ndarray
    class_ids: list

    def __len__(self):
        return len(self.points)

    def to_csv(self, path):
        header = ["x", "y", "z"] + [f"p_{c}" for c in self.class_ids] + ["label"]
        lines = [",".join(header)]
        for p, row, lab in zip(self.points.tolist(), self.class_probs.tolist(), self.hard_labels.tolist()):
            lines.append(",".join([repr(v) for v in p] + [repr(v) for v in row] + [str(lab)]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "MapPosterior":
        """Read a file written by :meth:`to_csv`."""
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if header[:3] != ["x", "y", "z"] or header[-1] != "label" or not all(
                    h.startswith("p_") for h in header[3:-1]):
                raise InvalidInputError(f"{path}: not a map posterior CSV (header {header})")
            try:
                ids = [int(h[2:]) for h in header[3:-1]]
                data = np.loadtxt(fh, delimiter=",", ndmin=2).reshape(-1, len(header))
            except ValueError as exc:
                raise InvalidInputError(f"{path}: {exc}") from None
        return cls(data[:, :3], data[:, 3:-1], data[:, -1].astype(np.int64), ids)

    def to_ply(self, path, dictionary: ClassDictionary):
        colors = {c.id: c.color for c in dictionary.classes}
        rgb = np.array([colors[int(l)] for l in self.hard_labels], dtype=np.uint8).reshape(-1, 3)
        write_ply(path, self.points, {
            "red": rgb[:, 0], "green": rgb[:, 1], "blue": rgb[:, 2],
            "label": self.hard_labels.astype("<i4"),
        })


def split_one_vs_rest(cloud: LabeledPointCloud, k) -> TrainingSet:
    """Binary targets: 1 where the label equals ``k``, else 0."""
    targets = (cloud.labels == k).astype(float)
    n_pos = int(targets.sum())
    if n_pos == 0:
        raise ClassNotPresentError(f"class {k} has no points in the cloud")
    if n_pos == len(targets):
        raise TwoClassRequiredError(f"class {k} is the only label present")
    return TrainingSet(cloud.points, targets)


def class_seed(seed: int, class_id: int) -> int:
    """Per-class RNG seed, keyed on the class id so reordering classes does not
    change any class's training run."""
    ss = np.random.SeedSequence([int(seed), int(class_id) & 0xFFFFFFFF, int(class_id < 0)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def config_hash(kernel: KernelSpec, cfg: TrainConfig) -> str:
    blob = json.dumps({"kernel": kernel.to_dict(), "train": cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def cloud_digest(cloud: LabeledPointCloud) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(cloud.labels, dtype="<i8").tobytes())
    return h.hexdigest()


def _train_one(cloud, class_id, kernel, cfg):
    counts = {"n_positive": int(np.sum(cloud.labels == class_id)),
              "n_negative": int(np.sum(cloud.labels != class_id))}
    try:
        ts = split_one_vs_rest(cloud, class_id)
        model, report = train_binary(ts, kernel, replace(cfg, rng_seed=class_seed(cfg.rng_seed, class_id)),
                                     class_id=class_id)
    except (RvsmError, linalg.LinAlgError) as exc:
        log.warning("class=%s status=untrainable reason=%r", class_id, str(exc))
        return BinaryRvmModel.untrained(class_id, kernel), {
            "class_id": int(class_id), "trained": False, "reason": str(exc), **counts}
    return model, {"trained": True, **report.summary(),
                   "n_relevance_vectors": len(model.relevance_vectors)}


def train_map(cloud: LabeledPointCloud, dictionary: ClassDictionary, kernel: KernelSpec,
              cfg: TrainConfig = TrainConfig(), jobs=None, source_digest=None) -> SemanticMapModel:
    """Train one binary model per class of ``dictionary``.

    Classes absent from the cloud, or whose training fails, are kept as
    untrainable models rather than aborting the map.  ``jobs`` sets the number
    of worker threads; results do not depend on it.
    """
    if len(cloud) == 0:
        raise InvalidInputError("cannot train on an empty cloud")
    present = set(cloud.classes)
    if len(present) < 2:
        raise TwoClassRequiredError("at least two classes must be present in the cloud")
    unknown = present - set(dictionary.ids)
    if unknown:
        raise InvalidInputError(f"labels {sorted(unknown)} are not in the class dictionary")
    ids = dictionary.ids
    jobs = jobs or len(ids)
    if jobs == 1:
        results = [_train_one(cloud, c, kernel, cfg) for c in ids]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda c: _train_one(cloud, c, kernel, cfg), ids))
    provenance = {
        "seed": int(cfg.rng_seed),
        "config_hash": config_hash(kernel, cfg),
        "source_digest": source_digest or cloud_digest(cloud),
        "train_config": cfg.to_dict(),
    }
    return SemanticMapModel(
        binary_models=tuple(m for m, _ in results),
        dictionary=dictionary,
        kernel=kernel,
        provenance=provenance,
        reports=tuple(r for _, r in results),
    )


def _log_membership(model: SemanticMapModel, pts: np.ndarray) -> np.ndarray:
    out = np.empty((len(pts), len(model.binary_models)))
    for k, m in enumerate(model.binary_models):
        if m.trained:
            out[:, k] = log_expit(m.latent(pts))
        else:
            out[:, k] = math.log(UNTRAINABLE_FLOOR)
    return out


def query_map(model: SemanticMapModel, queries, chunk: int = QUERY_CHUNK) -> MapPosterior:
    """Class posterior at arbitrary query locations.

    Each binary model's membership probability is normalized across classes
    (computed in log space so rows always sum to one); hard labels are the
    row-wise argmax with ties going to the lowest class index.
    """
    pts = np.asarray(queries, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("query points contain non-finite coordinates")
    ids = model.dictionary.ids
    probs = np.empty((len(pts), len(ids)))
    for start in range(0, len(pts), chunk):
        lp = _log_membership(model, pts[start:start + chunk])
        probs[start:start + chunk] = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    hard = np.asarray(ids, dtype=np.int64)[np.argmax(probs, axis=1)] if len(pts) else np.zeros(0, np.int64)
    return MapPosterior(pts, probs, hard, list(ids))


def downsample_per_class(cloud: LabeledPointCloud, fraction: float, seed=0) -> LabeledPointCloud:
    """Keep ``ceil(fraction * count)`` uniformly chosen points of every class
    (at least one), preserving the original point order."""
    if not 0 < fraction <= 1:
        raise InvalidInputError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    keep = []
    for c in cloud.classes:
        idx = np.flatnonzero(cloud.labels == c)
        # tolerance absorbs products like 0.07 * 100 = 7.000000000000001
        n = max(1, math.ceil(fraction * len(idx) - 1e-9))
        keep.append(idx if n >= len(idx) else rng.choice(idx, size=n, replace=False))
    keep = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=int)
    return cloud.subset(keep)
