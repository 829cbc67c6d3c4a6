"""Synthetic domain-shift data, dataset files, splitting and batch sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidConfigError, InvalidRatioError
from .model import UNLABELED, Domain

DS_MAGIC = ("CDCL-DS", "v1")
LABELS_MAGIC = ("CDCL-LABELS", "v1")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    domain: Domain = Domain.SOURCE
    name: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domain = Domain.parse(self.domain)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InvalidConfigError("dataset needs a non-empty N x D feature matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidConfigError("one label per row required")
        bad = (self.labels != UNLABELED) & ((self.labels < 0) | (self.labels >= self.num_classes))
        if bad.any():
            raise InvalidConfigError(f"label out of range [0, {self.num_classes - 1}]")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_labeled(self) -> bool:
        return bool(np.all(self.labels != UNLABELED))

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.domain,
                       self.name if name is None else name)

    def unlabeled(self) -> "Dataset":
        return Dataset(self.features, np.full(len(self), UNLABELED), self.num_classes,
                       self.domain, self.name)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.features, labels, self.num_classes, self.domain, self.name)


@dataclass(frozen=True)
class ShiftConfig:
    num_classes: int = 4
    dim: int = 4
    per_class_count: int = 100
    class_center_radius: float = 3.0
    cluster_stddev: float = 0.5
    rotation_angle: float = 0.7
    translation: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidConfigError("need at least 2 classes")
        if self.dim < 2:
            raise InvalidConfigError("need at least 2 input dimensions")
        if self.per_class_count < 1:
            raise InvalidConfigError("per_class_count must be >= 1")
        if not self.cluster_stddev > 0:
            raise InvalidConfigError("cluster_stddev must be positive")
        t = tuple(float(x) for x in self.translation)
        if t and len(t) != self.dim:
            raise InvalidConfigError(f"translation must have {self.dim} entries")
        object.__setattr__(self, "translation", t)

    @property
    def translation_vector(self) -> np.ndarray:
        return np.array(self.translation) if self.translation else np.zeros(self.dim)


@dataclass
class DomainPair:
    """Generated source/target data. ``target_labels`` is for evaluation only."""

    source: Dataset
    target: Dataset
    target_labels: np.ndarray = field(repr=False)

    def labeled_target(self) -> Dataset:
        return self.target.with_labels(self.target_labels)


def class_centers(cfg: ShiftConfig) -> np.ndarray:
    angles = 2 * np.pi * np.arange(cfg.num_classes) / cfg.num_classes
    centers = np.zeros((cfg.num_classes, cfg.dim))
    centers[:, 0] = cfg.class_center_radius * np.cos(angles)
    centers[:, 1] = cfg.class_center_radius * np.sin(angles)
    return centers


def rotation_matrix(cfg: ShiftConfig) -> np.ndarray:
    """Rotation by ``rotation_angle`` in the plane of the first two axes."""
    R = np.eye(cfg.dim)
    c, s = np.cos(cfg.rotation_angle), np.sin(cfg.rotation_angle)
    R[:2, :2] = [[c, -s], [s, c]]
    return R


def apply_shift(x, cfg: ShiftConfig) -> np.ndarray:
    return np.asarray(x) @ rotation_matrix(cfg).T + cfg.translation_vector


def invert_shift(x, cfg: ShiftConfig) -> np.ndarray:
    return (np.asarray(x) - cfg.translation_vector) @ rotation_matrix(cfg)


def sample_mixture(cfg: ShiftConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = np.repeat(np.arange(cfg.num_classes), cfg.per_class_count)
    x = class_centers(cfg)[labels] + cfg.cluster_stddev * rng.standard_normal((labels.size, cfg.dim))
    return x, labels


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(2)]


def generate_shifted_pair(cfg: ShiftConfig) -> DomainPair:
    """Gaussian blobs on a circle; the target is an independent draw moved by
    the configured rotation and translation."""
    src_rng, tgt_rng = _streams(cfg.seed)
    xs, ys = sample_mixture(cfg, src_rng)
    xt_raw, yt = sample_mixture(cfg, tgt_rng)
    source = Dataset(xs, ys, cfg.num_classes, Domain.SOURCE, "source")
    target = Dataset(apply_shift(xt_raw, cfg), np.full(yt.size, UNLABELED), cfg.num_classes,
                     Domain.TARGET, "target")
    return DomainPair(source, target, yt)


def pre_shift_target(cfg: ShiftConfig) -> np.ndarray:
    """Target coordinates before the shift is applied (for verification)."""
    _, tgt_rng = _streams(cfg.seed)
    return sample_mixture(cfg, tgt_rng)[0]


# -- files -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_dataset(ds: Dataset, path) -> None:
    N, D = ds.features.shape
    lines = [f"{DS_MAGIC[0]} {DS_MAGIC[1]} {N} {D} {ds.num_classes} {ds.domain.name}"]
    for label, row in zip(ds.labels, ds.features):
        lines.append(" ".join([str(int(label))] + [_fmt(x) for x in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError("empty file", 1, path)
    head = lines[0].split()
    if len(head) != 6 or tuple(head[:2]) != DS_MAGIC:
        raise FormatError(f"expected header '{' '.join(DS_MAGIC)} N D M DOMAIN'", 1, path)
    try:
        N, D, M = int(head[2]), int(head[3]), int(head[4])
        domain = Domain.parse(head[5])
    except ValueError as exc:
        raise FormatError(f"bad header: {exc}", 1, path) from None
    body = [(i + 2, ln) for i, ln in enumerate(lines[1:]) if ln.strip()]
    if len(body) != N:
        lineno = body[N][0] if len(body) > N else len(lines) + 1
        raise FormatError(f"header declares {N} rows, file has {len(body)}", lineno, path)
    feats = np.empty((N, D))
    labels = np.empty(N, dtype=np.int64)
    for r, (lineno, ln) in enumerate(body):
        parts = ln.split()
        if len(parts) != D + 1:
            raise FormatError(f"expected {D + 1} fields, got {len(parts)}", lineno, path)
        try:
            labels[r] = int(parts[0])
            feats[r] = [float(v) for v in parts[1:]]
        except ValueError:
            raise FormatError("non-numeric field", lineno, path) from None
        if labels[r] != UNLABELED and not 0 <= labels[r] < M:
            raise FormatError(f"label {labels[r]} outside [0, {M - 1}]", lineno, path)
    return Dataset(feats, labels, M, domain, path.stem)


def save_labels(labels, num_classes: int, path) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    lines = [f"{LABELS_MAGIC[0]} {LABELS_MAGIC[1]} {labels.size} {num_classes}"]
    lines += [str(int(x)) for x in labels]
    Path(path).write_text("\n".join(lines) + "\n")


def load_labels(path) -> np.ndarray:
    path = Path(path)
    lines = path.read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or tuple(head[:2]) != LABELS_MAGIC:
        raise FormatError(f"expected header '{' '.join(LABELS_MAGIC)} N M'", 1, path)
    N = int(head[2])
    body = [(i + 2, ln) for i, ln in enumerate(lines[1:]) if ln.strip()]
    if len(body) != N:
        raise FormatError(f"header declares {N} labels, file has {len(body)}", 1, path)
    out = np.empty(N, dtype=np.int64)
    for r, (lineno, ln) in enumerate(body):
        try:
            out[r] = int(ln)
        except ValueError:
            raise FormatError("non-integer label", lineno, path) from None
    return out


# -- splitting and sampling ------------------------------------------------

def split_train_val(ds: Dataset, ratio: float = 0.9, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < ratio < 1:
        raise InvalidRatioError(f"ratio must be in (0, 1), got {ratio}")
    if not ds.is_labeled:
        raise InvalidConfigError("split_train_val needs a labelled dataset")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(round(ratio * len(ds)))
    return ds.subset(np.sort(perm[:n_train]), "train"), ds.subset(np.sort(perm[n_train:]), "val")


class BatchSampler:
    """Seeded without-replacement sampling, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, seed: int = 0, drop_last: bool = False):
        if n < 1 or batch_size < 1:
            raise InvalidConfigError("sampler needs n >= 1 and batch_size >= 1")
        if drop_last and batch_size > n:
            raise InvalidConfigError("batch_size exceeds dataset size with drop_last")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.drop_last = drop_last
        self.epoch_counter = 0
        self._rng = np.random.default_rng(seed)
        self._perm = self._rng.permutation(n)
        self._pos = 0

    def batches_per_epoch(self) -> int:
        full, rest = divmod(self.n, self.batch_size)
        return full + (1 if rest and not self.drop_last else 0)

    def next_batch(self) -> np.ndarray:
        remaining = self.n - self._pos
        if remaining == 0 or (self.drop_last and remaining < self.batch_size):
            self.epoch_counter += 1
            self._perm = self._rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += idx.size
        return idx


def next_batch(sampler: BatchSampler, ds: Dataset) -> np.ndarray:
    if sampler.n != len(ds):
        raise InvalidConfigError("sampler was built for a dataset of different size")
    return sampler.next_batch()
