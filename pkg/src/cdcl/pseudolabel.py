"""Target pseudo-labels from prototype-initialized spherical k-means."""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import EmptyClassError, NotPreparedError, ZeroVectorError
from .model import Domain, Mode, Model, encode
from .numerics import EPS_NORM

DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6
DEFAULT_THRESHOLD = 0.0


class PrototypeSource(enum.Enum):
    SAMPLE_MEANS = "sample-means"
    CLASSIFIER_WEIGHTS = "classifier-weights"


@dataclass(frozen=True)
class PrototypeSet:
    centers: np.ndarray
    source: PrototypeSource

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


@dataclass(frozen=True)
class PseudoLabelResult:
    labels: np.ndarray
    confidences: np.ndarray
    retained_mask: np.ndarray
    centers: np.ndarray
    objective_trace: np.ndarray
    iterations: int

    @property
    def retained_fraction(self) -> float:
        return float(self.retained_mask.mean()) if self.retained_mask.size else 0.0

    def masked_labels(self) -> np.ndarray:
        """Pseudo-labels with filtered samples set to -1."""
        return np.where(self.retained_mask, self.labels, -1)


def source_prototypes(z, labels, num_classes: int) -> PrototypeSet:
    """Per-class mean of normalized source features, re-normalized."""
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    centers = np.empty((num_classes, z.shape[1]))
    for m in range(num_classes):
        rows = z[labels == m]
        if rows.shape[0] == 0:
            raise EmptyClassError(m)
        mean = rows.mean(axis=0)
        n = float(np.sqrt(mean @ mean))
        if not n > EPS_NORM:
            raise ZeroVectorError(f"class {m} features cancel out; prototype undefined")
        centers[m] = mean / n
    return PrototypeSet(centers, PrototypeSource.SAMPLE_MEANS)


def classifier_prototypes(model: Model) -> PrototypeSet:
    if not model.source_free_prepared:
        raise NotPreparedError("call prepare_source_free before using classifier prototypes")
    return PrototypeSet(model.params["cls.W"].copy(), PrototypeSource.CLASSIFIER_WEIGHTS)


def spherical_kmeans(z, init: PrototypeSet, max_iters: int = DEFAULT_MAX_ITERS,
                     tol: float = DEFAULT_TOL) -> PseudoLabelResult:
    """Cosine k-means started from ``init``; nothing is filtered yet.

    Stops when assignments repeat, the objective gains less than ``tol`` or
    ``max_iters`` updates have run. Empty clusters keep their last center;
    ties go to the lowest class index.
    """
    z = np.ascontiguousarray(z, dtype=np.float64)
    labels, conf, centers, trace, iters = kernels.spherical_kmeans(
        z, np.ascontiguousarray(init.centers, dtype=np.float64), int(max_iters), float(tol))
    return PseudoLabelResult(
        labels=np.asarray(labels, dtype=np.int64), confidences=np.asarray(conf),
        retained_mask=np.ones(z.shape[0], dtype=bool), centers=np.asarray(centers),
        objective_trace=np.asarray(trace), iterations=int(iters))


def filter_by_confidence(result: PseudoLabelResult, threshold: float) -> PseudoLabelResult:
    return dataclasses.replace(result, retained_mask=result.confidences >= threshold)


def generate_pseudo_labels(model: Model, target_inputs, mode: str = "standard", source_data=None, *,
                           threshold: float = DEFAULT_THRESHOLD, max_iters: int = DEFAULT_MAX_ITERS,
                           tol: float = DEFAULT_TOL) -> PseudoLabelResult:
    """Cluster the whole target set with the current encoder.

    ``mode="standard"`` seeds clusters with source class means (``source_data``
    is a labelled :class:`~cdcl.data.Dataset`); ``mode="source-free"`` seeds
    them with the classifier rows of a prepared model.
    """
    target = encode(model, target_inputs, Domain.TARGET, Mode.EVAL)
    if mode == "standard":
        if source_data is None:
            raise ValueError("standard pseudo-labelling needs the source dataset")
        src = encode(model, source_data.features, Domain.SOURCE, Mode.EVAL)
        init = source_prototypes(src.z, source_data.labels, model.num_classes)
    elif mode == "source-free":
        init = classifier_prototypes(model)
    else:
        raise ValueError(f"unknown pseudo-label mode {mode!r}")
    result = spherical_kmeans(target.z, init, max_iters, tol)
    return filter_by_confidence(result, threshold)
