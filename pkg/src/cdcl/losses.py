"""Training objectives and their gradients w.r.t. features and logits.

Contrastive terms work on unit-normalized features ``z``; gradients are
returned w.r.t. ``z`` and turned into parameter gradients by
:func:`cdcl.model.backward`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    EmptyPositivesError,
    LabelOutOfRangeError,
    MissingPseudoLabelsError,
    TemperatureNonPositiveError,
)
from .model import UNLABELED, Domain, FeatureBatch, LossGraph, Model, classify
from .numerics import log_sum_exp, log_sum_exp_rows

DEFAULT_TAU = 0.05
DEFAULT_LAMBDA = 1.6


class PairMode(enum.Enum):
    CROSS_DOMAIN = "cross-domain"
    IN_DOMAIN = "in-domain"
    COMBINED_DOMAIN = "combined-domain"
    CROSS_SOURCE_ANCHORS_ONLY = "cross-source-only"
    CROSS_TARGET_ANCHORS_ONLY = "cross-target-only"

    @classmethod
    def parse(cls, value) -> "PairMode":
        if isinstance(value, PairMode):
            return value
        v = str(value).strip().lower().replace("_", "-")
        aliases = {"cross": cls.CROSS_DOMAIN, "standard": cls.CROSS_DOMAIN,
                   "in": cls.IN_DOMAIN, "combined": cls.COMBINED_DOMAIN,
                   "source-only": cls.CROSS_SOURCE_ANCHORS_ONLY,
                   "target-only": cls.CROSS_TARGET_ANCHORS_ONLY}
        if v in aliases:
            return aliases[v]
        return cls(v)


@dataclass
class LossValue:
    total: float
    components: dict[str, float] = field(default_factory=dict)
    graph: LossGraph | None = field(default=None, repr=False)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise TemperatureNonPositiveError(f"temperature must be positive, got {tau}")


# -- InfoNCE ---------------------------------------------------------------

def info_nce_grad(u, positives, negatives, tau: float):
    """InfoNCE value and gradients ``(loss, du, dpositives, dnegatives)``.

    Every positive gets its own softmax against the shared negative set.
    """
    _check_tau(tau)
    u = np.asarray(u, dtype=np.float64)
    P = np.asarray(positives, dtype=np.float64).reshape(-1, u.size)
    N = np.asarray(negatives, dtype=np.float64).reshape(-1, u.size)
    if P.shape[0] == 0:
        raise EmptyPositivesError("InfoNCE needs at least one positive")
    a = P @ u / tau
    b = N @ u / tau
    loss = 0.0
    du = np.zeros_like(u)
    dP = np.zeros_like(P)
    dN = np.zeros_like(N)
    for k in range(P.shape[0]):
        logits = np.concatenate(([a[k]], b))
        lse = log_sum_exp(logits)
        loss += lse - a[k]
        p = np.exp(logits - lse)
        # d/d(logit) of (lse - a_k): softmax minus one-hot on the positive
        ga = p[0] - 1.0
        gb = p[1:]
        du += (ga * P[k] + gb @ N) / tau
        dP[k] += ga * u / tau
        dN += np.outer(gb, u) / tau
    return loss, du, dP, dN


def info_nce(u, positives, negatives, tau: float) -> float:
    return info_nce_grad(u, positives, negatives, tau)[0]


# -- cross-domain contrastive ----------------------------------------------

def cdc_anchor_loss(z, candidates, candidate_labels, anchor_label: int, tau: float) -> float:
    """Supervised contrastive loss of one anchor against a candidate set.

    The denominator runs over every candidate, positives included; an anchor
    without positives contributes 0.
    """
    _check_tau(tau)
    z = np.asarray(z, dtype=np.float64)
    Z = np.asarray(candidates, dtype=np.float64).reshape(-1, z.size)
    sim = (Z @ z)[None, :]
    mask = np.ones_like(sim, dtype=np.uint8)
    losses, _ = kernels.contrastive_rows(sim, np.array([anchor_label]),
                                         np.asarray(candidate_labels), mask, tau)
    return float(losses[0])


@dataclass
class PairSelection:
    """Anchors, candidate sets and positive sets over a stacked batch.

    Rows/columns index the concatenation ``[source batch; target batch]``.
    ``candidate_mask[i, j]`` marks j as a candidate for anchor i;
    ``positive_mask`` is its subset sharing anchor i's (pseudo-)label.
    """

    mode: PairMode
    n_source: int
    labels: np.ndarray
    anchor_mask: np.ndarray
    candidate_mask: np.ndarray

    @property
    def positive_mask(self) -> np.ndarray:
        same = self.labels[:, None] == self.labels[None, :]
        return self.candidate_mask & same & self.anchor_mask[:, None]

    @property
    def anchors(self) -> list[tuple[int, Domain]]:
        return [self._local(i) for i in np.flatnonzero(self.anchor_mask)]

    def _local(self, i: int) -> tuple[int, Domain]:
        return (i, Domain.SOURCE) if i < self.n_source else (i - self.n_source, Domain.TARGET)

    def candidate_sets(self) -> list[list[int]]:
        return [list(np.flatnonzero(self.candidate_mask[i])) for i in np.flatnonzero(self.anchor_mask)]

    def positive_sets(self) -> list[list[int]]:
        pm = self.positive_mask
        return [list(np.flatnonzero(pm[i])) for i in np.flatnonzero(self.anchor_mask)]


def select_pairs(source_labels, target_labels, mode=PairMode.CROSS_DOMAIN,
                 target_retained=None) -> PairSelection:
    mode = PairMode.parse(mode)
    ys = np.asarray(source_labels, dtype=np.int64)
    yt = np.asarray(target_labels, dtype=np.int64)
    ns, nt = ys.size, yt.size
    if target_retained is None:
        target_retained = np.ones(nt, dtype=bool)
    rt = np.asarray(target_retained, dtype=bool) & (yt != UNLABELED)
    n = ns + nt
    is_src = np.arange(n) < ns
    valid = np.concatenate([np.ones(ns, dtype=bool), rt])
    labels = np.concatenate([ys, yt])
    cross = is_src[:, None] != is_src[None, :]
    same_dom = ~cross & ~np.eye(n, dtype=bool)
    if mode is PairMode.IN_DOMAIN:
        cand = same_dom
    elif mode is PairMode.COMBINED_DOMAIN:
        cand = ~np.eye(n, dtype=bool)
    else:
        cand = cross
    anchors = valid.copy()
    if mode is PairMode.CROSS_SOURCE_ANCHORS_ONLY:
        anchors &= is_src
    elif mode is PairMode.CROSS_TARGET_ANCHORS_ONLY:
        anchors &= ~is_src
    cand = cand & valid[None, :] & anchors[:, None]
    return PairSelection(mode, ns, labels, anchors, cand)


def _cdc(zs, ys, zt, yt, tau, mode, retained):
    _check_tau(tau)
    sel = select_pairs(ys, yt, mode, retained)
    Z = np.vstack([zs, zt])
    sim = Z @ Z.T
    losses, dsim = kernels.contrastive_rows(sim, sel.labels, sel.labels,
                                            sel.candidate_mask.view(np.uint8), tau)
    ns = sel.n_source
    # fixed ascending reduction order: source anchors, then target anchors
    cdc_s = float(np.sum(losses[:ns])) if ns else 0.0
    cdc_t = float(np.sum(losses[ns:])) if losses.size > ns else 0.0
    dZ = dsim @ Z + dsim.T @ Z
    return cdc_s, cdc_t, dZ[:ns], dZ[ns:]


def _require_pseudo(batch: FeatureBatch) -> None:
    if batch.labels is None or len(batch.labels) != len(batch):
        raise MissingPseudoLabelsError("target batch carries no pseudo-labels")


def cdc_bidirectional(source_batch: FeatureBatch, target_batch: FeatureBatch, tau: float = DEFAULT_TAU,
                      selection=PairMode.CROSS_DOMAIN, retained=None) -> LossValue:
    """Bidirectional cross-domain contrastive loss, summed over anchors.

    ``retained`` masks target samples removed by confidence filtering; they
    take part neither as anchors nor as candidates. Target samples labelled
    ``-1`` are treated the same way.
    """
    _require_pseudo(target_batch)
    cdc_s, cdc_t, dzs, dzt = _cdc(source_batch.z, source_batch.labels, target_batch.z,
                                  target_batch.labels, tau, selection, retained)
    graph = LossGraph(cdc_s + cdc_t)
    graph.add(source_batch, grad_z=dzs)
    graph.add(target_batch, grad_z=dzt)
    return LossValue(cdc_s + cdc_t, {"CDC_source_anchors": cdc_s, "CDC_target_anchors": cdc_t}, graph)


# -- cross-entropy ---------------------------------------------------------

def cross_entropy_grad(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, M = logits.shape
    if labels.shape != (B,):
        raise LabelOutOfRangeError(f"expected {B} labels, got shape {labels.shape}")
    if B and (labels.min() < 0 or labels.max() >= M):
        raise LabelOutOfRangeError(f"labels must lie in [0, {M - 1}]")
    if B == 0:
        return 0.0, np.zeros_like(logits)
    lse = log_sum_exp_rows(logits)
    rows = np.arange(B)
    value = float(np.mean(lse - logits[rows, labels]))
    g = np.exp(logits - lse[:, None])
    g[rows, labels] -= 1.0
    return value, g / B


def cross_entropy(logits, labels) -> float:
    return cross_entropy_grad(logits, labels)[0]


def uda_objective(model: Model, source_batch: FeatureBatch, target_batch: FeatureBatch,
                  tau: float = DEFAULT_TAU, lam: float = DEFAULT_LAMBDA, *, ce_batch=None,
                  selection=PairMode.CROSS_DOMAIN, retained=None) -> LossValue:
    """Source cross-entropy plus ``lam`` times the bidirectional CDC loss.

    ``ce_batch`` is the labelled source batch for the CE term; it defaults to
    ``source_batch`` itself.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    ce_batch = source_batch if ce_batch is None else ce_batch
    ce, dlog = cross_entropy_grad(classify(model, ce_batch.raw), ce_batch.labels)
    cdc = cdc_bidirectional(source_batch, target_batch, tau, selection, retained)
    total = ce + lam * cdc.total
    graph = LossGraph(total)
    graph.add(ce_batch, grad_logits=dlog)
    for batch, gz, _ in cdc.graph.terms:
        graph.add(batch, grad_z=lam * gz)
    comps = {"CE": ce, **cdc.components}
    return LossValue(total, comps, graph)


# -- source-free -----------------------------------------------------------

def sdf_cdc_grad(z, pseudo_labels, prototypes, tau: float, retained=None):
    """Mean prototype-contrastive loss over retained rows and its ``z`` gradient."""
    _check_tau(tau)
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(pseudo_labels, dtype=np.int64)
    W = np.asarray(prototypes, dtype=np.float64)
    keep = (y != UNLABELED) if retained is None else (np.asarray(retained, dtype=bool) & (y != UNLABELED))
    dz = np.zeros_like(z)
    if not keep.any():
        return 0.0, dz
    value, dlog = cross_entropy_grad(z[keep] @ W.T / tau, y[keep])
    dz[keep] = dlog @ W / tau
    return value, dz


def sdf_cdc_loss(target_batch: FeatureBatch, prototypes, tau: float = DEFAULT_TAU, retained=None) -> float:
    _require_pseudo(target_batch)
    return sdf_cdc_grad(target_batch.z, target_batch.labels, prototypes, tau, retained)[0]


def sdf_objective(model: Model, target_batch: FeatureBatch, tau: float = DEFAULT_TAU,
                  retained=None) -> LossValue:
    """Source-free objective: prototype contrastive loss with classifier rows
    as prototypes. The prototypes are constants (the classifier is frozen)."""
    _require_pseudo(target_batch)
    value, dz = sdf_cdc_grad(target_batch.z, target_batch.labels, model.params["cls.W"], tau, retained)
    graph = LossGraph(value)
    graph.add(target_batch, grad_z=dz)
    return LossValue(value, {"SDF_CDC": value}, graph)
