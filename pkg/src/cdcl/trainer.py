"""Training procedures: source pre-training, standard and source-free adaptation."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from .data import BatchSampler, Dataset, split_train_val
from .errors import InvalidConfigError, NumericalError
from .losses import DEFAULT_LAMBDA, DEFAULT_TAU, PairMode, cross_entropy_grad, sdf_objective, uda_objective
from .model import (
    Domain,
    EncoderConfig,
    LossGraph,
    Mode,
    Model,
    backward,
    classify,
    encode,
    init_model,
    prepare_source_free,
)
from .pseudolabel import DEFAULT_MAX_ITERS, DEFAULT_TOL, PseudoLabelResult, generate_pseudo_labels


@dataclass(frozen=True)
class HyperParams:
    tau: float = DEFAULT_TAU
    lam: float = DEFAULT_LAMBDA
    threshold: float = 0.0
    lr_backbone: float = 1e-3
    lr_new: float = 1e-2
    schedule_b: float = 0.75
    momentum: float = 0.9
    epochs: int = 30
    # 0 means one pass over the larger training set per epoch
    iters_per_epoch: int = 0
    batch_size: int = 32
    seed: int = 0
    kmeans_max_iters: int = DEFAULT_MAX_ITERS
    kmeans_tol: float = DEFAULT_TOL
    pair_mode: str = PairMode.CROSS_DOMAIN.value
    share_ce_batch: bool = False
    val_ratio: float = 0.9

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidConfigError("tau must be positive")
        if self.lam < 0:
            raise InvalidConfigError("lam must be non-negative")
        if self.epochs < 0 or self.iters_per_epoch < 0 or self.batch_size < 1:
            raise InvalidConfigError("epochs/iters_per_epoch must be >= 0 and batch_size >= 1")
        if self.lr_backbone < 0 or self.lr_new < 0 or self.momentum < 0 or self.schedule_b < 0:
            raise InvalidConfigError("learning rates, momentum and schedule exponent must be >= 0")
        PairMode.parse(self.pair_mode)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(eta0: float, p: float, b: float) -> float:
    """Annealed rate ``eta0 * (1 + 10 p) ** -b`` for progress ``p`` in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    return eta0 * (1.0 + 10.0 * p) ** (-b)


def sgd_step(model: Model, grads: Mapping[str, np.ndarray], lr, momentum: float,
             velocity: dict) -> Model:
    """Classic momentum: ``v = mu v + g; theta -= lr v``, in place.

    ``lr`` is a float or a mapping from parameter group to rate.
    Frozen parameters are skipped even if a gradient is supplied.
    """
    trainable = set(model.trainable_names())
    for name, g in grads.items():
        if name not in trainable:
            continue
        rate = lr[model.param_group(name)] if isinstance(lr, Mapping) else lr
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        model.params[name] = model.params[name] - rate * v
    return model


@dataclass
class EvalResult:
    accuracy: float
    per_class: list
    mean_class_accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: Model, dataset: Dataset, domain=None) -> EvalResult:
    """Accuracy of argmax predictions using Eval-mode BN of ``domain``."""
    if not dataset.is_labeled:
        raise InvalidConfigError("labels required for evaluation")
    domain = dataset.domain if domain is None else Domain.parse(domain)
    batch = encode(model, dataset.features, domain, Mode.EVAL)
    pred = np.argmax(classify(model, batch.raw), axis=1)
    correct = pred == dataset.labels
    per_class = []
    for m in range(model.num_classes):
        sel = dataset.labels == m
        per_class.append(float(correct[sel].mean()) if sel.any() else None)
    present = [a for a in per_class if a is not None]
    return EvalResult(float(correct.mean()), per_class, float(np.mean(present)))


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)
    target_accuracy: float | None = None
    per_class_accuracy: list | None = None
    mean_class_accuracy: float | None = None
    # not serialized: per-iteration loss components and timing
    iteration_losses: list = field(default_factory=list, repr=False)
    wall_clock_seconds: float = 0.0

    @property
    def losses(self) -> list[dict]:
        return [e["losses"] for e in self.epochs]

    @property
    def retained_fraction(self) -> list[float]:
        return [e["retained_fraction"] for e in self.epochs if e.get("retained_fraction") is not None]

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "losses": self.losses,
            "retained_fraction": self.retained_fraction,
            "target_accuracy": self.target_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "mean_class_accuracy": self.mean_class_accuracy,
            "seed": self.seed,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss ({value}) in {where}")


def _lrs(hyper: HyperParams, p: float) -> dict:
    return {"backbone": lr_schedule(hyper.lr_backbone, p, hyper.schedule_b),
            "new": lr_schedule(hyper.lr_new, p, hyper.schedule_b)}


def _sampler(n: int, hyper: HyperParams, stream: int) -> BatchSampler:
    seed = int(np.random.SeedSequence([hyper.seed, stream]).generate_state(1)[0])
    return BatchSampler(n, min(hyper.batch_size, n), seed, drop_last=True)


def _iters(hyper: HyperParams, *sizes: int) -> int:
    if hyper.iters_per_epoch:
        return hyper.iters_per_epoch
    return max(1, max(math.ceil(n / hyper.batch_size) for n in sizes))


def _copy_source_bn_to_target(model: Model) -> None:
    if not model.cfg.per_domain_bn:
        return
    for store in (model.params, model.buffers):
        for name in list(store):
            if ".bn.source." in name:
                store[name.replace(".bn.source.", ".bn.target.")] = store[name].copy()


def _epoch_summary(sums: dict, count: int) -> dict:
    return {k: v / count for k, v in sums.items()} if count else {}


def _check_params(model: Model) -> None:
    for name, p in model.params.items():
        if not np.all(np.isfinite(p)):
            raise NumericalError(f"parameter {name} became non-finite")


def _ce_step(model, X, y, idx):
    batch = encode(model, X[idx], Domain.SOURCE, Mode.TRAIN, labels=y[idx])
    value, dlog = cross_entropy_grad(classify(model, batch.raw), batch.labels)
    graph = LossGraph(value)
    graph.add(batch, grad_logits=dlog)
    return value, graph


def train_source_only(model: Model, source: Dataset, hyper: HyperParams,
                      eval_target: Dataset | None = None) -> tuple[Model, TrainReport]:
    """Cross-entropy on source batches only; same schedule and CE sampler as
    :func:`train_uda`, so the two are directly comparable."""
    t0 = time.perf_counter()
    model = model.copy()
    report = TrainReport(seed=hyper.seed, config={"procedure": "source-only", **hyper.to_dict()})
    ce_sampler = _sampler(len(source), hyper, 0)
    K = _iters(hyper, len(source))
    total = hyper.epochs * K
    velocity: dict = {}
    it = 0
    for epoch in range(hyper.epochs):
        sums = {"CE": 0.0}
        for _ in range(K):
            value, graph = _ce_step(model, source.features, source.labels, ce_sampler.next_batch())
            _check_finite(value, "source-only CE")
            sgd_step(model, backward(model, graph), _lrs(hyper, it / total), hyper.momentum, velocity)
            report.iteration_losses.append({"CE": value, "total": value})
            sums["CE"] += value
            it += 1
        _check_params(model)
        report.epochs.append({"epoch": epoch, "losses": _epoch_summary(sums, K), "retained_fraction": None})
    _finish(report, model, eval_target, t0)
    return model, report


def _finish(report: TrainReport, model: Model, eval_target, t0: float) -> None:
    if eval_target is not None:
        res = evaluate(model, eval_target, Domain.TARGET)
        report.target_accuracy = res.accuracy
        report.per_class_accuracy = res.per_class
        report.mean_class_accuracy = res.mean_class_accuracy
    report.wall_clock_seconds = time.perf_counter() - t0


def pretrain_source(source: Dataset, cfg: EncoderConfig, hyper: HyperParams,
                    init: Model | None = None) -> tuple[Model, float]:
    """Cross-entropy training on a random 0.9 split of the source data.

    Returns the epoch snapshot with the best accuracy on the held-out split
    (earliest epoch on ties) and that accuracy.
    """
    train, val = split_train_val(source, hyper.val_ratio, hyper.seed)
    model = init_model(cfg, source.num_classes, hyper.seed) if init is None else init.copy()
    best = model.copy()
    best_acc = evaluate(model, val, Domain.SOURCE).accuracy
    sampler = _sampler(len(train), hyper, 0)
    K = _iters(hyper, len(train))
    total = hyper.epochs * K
    velocity: dict = {}
    it = 0
    for _ in range(hyper.epochs):
        for _ in range(K):
            value, graph = _ce_step(model, train.features, train.labels, sampler.next_batch())
            _check_finite(value, "source pre-training")
            sgd_step(model, backward(model, graph), _lrs(hyper, it / total), hyper.momentum, velocity)
            it += 1
        _check_params(model)
        acc = evaluate(model, val, Domain.SOURCE).accuracy
        if acc > best_acc:
            best, best_acc = model.copy(), acc
    return best, best_acc


Monitor = Callable[[int, Model, PseudoLabelResult], None]


def train_uda(model: Model, source: Dataset, target: Dataset, hyper: HyperParams, *,
              eval_target: Dataset | None = None, monitor: Monitor | None = None) -> tuple[Model, TrainReport]:
    """Standard adaptation with the bidirectional cross-domain contrastive loss.

    ``target`` must be unlabelled; ``eval_target`` (same samples, with
    labels) is only used once training has finished.
    """
    if not source.is_labeled:
        raise InvalidConfigError("source dataset must be labelled")
    if np.any(target.labels != -1):
        raise InvalidConfigError("target labels must not be passed to training")
    t0 = time.perf_counter()
    model = model.copy()
    _copy_source_bn_to_target(model)
    mode = PairMode.parse(hyper.pair_mode)
    report = TrainReport(seed=hyper.seed, config={"procedure": "standard", **hyper.to_dict()})
    ce_sampler = _sampler(len(source), hyper, 0)
    src_sampler = _sampler(len(source), hyper, 1)
    tgt_sampler = _sampler(len(target), hyper, 2)
    K = _iters(hyper, len(source), len(target))
    total = hyper.epochs * K
    Xs, ys, Xt = source.features, source.labels, target.features
    velocity: dict = {}
    it = 0
    for epoch in range(hyper.epochs):
        pl = generate_pseudo_labels(model, Xt, "standard", source, threshold=hyper.threshold,
                                    max_iters=hyper.kmeans_max_iters, tol=hyper.kmeans_tol)
        if monitor is not None:
            monitor(epoch, model, pl)
        sums = {"CE": 0.0, "CDC_source_anchors": 0.0, "CDC_target_anchors": 0.0, "total": 0.0}
        for _ in range(K):
            ce_idx = ce_sampler.next_batch()
            src_idx = ce_idx if hyper.share_ce_batch else src_sampler.next_batch()
            tgt_idx = tgt_sampler.next_batch()
            ce_b = encode(model, Xs[ce_idx], Domain.SOURCE, Mode.TRAIN, labels=ys[ce_idx])
            src_b = ce_b if hyper.share_ce_batch else encode(
                model, Xs[src_idx], Domain.SOURCE, Mode.TRAIN, labels=ys[src_idx])
            tgt_b = encode(model, Xt[tgt_idx], Domain.TARGET, Mode.TRAIN, labels=pl.labels[tgt_idx])
            loss = uda_objective(model, src_b, tgt_b, hyper.tau, hyper.lam, ce_batch=ce_b,
                                 selection=mode, retained=pl.retained_mask[tgt_idx])
            _check_finite(loss.total, "standard adaptation")
            sgd_step(model, backward(model, loss.graph), _lrs(hyper, it / total), hyper.momentum, velocity)
            comps = {**loss.components, "total": loss.total}
            report.iteration_losses.append(comps)
            for k in sums:
                sums[k] += comps[k]
            it += 1
        _check_params(model)
        report.epochs.append({"epoch": epoch, "losses": _epoch_summary(sums, K),
                              "retained_fraction": pl.retained_fraction,
                              "kmeans_iterations": pl.iterations})
    _finish(report, model, eval_target, t0)
    return model, report


def train_sdf(pretrained: Model, target: Dataset, hyper: HyperParams, *,
              eval_target: Dataset | None = None, monitor: Monitor | None = None) -> tuple[Model, TrainReport]:
    """Source-free adaptation: only the pre-trained model and unlabelled target
    data are used. The classifier is frozen and its rows act as prototypes."""
    if np.any(target.labels != -1):
        raise InvalidConfigError("target labels must not be passed to training")
    t0 = time.perf_counter()
    model = pretrained.copy() if pretrained.source_free_prepared else prepare_source_free(pretrained)
    _copy_source_bn_to_target(model)
    report = TrainReport(seed=hyper.seed, config={"procedure": "source-free", **hyper.to_dict()})
    tgt_sampler = _sampler(len(target), hyper, 2)
    K = _iters(hyper, len(target))
    total = hyper.epochs * K
    Xt = target.features
    velocity: dict = {}
    it = 0
    for epoch in range(hyper.epochs):
        pl = generate_pseudo_labels(model, Xt, "source-free", threshold=hyper.threshold,
                                    max_iters=hyper.kmeans_max_iters, tol=hyper.kmeans_tol)
        if monitor is not None:
            monitor(epoch, model, pl)
        sums = {"SDF_CDC": 0.0}
        for _ in range(K):
            idx = tgt_sampler.next_batch()
            batch = encode(model, Xt[idx], Domain.TARGET, Mode.TRAIN, labels=pl.labels[idx])
            loss = sdf_objective(model, batch, hyper.tau, retained=pl.retained_mask[idx])
            _check_finite(loss.total, "source-free adaptation")
            sgd_step(model, backward(model, loss.graph), _lrs(hyper, it / total), hyper.momentum, velocity)
            report.iteration_losses.append({"SDF_CDC": loss.total, "total": loss.total})
            sums["SDF_CDC"] += loss.total
            it += 1
        _check_params(model)
        report.epochs.append({"epoch": epoch, "losses": _epoch_summary(sums, K),
                              "retained_fraction": pl.retained_fraction,
                              "kmeans_iterations": pl.iterations})
    _finish(report, model, eval_target, t0)
    return model, report


def hyper_from_dict(d: Mapping) -> HyperParams:
    names = {f.name for f in fields(HyperParams)}
    return HyperParams(**{k: v for k, v in d.items() if k in names})
