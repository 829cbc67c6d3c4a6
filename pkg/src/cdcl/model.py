"""Encoder/classifier model with hand-written reverse-mode gradients.

The model is ``f = h o g``: ``g`` is a small MLP producing d-dimensional
features (optionally with batch normalization kept separately per domain),
``h`` is a linear classifier. Parameters live in an ordered ``dict`` of
float64 arrays so that optimizers and checkpoints can address them by name.
"""
from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DimensionMismatchError,
    FormatError,
    InvalidConfigError,
    ZeroVectorError,
)
from .numerics import EPS_NORM, l2_normalize_rows, normalize_rows_backward

UNLABELED = -1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CKPT_MAGIC = "CDCL-CKPT v1"


class Domain(enum.IntEnum):
    SOURCE = 0
    TARGET = 1

    @classmethod
    def parse(cls, value) -> "Domain":
        if isinstance(value, Domain):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown domain {value!r}") from None
        return cls(value)

    @property
    def key(self) -> str:
        return self.name.lower()


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32,)
    feature_dim: int = 16
    activation: str = "relu"
    # BN after every hidden affine layer
    batch_norm: bool = False
    # separate BN parameters and running statistics per domain
    per_domain_bn: bool = False
    # final projection is followed by BN and trained as a newly added layer
    bottleneck: bool = True
    classifier_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.feature_dim, *self.hidden_dims)
        if any(int(x) < 1 for x in dims):
            raise InvalidConfigError(f"all layer widths must be >= 1, got {dims}")
        if self.activation not in ("relu", "tanh"):
            raise InvalidConfigError(f"activation must be 'relu' or 'tanh', got {self.activation!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class FeatureBatch:
    raw: np.ndarray
    z: np.ndarray
    norms: np.ndarray
    labels: np.ndarray
    domain: Domain
    cache: list | None = field(default=None, repr=False)
    inputs: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.z.shape[0]

    def with_labels(self, labels) -> "FeatureBatch":
        out = copy.copy(self)
        out.labels = np.asarray(labels, dtype=np.int64)
        return out


class Model:
    """Parameters, BN running statistics and classifier state.

    ``params`` maps names to trainable arrays; ``buffers`` holds BN running
    statistics. Classifier entries are ``cls.W`` and (optionally) ``cls.b``.
    """

    def __init__(self, cfg: EncoderConfig, num_classes: int):
        if num_classes < 1:
            raise InvalidConfigError("number of classes must be >= 1")
        self.cfg = cfg
        self.num_classes = int(num_classes)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.classifier_frozen = False
        self.source_free_prepared = False

    # -- structure -------------------------------------------------------
    @property
    def bn_domains(self) -> tuple[str, ...]:
        return ("source", "target") if self.cfg.per_domain_bn else ("shared",)

    def bn_key(self, domain: Domain) -> str:
        return Domain(domain).key if self.cfg.per_domain_bn else "shared"

    @property
    def has_bias(self) -> bool:
        return "cls.b" in self.params

    @property
    def classifier_weights(self) -> np.ndarray:
        return self.params["cls.W"]

    def layers(self) -> list[tuple[str, int, int, bool, bool]]:
        """``(prefix, fan_in, fan_out, has_bn, has_activation)`` per affine layer."""
        cfg = self.cfg
        out = []
        fan_in = cfg.input_dim
        for k, width in enumerate(cfg.hidden_dims):
            out.append((f"enc{k}", fan_in, width, cfg.batch_norm, True))
            fan_in = width
        out.append(("proj", fan_in, cfg.feature_dim, cfg.bottleneck, False))
        return out

    def param_group(self, name: str) -> str:
        """``"backbone"`` or ``"new"`` (bottleneck and classifier)."""
        if name.startswith("cls."):
            return "new"
        if name.startswith("proj.") and self.cfg.bottleneck:
            return "new"
        return "backbone"

    def trainable_names(self) -> list[str]:
        return [n for n in self.params if not (self.classifier_frozen and n.startswith("cls."))]

    def flat_params(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = self.trainable_names() if names is None else list(names)
        return np.concatenate([self.params[n].ravel() for n in names]) if names else np.zeros(0)

    def set_flat_params(self, flat, names: Iterable[str] | None = None) -> None:
        names = self.trainable_names() if names is None else list(names)
        flat = np.asarray(flat, dtype=np.float64)
        off = 0
        for n in names:
            p = self.params[n]
            self.params[n] = flat[off:off + p.size].reshape(p.shape).copy()
            off += p.size
        if off != flat.size:
            raise DimensionMismatchError(f"flat vector has {flat.size} entries, expected {off}")

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def equal_params(self, other: "Model") -> bool:
        if self.params.keys() != other.params.keys() or self.buffers.keys() != other.buffers.keys():
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params) and all(
            np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers
        )


def init_model(cfg: EncoderConfig, num_classes: int, seed: int) -> Model:
    """Seeded fan-in-scaled uniform initialization; BN starts at identity."""
    model = Model(cfg, num_classes)
    rng = np.random.default_rng(seed)
    for prefix, fan_in, fan_out, has_bn, _ in model.layers():
        bound = np.sqrt(6.0 / fan_in) if cfg.activation == "relu" else np.sqrt(3.0 / fan_in)
        model.params[f"{prefix}.W"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        # no bias in front of BN: the mean subtraction would cancel it
        if has_bn:
            for dom in model.bn_domains:
                model.params[f"{prefix}.bn.{dom}.gamma"] = np.ones(fan_out)
                model.params[f"{prefix}.bn.{dom}.beta"] = np.zeros(fan_out)
                model.buffers[f"{prefix}.bn.{dom}.mean"] = np.zeros(fan_out)
                model.buffers[f"{prefix}.bn.{dom}.var"] = np.ones(fan_out)
        else:
            b = 1.0 / np.sqrt(fan_in)
            model.params[f"{prefix}.b"] = rng.uniform(-b, b, size=fan_out)
    b = 1.0 / np.sqrt(cfg.feature_dim)
    model.params["cls.W"] = rng.uniform(-b, b, size=(num_classes, cfg.feature_dim))
    if cfg.classifier_bias:
        model.params["cls.b"] = rng.uniform(-b, b, size=num_classes)
    return model


# -- forward ---------------------------------------------------------------

def _bn_forward(model: Model, x, prefix, dom, mode: Mode, track_stats: bool):
    gamma = model.params[f"{prefix}.bn.{dom}.gamma"]
    beta = model.params[f"{prefix}.bn.{dom}.beta"]
    if mode is Mode.TRAIN:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        if track_stats:
            n = x.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            rm, rv = f"{prefix}.bn.{dom}.mean", f"{prefix}.bn.{dom}.var"
            model.buffers[rm] = (1 - BN_MOMENTUM) * model.buffers[rm] + BN_MOMENTUM * mu
            model.buffers[rv] = (1 - BN_MOMENTUM) * model.buffers[rv] + BN_MOMENTUM * unbiased
    else:
        mu = model.buffers[f"{prefix}.bn.{dom}.mean"]
        var = model.buffers[f"{prefix}.bn.{dom}.var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, mode)


def _act(name, a):
    return np.maximum(a, 0.0) if name == "relu" else np.tanh(a)


def encode(model: Model, inputs, domain=Domain.SOURCE, mode: Mode = Mode.EVAL, *,
           track_stats: bool = True, labels=None) -> FeatureBatch:
    """Run the encoder on a ``B x input_dim`` batch.

    Train mode normalizes with batch statistics and (if ``track_stats``)
    updates the running statistics of the selected domain's BN; Eval mode is
    side-effect free.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.cfg.input_dim:
        raise DimensionMismatchError(
            f"expected inputs of width {model.cfg.input_dim}, got shape {x.shape}")
    domain = Domain.parse(domain)
    mode = Mode(mode)
    dom = model.bn_key(domain)
    cache = []
    h = x
    for prefix, _, _, has_bn, has_act in model.layers():
        layer = {"in": h}
        a = h @ model.params[f"{prefix}.W"].T
        if has_bn:
            a, layer["bn"] = _bn_forward(model, a, prefix, dom, mode, track_stats)
        elif f"{prefix}.b" in model.params:
            a = a + model.params[f"{prefix}.b"]
        if has_act:
            layer["pre"] = a
            a = _act(model.cfg.activation, a)
        cache.append(layer)
        h = a
    raw = h
    try:
        z, norms = l2_normalize_rows(raw)
    except ZeroVectorError as exc:
        raise ZeroVectorError(f"encoder produced a zero feature vector: {exc}") from None
    if labels is None:
        labels = np.full(x.shape[0], UNLABELED, dtype=np.int64)
    return FeatureBatch(raw=raw, z=z, norms=norms, labels=np.asarray(labels, dtype=np.int64),
                        domain=domain, cache=cache, inputs=x)


def classify(model: Model, features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f.reshape(1, -1)
    if f.shape[1] != model.cfg.feature_dim:
        raise DimensionMismatchError(
            f"expected features of width {model.cfg.feature_dim}, got {f.shape[1]}")
    logits = f @ model.params["cls.W"].T
    if model.has_bias:
        logits = logits + model.params["cls.b"]
    return logits


def predict(model: Model, inputs, domain=Domain.TARGET) -> np.ndarray:
    batch = encode(model, inputs, domain, Mode.EVAL)
    return np.argmax(classify(model, batch.raw), axis=1)


def prepare_source_free(model: Model) -> Model:
    """Drop the classifier bias, unit-normalize its rows and freeze it.

    Returns a new model; the input is left untouched.
    """
    out = model.copy()
    W = out.params["cls.W"]
    norms = np.sqrt(np.einsum("ij,ij->i", W, W))
    bad = np.flatnonzero(~(norms > EPS_NORM))
    if bad.size:
        raise ZeroVectorError(f"classifier row {int(bad[0])} has norm {norms[bad[0]]:g}")
    # rows already unit length are kept bitwise so the operation is idempotent
    rescale = np.abs(norms - 1.0) > 1e-12
    if rescale.any():
        W = W.copy()
        W[rescale] /= norms[rescale, None]
        out.params["cls.W"] = W
    out.params.pop("cls.b", None)
    out.classifier_frozen = True
    out.source_free_prepared = True
    return out


# -- backward --------------------------------------------------------------

@dataclass
class LossGraph:
    """A scalar loss value plus its gradients w.r.t. encoder outputs.

    Each term is ``(batch, grad_z, grad_logits)``: ``grad_z`` is the gradient
    w.r.t. the normalized features of ``batch``; ``grad_logits`` the gradient
    w.r.t. ``classify(model, batch.raw)``. Either may be ``None``.
    """

    value: float = 0.0
    terms: list = field(default_factory=list)

    def add(self, batch: FeatureBatch, grad_z=None, grad_logits=None) -> None:
        self.terms.append((batch, grad_z, grad_logits))


def _bn_backward(dy, bn_cache, gamma):
    xhat, inv_std, mode = bn_cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if mode is Mode.TRAIN:
        n = dy.shape[0]
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


def backward(model: Model, graph: LossGraph) -> dict[str, np.ndarray]:
    """Exact gradients of ``graph`` w.r.t. every unfrozen parameter."""
    names = model.trainable_names()
    grads = {n: np.zeros_like(model.params[n]) for n in names}
    layers = model.layers()
    act = model.cfg.activation
    for batch, gz, glog in graph.terms:
        draw = np.zeros_like(batch.raw)
        if gz is not None:
            draw += normalize_rows_backward(batch.z, batch.norms, np.asarray(gz))
        if glog is not None:
            glog = np.asarray(glog)
            if "cls.W" in grads:
                grads["cls.W"] += glog.T @ batch.raw
            if "cls.b" in grads:
                grads["cls.b"] += glog.sum(axis=0)
            draw += glog @ model.params["cls.W"]
        if batch.cache is None:
            raise ValueError("feature batch carries no forward cache")
        dom = model.bn_key(batch.domain)
        d = draw
        for (prefix, _, _, has_bn, has_act), layer in zip(reversed(layers), reversed(batch.cache)):
            if has_act:
                pre = layer["pre"]
                if act == "relu":
                    d = d * (pre > 0)
                else:
                    t = np.tanh(pre)
                    d = d * (1.0 - t * t)
            if has_bn:
                gk, bk = f"{prefix}.bn.{dom}.gamma", f"{prefix}.bn.{dom}.beta"
                d, dg, db = _bn_backward(d, layer["bn"], model.params[gk])
                grads[gk] += dg
                grads[bk] += db
            elif f"{prefix}.b" in grads:
                grads[f"{prefix}.b"] += d.sum(axis=0)
            grads[f"{prefix}.W"] += d.T @ layer["in"]
            if prefix != layers[0][0]:
                d = d @ model.params[f"{prefix}.W"]
    return grads


def flatten_grads(model: Model, grads: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[n].ravel() for n in model.trainable_names()])


# -- checkpoints -----------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_checkpoint(model: Model, path) -> None:
    meta = {"M": model.num_classes, "classifier_frozen": int(model.classifier_frozen),
            "source_free_prepared": int(model.source_free_prepared)}
    for k, v in model.cfg.to_dict().items():
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = int(v)
        meta[k] = v
    lines = [CKPT_MAGIC, f"meta {len(meta)} 1"]
    lines += [f"{k}={v}" for k, v in meta.items()]
    for store in (model.params, model.buffers):
        for name, arr in store.items():
            a = np.atleast_2d(arr)
            lines.append(f"{name} {a.shape[0]} {a.shape[1]}")
            lines += [" ".join(_fmt(x) for x in row) for row in a]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_bool(s: str) -> bool:
    return s.strip().lower() in ("1", "true", "yes")


def load_checkpoint(path) -> Model:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != CKPT_MAGIC:
        raise FormatError(f"expected header {CKPT_MAGIC!r}", 1, path)
    pos = 1

    def header(expect_name=None):
        nonlocal pos
        if pos >= len(lines):
            raise FormatError("unexpected end of file", pos + 1, path)
        parts = lines[pos].split()
        if len(parts) != 3 or (expect_name and parts[0] != expect_name):
            raise FormatError(f"malformed block header {lines[pos]!r}", pos + 1, path)
        try:
            rows, cols = int(parts[1]), int(parts[2])
        except ValueError:
            raise FormatError(f"malformed block header {lines[pos]!r}", pos + 1, path) from None
        pos += 1
        return parts[0], rows, cols

    _, nmeta, _ = header("meta")
    meta = {}
    for _ in range(nmeta):
        if pos >= len(lines) or "=" not in lines[pos]:
            raise FormatError("malformed meta entry", pos + 1, path)
        k, v = lines[pos].split("=", 1)
        meta[k.strip()] = v.strip()
        pos += 1
    try:
        hidden = tuple(int(x) for x in meta["hidden_dims"].split(",") if x)
        cfg = EncoderConfig(
            input_dim=int(meta["input_dim"]), hidden_dims=hidden,
            feature_dim=int(meta["feature_dim"]), activation=meta["activation"],
            batch_norm=_parse_bool(meta["batch_norm"]),
            per_domain_bn=_parse_bool(meta["per_domain_bn"]),
            bottleneck=_parse_bool(meta["bottleneck"]),
            classifier_bias=_parse_bool(meta["classifier_bias"]),
        )
        M = int(meta["M"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad meta block: {exc}", None, path) from None
    model = init_model(cfg, M, seed=0)
    model.classifier_frozen = _parse_bool(meta.get("classifier_frozen", "0"))
    model.source_free_prepared = _parse_bool(meta.get("source_free_prepared", "0"))
    expected = {**{k: ("params", v.shape) for k, v in model.params.items()},
                **{k: ("buffers", v.shape) for k, v in model.buffers.items()}}
    seen = set()
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        start = pos + 1
        name, rows, cols = header()
        data = np.empty((rows, cols))
        for r in range(rows):
            if pos >= len(lines):
                raise FormatError("unexpected end of file", pos + 1, path)
            vals = lines[pos].split()
            if len(vals) != cols:
                raise FormatError(f"expected {cols} values, got {len(vals)}", pos + 1, path)
            try:
                data[r] = [float(v) for v in vals]
            except ValueError:
                raise FormatError("non-numeric value", pos + 1, path) from None
            pos += 1
        if name == "cls.b" and name not in expected:
            expected[name] = ("params", (M,))
        if name not in expected:
            raise FormatError(f"unknown tensor {name!r}", start, path)
        store, shape = expected[name]
        if data.size != int(np.prod(shape)):
            raise FormatError(f"tensor {name!r} has shape {data.shape}, expected {shape}", start, path)
        getattr(model, store)[name] = data.reshape(shape)
        seen.add(name)
    if "cls.b" not in seen:
        model.params.pop("cls.b", None)
    missing = set(expected) - seen - {"cls.b"}
    if missing:
        raise FormatError(f"missing tensors: {sorted(missing)}", None, path)
    # keep canonical ordering
    order = [k for k in init_model(cfg, M, 0).params if k in model.params]
    model.params = {k: model.params[k] for k in order}
    return model
